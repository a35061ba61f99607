use std::borrow::Cow;
use std::collections::HashMap;

use rand::Rng;

use super::kernels::{gemm_acc, transpose, transpose_into};
use super::{softmax_slice, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch bookkeeping for a (possibly broadcast) batched matrix product.
/// Offsets are in elements, one entry per output matrix.
#[derive(Debug, Clone)]
struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    a_offsets: Vec<usize>,
    b_offsets: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `big + small`, where `small`'s shape is a suffix of `big`'s.
    Add { big: Var, small: Var },
    Mul { big: Var, small: Var },
    Scale { input: Var, factor: f64 },
    MatMul { a: Var, b: Var, plan: MatMulPlan },
    Reshape { input: Var },
    TransposeLast2 { input: Var },
    Gather { table: Var, ids: Vec<usize> },
    Relu { input: Var },
    Dropout { input: Var, mask: Vec<f64> },
    Concat { parts: Vec<Var> },
    Slice { input: Var, offset: usize, width: usize },
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, gain: Var, bias: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, count: usize },
    Sum { input: Var },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Records a computation so that gradients can be propagated in reverse.
///
/// Nodes are appended in evaluation order, which is a topological order by
/// construction. Leaves may borrow their values, so model parameters can be
/// bound without copying. Gradients of `requires_grad` leaves accumulate
/// across calls to [`Tape::backward`] until [`Tape::zero_grads`].
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Values that can be bound to a tape leaf, either owned or borrowed.
pub trait LeafValue<'a> {
    fn into_cow(self) -> Cow<'a, Tensor>;
}

impl<'a> LeafValue<'a> for Tensor {
    fn into_cow(self) -> Cow<'a, Tensor> {
        Cow::Owned(self)
    }
}

impl<'a> LeafValue<'a> for &'a Tensor {
    fn into_cow(self) -> Cow<'a, Tensor> {
        Cow::Borrowed(self)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: impl LeafValue<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: value.into_cow(),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: impl LeafValue<'a>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: impl LeafValue<'a>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn broadcast_pair(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Var, Var), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok((a, b))
        } else if is_suffix(sa, sb) {
            Ok((b, a))
        } else {
            Err(shape_err(op, sa, sb))
        }
    }

    /// Elementwise sum. One operand may be broadcast if its shape is a
    /// trailing suffix of the other's (bias vectors, masks, position tables).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (big, small) = self.broadcast_pair("add", a, b)?;
        let bv = self.value(big);
        let sv = self.value(small);
        let width = sv.len();
        let mut data = bv.data().to_vec();
        for chunk in data.chunks_exact_mut(width) {
            for (o, &s) in chunk.iter_mut().zip(sv.data()) {
                *o += s;
            }
        }
        let value = Tensor::new(bv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { big, small }, &[big, small]))
    }

    /// Elementwise (Hadamard) product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (big, small) = self.broadcast_pair("mul", a, b)?;
        let bv = self.value(big);
        let sv = self.value(small);
        let width = sv.len();
        let mut data = bv.data().to_vec();
        for chunk in data.chunks_exact_mut(width) {
            for (o, &s) in chunk.iter_mut().zip(sv.data()) {
                *o *= s;
            }
        }
        let value = Tensor::new(bv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { big, small }, &[big, small]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcasting over
    /// the leading batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];

        let (plan, out_shape) = if batch_b.is_empty() {
            // Shared right operand: fold the batch into the row extent.
            let rows: usize = batch_a.iter().product::<usize>() * m;
            let mut shape = batch_a.to_vec();
            shape.extend([m, n]);
            (
                MatMulPlan { m: rows, k, n, a_offsets: vec![0], b_offsets: vec![0] },
                shape,
            )
        } else {
            let rank = batch_a.len().max(batch_b.len());
            let pad = |s: &[usize]| {
                let mut v = vec![1; rank - s.len()];
                v.extend_from_slice(s);
                v
            };
            let (pa, pb) = (pad(batch_a), pad(batch_b));
            let mut batch = Vec::with_capacity(rank);
            for (&x, &y) in pa.iter().zip(&pb) {
                match (x, y) {
                    _ if x == y => batch.push(x),
                    (1, _) => batch.push(y),
                    (_, 1) => batch.push(x),
                    _ => return Err(shape_err("matmul", &sa, &sb)),
                }
            }
            let total: usize = batch.iter().product();
            let mut a_offsets = Vec::with_capacity(total);
            let mut b_offsets = Vec::with_capacity(total);
            let mut idx = vec![0usize; rank];
            for _ in 0..total {
                let (mut oa, mut ob) = (0, 0);
                for d in 0..rank {
                    oa = oa * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
                    ob = ob * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
                }
                a_offsets.push(oa * m * k);
                b_offsets.push(ob * k * n);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < batch[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            let mut shape = batch;
            shape.extend([m, n]);
            (MatMulPlan { m, k, n, a_offsets, b_offsets }, shape)
        };

        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; out_shape.iter().product()];
        let (pm, pk, pn) = (plan.m, plan.k, plan.n);
        for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
            gemm_acc(
                &av[oa..oa + pm * pk],
                &bv[ob..ob + pk * pn],
                &mut out[i * pm * pn..(i + 1) * pm * pn],
                pm,
                pk,
                pn,
            );
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, plan }, &[a, b]))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let x = self.value(input);
        if shape.iter().product::<usize>() != x.len() {
            return Err(shape_err("reshape", x.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), x.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    pub fn transpose_last2(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() < 2 {
            return Err(TensorError::Axis { op: "transpose_last2", axis: 1, rank: s.len() });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.data().chunks_exact(r * c).zip(out.chunks_exact_mut(r * c)) {
            transpose_into(src, r, c, dst);
        }
        let mut shape = s.to_vec();
        let rank = shape.len();
        shape.swap(rank - 1, rank - 2);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::TransposeLast2 { input }, &[input]))
    }

    /// Embedding lookup: rows of `table [V, D]` selected by `ids`, shaped
    /// `ids_shape ++ [D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::Contract(format!("gather: table must be rank 2, got {:?}", t.shape())));
        }
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("gather", ids_shape, &[ids.len()]));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::Index { op: "gather", index: id, extent: rows });
            }
            out.extend_from_slice(t.row(id));
        }
        let mut shape = ids_shape.to_vec();
        shape.push(width);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu { input }, &[input])
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, train: bool, rng: &mut R) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { input, mask }, &[input]))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_last", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// Columns `offset..offset + width` of the last axis.
    pub fn slice_last(&mut self, input: Var, offset: usize, width: usize) -> Result<Var, TensorError> {
        let x = self.value(input);
        let s = x.shape();
        let last = *s.last().ok_or(TensorError::Axis { op: "slice_last", axis: 0, rank: 0 })?;
        if width == 0 || offset + width > last {
            return Err(TensorError::Index { op: "slice_last", index: offset + width, extent: last });
        }
        let out: Vec<f64> = x
            .data()
            .chunks_exact(last)
            .flat_map(|row| row[offset..offset + width].iter().copied())
            .collect();
        let mut shape = s.to_vec();
        *shape.last_mut().unwrap() = width;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Slice { input, offset, width }, &[input]))
    }

    /// Splits the last axis into `parts` equal pieces.
    pub fn split_last(&mut self, input: Var, parts: usize) -> Result<Vec<Var>, TensorError> {
        let last = *self.shape(input).last().unwrap_or(&0);
        if parts == 0 || !last.is_multiple_of(parts) {
            return Err(TensorError::Contract(format!("split_last: extent {last} not divisible into {parts} parts")));
        }
        let width = last / parts;
        (0..parts).map(|i| self.slice_last(input, i * width, width)).collect()
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var, TensorError> {
        let x = self.value(input);
        let s = x.shape();
        if axis >= s.len() {
            return Err(TensorError::Axis { op: "softmax", axis, rank: s.len() });
        }
        let (outer, len, inner) = axis_split(s, axis);
        let mut out = vec![0.0; x.len()];
        if inner == 1 {
            for (src, dst) in x.data().chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                softmax_slice(src, dst);
            }
        } else {
            let mut buf = vec![0.0; len];
            let mut res = vec![0.0; len];
            for o in 0..outer {
                for r in 0..inner {
                    for i in 0..len {
                        buf[i] = x.data()[(o * len + i) * inner + r];
                    }
                    softmax_slice(&buf, &mut res);
                    for i in 0..len {
                        out[(o * len + i) * inner + r] = res[i];
                    }
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { input, axis }, &[input]))
    }

    /// Standardizes each last-axis row, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let x = self.value(input);
        let d = *x.shape().last().ok_or(TensorError::Axis { op: "layer_norm", axis: 0, rank: 0 })?;
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(shape_err("layer_norm", x.shape(), g.shape()));
        }
        let rows = x.len() / d;
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm { input, gain, bias, normalized, inv_std },
            &[input, gain, bias],
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` over
    /// the last axis, skipping positions whose target equals `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var, TensorError> {
        let x = self.value(logits);
        let v = *x.shape().last().ok_or(TensorError::Axis { op: "cross_entropy", axis: 0, rank: 0 })?;
        let rows = x.len() / v;
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", x.shape(), &[targets.len()]));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t >= v {
                return Err(TensorError::Index { op: "cross_entropy", index: t, extent: v });
            }
            let row = &x.data()[r * v..(r + 1) * v];
            total += log_sum_exp(row) - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::DegenerateBatch);
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad, count },
            &[logits],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { input }, &[input])
    }

    /// Propagates d(loss)/d(node) to every `requires_grad` leaf, adding to
    /// any gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn sink<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add { big, small } => {
                if let Some(acc) = self.sink(grads, *big) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(acc) = self.sink(grads, *small) {
                    let w = acc.len();
                    for chunk in g.chunks_exact(w) {
                        acc.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul { big, small } => {
                let bv = self.value(*big).data();
                let sv = self.value(*small).data();
                let w = sv.len();
                if let Some(acc) = self.sink(grads, *big) {
                    for (a_chunk, g_chunk) in acc.chunks_exact_mut(w).zip(g.chunks_exact(w)) {
                        for j in 0..w {
                            a_chunk[j] += g_chunk[j] * sv[j];
                        }
                    }
                }
                if let Some(acc) = self.sink(grads, *small) {
                    for (g_chunk, b_chunk) in g.chunks_exact(w).zip(bv.chunks_exact(w)) {
                        for j in 0..w {
                            acc[j] += g_chunk[j] * b_chunk[j];
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(acc) = self.sink(grads, *input) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b * factor);
                }
            }
            Op::MatMul { a, b, plan } => self.matmul_backward(*a, *b, plan, g, grads),
            Op::Reshape { input } => {
                if let Some(acc) = self.sink(grads, *input) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::TransposeLast2 { input } => {
                let s = self.shape(*input);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(acc) = self.sink(grads, *input) {
                    for (gc, ac) in g.chunks_exact(r * c).zip(acc.chunks_exact_mut(r * c)) {
                        // g is [c, r]; acc is [r, c].
                        for y in 0..c {
                            for x in 0..r {
                                ac[x * c + y] += gc[y * r + x];
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let width = self.shape(*table)[1];
                if let Some(acc) = self.sink(grads, *table) {
                    for (&id, row) in ids.iter().zip(g.chunks_exact(width)) {
                        acc[id * width..(id + 1) * width]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                if let Some(acc) = self.sink(grads, *input) {
                    for ((a, &gv), &xv) in acc.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *a += gv;
                        }
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(acc) = self.sink(grads, *input) {
                    for ((a, &gv), &m) in acc.iter_mut().zip(g).zip(mask) {
                        *a += gv * m;
                    }
                }
            }
            Op::Concat { parts } => {
                let total = *self.nodes[i].value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if let Some(acc) = self.sink(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            acc[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { input, offset, width } => {
                let last = *self.shape(*input).last().unwrap();
                if let Some(acc) = self.sink(grads, *input) {
                    for (row, grow) in acc.chunks_exact_mut(last).zip(g.chunks_exact(*width)) {
                        row[*offset..offset + width].iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = axis_split(self.nodes[i].value.shape(), *axis);
                if let Some(acc) = self.sink(grads, *input) {
                    for o in 0..outer {
                        for r in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + r;
                            let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                acc[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { input, gain, bias, normalized, inv_std } => {
                let d = self.value(*gain).len();
                let gv = self.value(*gain).data();
                if let Some(acc) = self.sink(grads, *input) {
                    for (r, &istd) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &normalized[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            acc[r * d + j] += istd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                }
                if let Some(acc) = self.sink(grads, *gain) {
                    for (gr, xh) in g.chunks_exact(d).zip(normalized.chunks_exact(d)) {
                        for j in 0..d {
                            acc[j] += gr[j] * xh[j];
                        }
                    }
                }
                if let Some(acc) = self.sink(grads, *bias) {
                    for gr in g.chunks_exact(d) {
                        acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, pad, count } => {
                let x = self.value(*logits);
                let v = *x.shape().last().unwrap();
                let scale = g[0] / *count as f64;
                let mut probs = vec![0.0; v];
                if let Some(acc) = self.sink(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad {
                            continue;
                        }
                        softmax_slice(&x.data()[r * v..(r + 1) * v], &mut probs);
                        probs[t] -= 1.0;
                        acc[r * v..(r + 1) * v].iter_mut().zip(&probs).for_each(|(a, p)| *a += scale * p);
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(acc) = self.sink(grads, *input) {
                    acc.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, plan: &MatMulPlan, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let MatMulPlan { m, k, n, .. } = *plan;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if let Some(acc) = self.sink(grads, a) {
            // da = g · bᵀ
            let mut b_t: HashMap<usize, Vec<f64>> = HashMap::new();
            for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                let bt = b_t.entry(ob).or_insert_with(|| transpose(&bv[ob..ob + k * n], k, n));
                gemm_acc(&g[i * m * n..(i + 1) * m * n], bt, &mut acc[oa..oa + m * k], m, n, k);
            }
        }
        if let Some(acc) = self.sink(grads, b) {
            // db = aᵀ · g
            let mut at = vec![0.0; m * k];
            for (i, (&oa, &ob)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
                transpose_into(&av[oa..oa + m * k], m, k, &mut at);
                gemm_acc(&at, &g[i * m * n..(i + 1) * m * n], &mut acc[ob..ob + k * n], k, m, n);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
