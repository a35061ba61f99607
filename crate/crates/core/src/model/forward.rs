use rand::RngCore;

use super::{bind_params, AttentionParams, ModelConfig, ModelError, ModelParams, ParamVars};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Additive score offset for disallowed attention positions.
pub const MASK_VALUE: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Whether dropout is active. Training mode draws masks from the given RNG.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn RngCore),
}

/// Handles produced by [`decoder_forward`]. Attention weights are indexed
/// `[layer][head]`, each of shape `[B, Lt, Lk]`.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub logits: Var,
    pub self_attention: Vec<Vec<Var>>,
    pub cross_attention: Vec<Vec<Var>>,
}

/// Eval-mode forward pass of a single example, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    /// `[Lt, vocab_size]`
    pub logits: Tensor,
    /// `[layer][head]`, each `[Lt, h·w]`.
    pub cross_attention: Vec<Vec<Tensor>>,
}

impl Scored {
    pub fn next_token_logits(&self) -> &[f64] {
        let rows = self.logits.shape()[0];
        self.logits.row(rows - 1)
    }
}

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn positional_encoding(length: usize, d_model: usize) -> Tensor {
    Tensor::from_fn(&[length, d_model], |flat| {
        let (p, j) = (flat / d_model, flat % d_model);
        let pair = (j - j % 2) as f64;
        let angle = p as f64 / 10000f64.powf(pair / d_model as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// `[len, len]` additive mask: 0 where `j <= i`, [`MASK_VALUE`] above the diagonal.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |flat| if flat % len > flat / len { MASK_VALUE } else { 0.0 })
}

/// `[h, w, c]` to `[h·w, c]`; cell `(r, col)` lands at row `r·w + col`.
pub fn flatten_image_features(grid: &Tensor) -> Result<Tensor, TensorError> {
    match *grid.shape() {
        [h, w, c] => grid.clone().reshape(vec![h * w, c]),
        _ => Err(TensorError::Contract(format!("image grid must be rank 3, got {:?}", grid.shape()))),
    }
}

/// Inverse of [`flatten_image_features`]. Also accepts a `[h·w]` attention row.
pub fn unflatten_image_features(seq: &Tensor, height: usize, width: usize) -> Result<Tensor, TensorError> {
    let mut shape = vec![height, width];
    match *seq.shape() {
        [n] if n == height * width => {}
        [n, c] if n == height * width => shape.push(c),
        _ => {
            return Err(TensorError::Dimension {
                op: "unflatten_image_features",
                left: seq.shape().to_vec(),
                right: shape,
            })
        }
    }
    seq.clone().reshape(shape)
}

/// `softmax(Q·Kᵀ/√d + mask)·V`, returning the output and the weights.
pub fn scaled_dot_product_attention(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<Var>,
) -> Result<(Var, Var), TensorError> {
    let (dq, dk) = (*tape.shape(q).last().unwrap_or(&0), *tape.shape(k).last().unwrap_or(&0));
    if dq != dk || dq == 0 {
        return Err(TensorError::Dimension {
            op: "scaled_dot_product_attention",
            left: tape.shape(q).to_vec(),
            right: tape.shape(k).to_vec(),
        });
    }
    let kt = tape.transpose_last2(k)?;
    let raw = tape.matmul(q, kt)?;
    let mut scores = tape.scale(raw, 1.0 / (dq as f64).sqrt());
    if let Some(m) = mask {
        scores = tape.add(scores, m)?;
    }
    let axis = tape.shape(scores).len() - 1;
    let weights = tape.softmax(scores, axis)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Multi-head attention. Head `i` uses column block `i` of each projection;
/// head outputs are concatenated and projected by `p.output`. Returns the
/// output `[.., Lq, d_model]` and per-head weights `[.., Lq, Lk]`.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    p: &AttentionParams<Var>,
    n_head: usize,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>), TensorError> {
    let q = tape.matmul(q_in, p.query)?;
    let k = tape.matmul(k_in, p.key)?;
    let v = tape.matmul(v_in, p.value)?;
    let (qs, ks, vs) = (tape.split_last(q, n_head)?, tape.split_last(k, n_head)?, tape.split_last(v, n_head)?);
    let mut heads = Vec::with_capacity(n_head);
    let mut weights = Vec::with_capacity(n_head);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let (out, w) = scaled_dot_product_attention(tape, qh, kh, vh, mask)?;
        heads.push(out);
        weights.push(w);
    }
    let joined = if heads.len() == 1 { heads[0] } else { tape.concat_last(&heads)? };
    Ok((tape.matmul(joined, p.output)?, weights))
}

/// Stacks image grids into `[B, h·w, c]`, applies the patch embedding and,
/// when enabled, adds position codes. Result is `[B, h·w, d_model]`.
pub fn embed_images(tape: &mut Tape<'_>, vars: &ParamVars, cfg: &ModelConfig, images: &[&Tensor]) -> Result<Var, ModelError> {
    let expected = cfg.image_grid.shape();
    for img in images {
        if img.shape() != expected {
            return Err(ModelError::ImageShape { expected: expected.to_vec(), actual: img.shape().to_vec() });
        }
    }
    let stacked = Tensor::stack(images)?.reshape(vec![images.len(), cfg.image_grid.cells(), cfg.image_grid.channels])?;
    let x = tape.constant(stacked);
    let mut seq = tape.matmul(x, vars.patch_embedding)?;
    if cfg.image_positional_encoding {
        let pe = tape.constant(positional_encoding(cfg.image_grid.cells(), cfg.d_model));
        seq = tape.add(seq, pe)?;
    }
    Ok(seq)
}

fn dropout(tape: &mut Tape<'_>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var, TensorError> {
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train(rng) => tape.dropout(x, p, true, &mut **rng),
    }
}

/// Runs the decoder stack over a batch of equal-length token sequences.
/// `image_seq` is `[B, Li, d_model]` from [`embed_images`]; logits are
/// `[B, Lt, vocab_size]`.
pub fn decoder_forward(
    tape: &mut Tape<'_>,
    vars: &ParamVars,
    cfg: &ModelConfig,
    image_seq: Var,
    tokens: &[Vec<u32>],
    mode: &mut Mode<'_>,
) -> Result<DecoderOutput, ModelError> {
    let batch = tokens.len();
    let len = tokens.first().map_or(0, Vec::len);
    if len == 0 || tokens.iter().any(|t| t.len() != len) {
        return Err(ModelError::Tensor(TensorError::Contract(
            "decoder_forward needs a non-empty batch of equal-length sequences".into(),
        )));
    }
    if len > cfg.max_len {
        return Err(ModelError::SequenceTooLong { len, max: cfg.max_len });
    }
    let image_shape = tape.shape(image_seq);
    if image_shape.len() != 3 || image_shape[0] != batch || image_shape[2] != cfg.d_model {
        return Err(ModelError::ImageShape {
            expected: vec![batch, cfg.image_grid.cells(), cfg.d_model],
            actual: image_shape.to_vec(),
        });
    }
    let mut ids = Vec::with_capacity(batch * len);
    for &id in tokens.iter().flatten() {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
        }
        ids.push(id as usize);
    }

    let embedded = tape.gather(vars.token_embedding, &ids, &[batch, len])?;
    let scaled = tape.scale(embedded, (cfg.d_model as f64).sqrt());
    let pe = tape.constant(positional_encoding(len, cfg.d_model));
    let summed = tape.add(scaled, pe)?;
    let mut x = dropout(tape, summed, cfg.dropout, mode)?;
    let mask = tape.constant(causal_mask(len));

    let mut self_attention = Vec::with_capacity(cfg.num_layers);
    let mut cross_attention = Vec::with_capacity(cfg.num_layers);
    for layer in &vars.layers {
        let (a, w_self) = multi_head_attention(tape, &layer.self_attention, cfg.n_head, x, x, x, Some(mask))?;
        let a = dropout(tape, a, cfg.dropout, mode)?;
        let r = tape.add(x, a)?;
        x = tape.layer_norm(r, layer.norm1_gain, layer.norm1_bias, LAYER_NORM_EPS)?;

        let (c, w_cross) =
            multi_head_attention(tape, &layer.cross_attention, cfg.n_head, x, image_seq, image_seq, None)?;
        let c = dropout(tape, c, cfg.dropout, mode)?;
        let r = tape.add(x, c)?;
        x = tape.layer_norm(r, layer.norm2_gain, layer.norm2_bias, LAYER_NORM_EPS)?;

        let h = tape.matmul(x, layer.ff_hidden_weight)?;
        let h = tape.add(h, layer.ff_hidden_bias)?;
        let h = tape.relu(h);
        let f = tape.matmul(h, layer.ff_output_weight)?;
        let f = tape.add(f, layer.ff_output_bias)?;
        let f = dropout(tape, f, cfg.dropout, mode)?;
        let r = tape.add(x, f)?;
        x = tape.layer_norm(r, layer.norm3_gain, layer.norm3_bias, LAYER_NORM_EPS)?;

        self_attention.push(w_self);
        cross_attention.push(w_cross);
    }
    let logits = tape.matmul(x, vars.output_projection)?;
    Ok(DecoderOutput { logits, self_attention, cross_attention })
}

/// Eval-mode logits and cross-attention weights for one image and prefix.
pub fn score(params: &ModelParams, cfg: &ModelConfig, image: &Tensor, tokens: &[u32]) -> Result<Scored, ModelError> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, false);
    let image_seq = embed_images(&mut tape, &vars, cfg, &[image])?;
    let out = decoder_forward(&mut tape, &vars, cfg, image_seq, &[tokens.to_vec()], &mut Mode::Eval)?;
    let drop_batch = |v: Var| {
        let t = tape.value(v);
        t.clone().reshape(t.shape()[1..].to_vec())
    };
    let logits = drop_batch(out.logits)?;
    let cross_attention = out
        .cross_attention
        .iter()
        .map(|heads| heads.iter().map(|&w| drop_batch(w)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Scored { logits, cross_attention })
}
