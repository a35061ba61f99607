#![allow(dead_code)]

pub mod metric_oracles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reportgen::tensor::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that vanishing gradients
/// are compared absolutely.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

/// Central finite differences of a scalar-valued function of several tensors.
pub fn numeric_grads(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grads = vec![0.0; inputs[i].len()];
        for (j, g) in grads.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *g = (f(&plus) - f(&minus)) / (2.0 * FD_STEP);
        }
        out.push(grads);
    }
    out
}

/// Builds the graph on a tape whose inputs are all trainable leaves, runs
/// backward and compares against central differences. Returns the largest
/// relative error over every input element.
pub fn grad_check(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let numeric = numeric_grads(inputs, &eval);
    let mut worst: f64 = 0.0;
    for (v, num) in vars.iter().zip(&numeric) {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; num.len()]);
        for (a, n) in analytic.iter().zip(num) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed random projection used to turn tensor outputs into a scalar loss
/// with non-trivial gradients.
pub fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = random_tensor(&mut r, tape.shape(x));
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}
