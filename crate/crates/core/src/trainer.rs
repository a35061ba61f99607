//! Teacher-forced training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{bind_params, decoder_forward, embed_images, Mode, ModelConfig, ModelError, ModelParams};
use crate::synth::{Record, SynthError};
use crate::tensor::{argmax, Tape, Tensor, TensorError};
use crate::tokenizer::{Tokenizer, PAD};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("sample of {len} tokens is too short for teacher forcing (need at least 2)")]
    DegenerateSample { len: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("training diverged in epoch {epoch}, batch {batch}: {reason}")]
    Divergence { epoch: usize, batch: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 16,
            epochs: 20,
            seed: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            clip_norm: default_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm {c} must be positive"));
            }
        }
        Ok(())
    }
}

/// One image/report pair ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[h, w, c]` feature grid.
    pub image: Tensor,
    pub report: String,
    /// Encoded report including BOS and EOS.
    pub token_ids: Vec<u32>,
    pub labels: Vec<String>,
}

impl Sample {
    /// Encodes a generated record; reports longer than `max_len` tokens are rejected.
    pub fn from_record(record: &Record, tokenizer: &Tokenizer, max_len: usize) -> Result<Self, TrainError> {
        let token_ids = tokenizer.encode(&record.report, true);
        if token_ids.len() > max_len {
            return Err(ModelError::SequenceTooLong { len: token_ids.len(), max: max_len }.into());
        }
        Ok(Self {
            id: record.id.clone(),
            image: record.image()?,
            report: record.report.clone(),
            token_ids,
            labels: record.labels.clone(),
        })
    }
}

/// `(ids[..L-1], ids[1..])`.
pub fn make_teacher_forcing_pair(token_ids: &[u32]) -> Result<(Vec<u32>, Vec<u32>), TrainError> {
    if token_ids.len() < 2 {
        return Err(TrainError::DegenerateSample { len: token_ids.len() });
    }
    let n = token_ids.len();
    Ok((token_ids[..n - 1].to_vec(), token_ids[1..].to_vec()))
}

/// First and second moment estimates for a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'t>(tensors: impl IntoIterator<Item = &'t Tensor>) -> Self {
        let m: Vec<Vec<f64>> = tensors.into_iter().map(|t| vec![0.0; t.len()]).collect();
        Self { v: m.clone(), m, step: 0 }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        Self::new(params.named().into_iter().map(|(_, t)| t))
    }
}

/// One bias-corrected Adam update of `params` given matching `grads`.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Vec<f64>], state: &mut AdamState, cfg: &TrainConfig) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameters");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        assert_eq!(p.len(), g.len(), "gradient length mismatch");
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Loss and gradients of one padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchResult {
    pub loss: f64,
    /// Gradients in canonical parameter order.
    pub grads: Vec<Vec<f64>>,
    pub correct: usize,
    pub tokens: usize,
}

/// Pads the teacher-forcing pairs of `samples` with PAD to the longest one.
pub fn pad_batch(samples: &[&Sample]) -> Result<(Vec<Vec<u32>>, Vec<usize>), TrainError> {
    let pairs = samples
        .iter()
        .map(|s| make_teacher_forcing_pair(&s.token_ids))
        .collect::<Result<Vec<_>, _>>()?;
    let width = pairs.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len() * width);
    for (mut input, target) in pairs {
        input.resize(width, PAD);
        inputs.push(input);
        targets.extend(target.iter().map(|&t| t as usize));
        targets.extend(std::iter::repeat_n(PAD as usize, width - target.len()));
    }
    Ok((inputs, targets))
}

/// Forward and backward pass over already padded inputs. With `mode`
/// [`Mode::Eval`] and `want_grads` false this is a pure evaluation.
pub fn batch_loss(
    params: &ModelParams,
    cfg: &ModelConfig,
    images: &[&Tensor],
    inputs: &[Vec<u32>],
    targets: &[usize],
    mode: &mut Mode<'_>,
    want_grads: bool,
) -> Result<BatchResult, TrainError> {
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params, want_grads);
    let image_seq = embed_images(&mut tape, &vars, cfg, images)?;
    let out = decoder_forward(&mut tape, &vars, cfg, image_seq, inputs, mode)?;
    let loss = tape.cross_entropy(out.logits, targets, PAD as usize)?;

    let logits = tape.value(out.logits);
    let v = cfg.vocab_size;
    let mut correct = 0;
    let mut tokens = 0;
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD as usize {
            continue;
        }
        tokens += 1;
        if argmax(&logits.data()[r * v..(r + 1) * v]) == t {
            correct += 1;
        }
    }
    let loss_value = tape.value(loss).item();
    let grads = if want_grads && loss_value.is_finite() {
        tape.backward(loss)?;
        vars.named()
            .into_iter()
            .map(|(_, &var)| tape.grad(var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(var).len()]))
            .collect()
    } else {
        Vec::new()
    };
    Ok(BatchResult { loss: loss_value, grads, correct, tokens })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Token-weighted mean of per-batch losses.
    pub mean_loss: f64,
    pub token_accuracy: f64,
    pub tokens: usize,
    /// Loss of each batch before its update, in processing order.
    pub batch_losses: Vec<f64>,
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch as u64) * 2 + stream);
    rng
}

/// Sample indices for each batch of `epoch`, after a seeded shuffle.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// One pass over `samples`, updating `params` after every batch.
pub fn train_epoch(
    samples: &[Sample],
    params: &mut ModelParams,
    state: &mut AdamState,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    train_cfg.validate()?;
    let mut dropout_rng = epoch_rng(train_cfg.seed, epoch, 1);
    let mut weighted = 0.0;
    let mut correct = 0;
    let mut tokens = 0;
    let mut batch_losses = Vec::new();
    for (b, idx) in epoch_batches(samples.len(), train_cfg.batch_size, train_cfg.seed, epoch).iter().enumerate() {
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (inputs, targets) = pad_batch(&batch)?;
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let mut mode = Mode::Train(&mut dropout_rng);
        let mut result = batch_loss(params, model_cfg, &images, &inputs, &targets, &mut mode, true)?;
        if !result.loss.is_finite() {
            return Err(TrainError::Divergence { epoch, batch: b, reason: format!("loss is {}", result.loss) });
        }
        if let Some(max) = train_cfg.clip_norm {
            clip_global_norm(&mut result.grads, max);
        }
        adam_step(&mut params.slots_mut(), &result.grads, state, train_cfg);
        if !params.is_finite() {
            return Err(TrainError::Divergence { epoch, batch: b, reason: "non-finite parameter after update".into() });
        }
        weighted += result.loss * result.tokens as f64;
        correct += result.correct;
        tokens += result.tokens;
        batch_losses.push(result.loss);
    }
    Ok(EpochStats {
        epoch,
        mean_loss: weighted / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        tokens,
        batch_losses,
    })
}

/// Eval-mode loss and token accuracy over `samples`, without updates.
pub fn evaluate(
    samples: &[Sample],
    params: &ModelParams,
    model_cfg: &ModelConfig,
    batch_size: usize,
) -> Result<EpochStats, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut weighted = 0.0;
    let mut correct = 0;
    let mut tokens = 0;
    let mut batch_losses = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let (inputs, targets) = pad_batch(&batch)?;
        let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
        let r = batch_loss(params, model_cfg, &images, &inputs, &targets, &mut Mode::Eval, false)?;
        weighted += r.loss * r.tokens as f64;
        correct += r.correct;
        tokens += r.tokens;
        batch_losses.push(r.loss);
    }
    Ok(EpochStats {
        epoch: 0,
        mean_loss: weighted / tokens as f64,
        token_accuracy: correct as f64 / tokens as f64,
        tokens,
        batch_losses,
    })
}
