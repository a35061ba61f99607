use std::convert::Infallible;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::tensor::{Tape, Tensor, Var};

/// Projections of one multi-head attention sub-layer. Column block `i` of
/// `query`, `key` and `value` (width `d_model / n_head`) is head `i`'s
/// projection; `output` maps the concatenated heads back to `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T> {
    pub query: T,
    pub key: T,
    pub value: T,
    pub output: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub self_attention: AttentionParams<T>,
    pub cross_attention: AttentionParams<T>,
    pub norm1_gain: T,
    pub norm1_bias: T,
    pub norm2_gain: T,
    pub norm2_bias: T,
    pub norm3_gain: T,
    pub norm3_bias: T,
    pub ff_hidden_weight: T,
    pub ff_hidden_bias: T,
    pub ff_output_weight: T,
    pub ff_output_bias: T,
}

/// Every learnable tensor of the model, generic over what is stored per
/// slot: values ([`ModelParams`]), tape handles ([`ParamVars`]) or shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub token_embedding: T,
    pub patch_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    pub output_projection: T,
}

pub type ModelParams = Params<Tensor>;
pub type ParamVars = Params<Var>;

impl<T> AttentionParams<T> {
    fn try_map<'s, U, E>(&'s self, prefix: &str, f: &mut impl FnMut(&str, &'s T) -> Result<U, E>) -> Result<AttentionParams<U>, E> {
        Ok(AttentionParams {
            query: f(&format!("{prefix}.query"), &self.query)?,
            key: f(&format!("{prefix}.key"), &self.key)?,
            value: f(&format!("{prefix}.value"), &self.value)?,
            output: f(&format!("{prefix}.output"), &self.output)?,
        })
    }

    fn fields<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s T)>) {
        out.push((format!("{prefix}.query"), &self.query));
        out.push((format!("{prefix}.key"), &self.key));
        out.push((format!("{prefix}.value"), &self.value));
        out.push((format!("{prefix}.output"), &self.output));
    }

    fn fields_mut<'s>(&'s mut self, out: &mut Vec<&'s mut T>) {
        out.extend([&mut self.query, &mut self.key, &mut self.value, &mut self.output]);
    }
}

impl<T> LayerParams<T> {
    fn try_map<'s, U, E>(&'s self, prefix: &str, f: &mut impl FnMut(&str, &'s T) -> Result<U, E>) -> Result<LayerParams<U>, E> {
        let self_attention = self.self_attention.try_map(&format!("{prefix}.self_attention"), f)?;
        let cross_attention = self.cross_attention.try_map(&format!("{prefix}.cross_attention"), f)?;
        let mut leaf = |name: &str, v: &'s T| f(&format!("{prefix}.{name}"), v);
        Ok(LayerParams {
            self_attention,
            cross_attention,
            norm1_gain: leaf("norm1_gain", &self.norm1_gain)?,
            norm1_bias: leaf("norm1_bias", &self.norm1_bias)?,
            norm2_gain: leaf("norm2_gain", &self.norm2_gain)?,
            norm2_bias: leaf("norm2_bias", &self.norm2_bias)?,
            norm3_gain: leaf("norm3_gain", &self.norm3_gain)?,
            norm3_bias: leaf("norm3_bias", &self.norm3_bias)?,
            ff_hidden_weight: leaf("ff_hidden_weight", &self.ff_hidden_weight)?,
            ff_hidden_bias: leaf("ff_hidden_bias", &self.ff_hidden_bias)?,
            ff_output_weight: leaf("ff_output_weight", &self.ff_output_weight)?,
            ff_output_bias: leaf("ff_output_bias", &self.ff_output_bias)?,
        })
    }

    fn fields<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s T)>) {
        self.self_attention.fields(&format!("{prefix}.self_attention"), out);
        self.cross_attention.fields(&format!("{prefix}.cross_attention"), out);
        for (name, v) in [
            ("norm1_gain", &self.norm1_gain),
            ("norm1_bias", &self.norm1_bias),
            ("norm2_gain", &self.norm2_gain),
            ("norm2_bias", &self.norm2_bias),
            ("norm3_gain", &self.norm3_gain),
            ("norm3_bias", &self.norm3_bias),
            ("ff_hidden_weight", &self.ff_hidden_weight),
            ("ff_hidden_bias", &self.ff_hidden_bias),
            ("ff_output_weight", &self.ff_output_weight),
            ("ff_output_bias", &self.ff_output_bias),
        ] {
            out.push((format!("{prefix}.{name}"), v));
        }
    }

    fn fields_mut<'s>(&'s mut self, out: &mut Vec<&'s mut T>) {
        self.self_attention.fields_mut(out);
        self.cross_attention.fields_mut(out);
        out.extend([
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.norm3_gain,
            &mut self.norm3_bias,
            &mut self.ff_hidden_weight,
            &mut self.ff_hidden_bias,
            &mut self.ff_output_weight,
            &mut self.ff_output_bias,
        ]);
    }
}

impl<T> Params<T> {
    /// Rebuilds the structure slot by slot, in canonical order.
    pub fn try_map<'s, U, E>(&'s self, mut f: impl FnMut(&str, &'s T) -> Result<U, E>) -> Result<Params<U>, E> {
        let token_embedding = f("token_embedding", &self.token_embedding)?;
        let patch_embedding = f("patch_embedding", &self.patch_embedding)?;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.try_map(&format!("layers.{i}"), &mut f))
            .collect::<Result<_, _>>()?;
        let output_projection = f("output_projection", &self.output_projection)?;
        Ok(Params { token_embedding, patch_embedding, layers, output_projection })
    }

    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> Params<U> {
        match self.try_map(|n, v| Ok::<_, Infallible>(f(n, v))) {
            Ok(p) => p,
            Err(never) => match never {},
        }
    }

    /// `(name, slot)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("token_embedding".to_owned(), &self.token_embedding),
            ("patch_embedding".to_owned(), &self.patch_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            l.fields(&format!("layers.{i}"), &mut out);
        }
        out.push(("output_projection".to_owned(), &self.output_projection));
        out
    }

    /// Mutable slots in the same canonical order as [`Params::named`].
    pub fn slots_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_embedding, &mut self.patch_embedding];
        for l in &mut self.layers {
            l.fields_mut(&mut out);
        }
        out.push(&mut self.output_projection);
        out
    }
}

impl Params<Vec<usize>> {
    /// Shape of every parameter for `cfg`.
    pub fn layout(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let attention = || AttentionParams { query: vec![d, d], key: vec![d, d], value: vec![d, d], output: vec![d, d] };
        let layer = || LayerParams {
            self_attention: attention(),
            cross_attention: attention(),
            norm1_gain: vec![d],
            norm1_bias: vec![d],
            norm2_gain: vec![d],
            norm2_bias: vec![d],
            norm3_gain: vec![d],
            norm3_bias: vec![d],
            ff_hidden_weight: vec![d, cfg.dff],
            ff_hidden_bias: vec![cfg.dff],
            ff_output_weight: vec![cfg.dff, d],
            ff_output_bias: vec![d],
        };
        Params {
            token_embedding: vec![cfg.vocab_size, d],
            patch_embedding: vec![cfg.image_grid.channels, d],
            layers: (0..cfg.num_layers).map(|_| layer()).collect(),
            output_projection: vec![d, cfg.vocab_size],
        }
    }
}

impl ModelParams {
    /// Random initialization: matrices uniform in ±√(6/(fan_in+fan_out)),
    /// layer-norm gains one, biases zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Params::layout(cfg).map(|name, shape| {
            if name.ends_with("_gain") {
                Tensor::filled(shape, 1.0)
            } else if name.ends_with("_bias") {
                Tensor::zeros(shape)
            } else {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit))
            }
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// Binds every parameter as a borrowed leaf on `tape`.
pub fn bind_params<'a>(tape: &mut Tape<'a>, params: &'a ModelParams, trainable: bool) -> ParamVars {
    params.map(|_, t| tape.leaf(t, trainable))
}
