//! Captioning transformer: a decoder stack whose second attention sub-layer
//! attends over a flattened grid of image features.

mod checkpoint;
mod forward;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    causal_mask, decoder_forward, embed_images, flatten_image_features, multi_head_attention, positional_encoding,
    scaled_dot_product_attention, score, unflatten_image_features, DecoderOutput, Mode, Scored, MASK_VALUE,
};
pub use params::{bind_params, AttentionParams, LayerParams, ModelParams, ParamVars, Params};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("image features have shape {actual:?}, config expects {expected:?}")]
    ImageShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Spatial extents of the image feature grid fed to cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageGrid {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub n_head: usize,
    pub d_model: usize,
    pub dff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Longest token sequence the decoder accepts.
    pub max_len: usize,
    pub image_grid: ImageGrid,
    /// Add sinusoidal position codes to the flattened image sequence.
    #[serde(default = "default_true")]
    pub image_positional_encoding: bool,
}

impl ModelConfig {
    /// The full-size configuration: 6 layers, 8 heads, 512-wide, 7×7×1024 features.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            num_layers: 6,
            n_head: 8,
            d_model: 512,
            dff: 2048,
            dropout: 0.2,
            vocab_size,
            max_len: 128,
            image_grid: ImageGrid { height: 7, width: 7, channels: 1024 },
            image_positional_encoding: true,
        }
    }

    /// Laptop-sized default used by the CLI and the test suites.
    pub fn desk_scale(vocab_size: usize) -> Self {
        Self {
            num_layers: 2,
            n_head: 4,
            d_model: 64,
            dff: 128,
            dropout: 0.1,
            vocab_size,
            max_len: 128,
            image_grid: ImageGrid { height: 7, width: 7, channels: 16 },
            image_positional_encoding: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_layers == 0 || self.n_head == 0 || self.d_model == 0 || self.dff == 0 {
            return bad("layer, head and width counts must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return bad(format!("d_model {} not divisible by n_head {}", self.d_model, self.n_head));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} must be at least 2", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= crate::tokenizer::SPECIAL_TOKENS.len() {
            return bad(format!("vocab_size {} leaves no room beyond the reserved tokens", self.vocab_size));
        }
        let g = self.image_grid;
        if g.height == 0 || g.width == 0 || g.channels == 0 {
            return bad(format!("image grid {g:?} has a zero extent"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validate_rejects_bad_configs() {
        let ok = ModelConfig::desk_scale(64);
        assert!(ok.validate().is_ok());
        assert!(ModelConfig::full_scale(1000).validate().is_ok());
        let mut c = ok.clone();
        c.n_head = 5;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.max_len = 1;
        assert!(c.validate().is_err());
        let mut c = ok.clone();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = ok;
        c.vocab_size = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_defaults_image_encoding_on() {
        let mut v = serde_json::to_value(ModelConfig::desk_scale(32)).unwrap();
        v.as_object_mut().unwrap().remove("image_positional_encoding");
        let c: ModelConfig = serde_json::from_value(v).unwrap();
        assert!(c.image_positional_encoding);
    }
}
