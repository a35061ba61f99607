//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic "RCKT" | version u8
//! num_layers n_head d_model dff u32 | dropout f64 | vocab_size max_len u32
//! grid height width channels u32 | image_positional_encoding u8
//! tensor count u32
//! per tensor: name_len u32 | name utf-8 | rank u32 | extents u32.. | data f32..
//! ```

use std::path::Path;

use super::{ImageGrid, ModelConfig, ModelError, ModelParams, Params};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCKT";
pub const CHECKPOINT_VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// Serializes `cfg` and `params`. Values are stored as 32-bit floats.
pub fn write_checkpoint(cfg: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for v in [cfg.num_layers, cfg.n_head, cfg.d_model, cfg.dff] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&cfg.dropout.to_le_bytes());
    for v in [cfg.vocab_size, cfg.max_len, cfg.image_grid.height, cfg.image_grid.width, cfg.image_grid.channels] {
        put_u32(&mut out, v);
    }
    out.push(cfg.image_positional_encoding as u8);
    let named = params.named();
    put_u32(&mut out, named.len());
    for (name, t) in named {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &e in t.shape() {
            put_u32(&mut out, e);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn fail<T>(&self, message: impl std::fmt::Display) -> Result<T, String> {
        Err(format!("byte {}: {message}", self.pos))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8], String> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated while reading {what}"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, String> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize, String> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64, String> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }
}

fn parse(bytes: &[u8]) -> Result<(ModelConfig, ModelParams), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not a checkpoint");
    }
    let version = r.u8("version")?;
    if version != CHECKPOINT_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let num_layers = r.u32("num_layers")?;
    let n_head = r.u32("n_head")?;
    let d_model = r.u32("d_model")?;
    let dff = r.u32("dff")?;
    let dropout = r.f64("dropout")?;
    let vocab_size = r.u32("vocab_size")?;
    let max_len = r.u32("max_len")?;
    let image_grid = ImageGrid { height: r.u32("grid height")?, width: r.u32("grid width")?, channels: r.u32("channels")? };
    let image_positional_encoding = match r.u8("image encoding flag")? {
        0 => false,
        1 => true,
        other => return r.fail(format!("image encoding flag {other} is not 0 or 1")),
    };
    let cfg = ModelConfig { num_layers, n_head, d_model, dff, dropout, vocab_size, max_len, image_grid, image_positional_encoding };
    cfg.validate().map_err(|e| format!("byte {}: {e}", r.pos))?;

    let layout = Params::layout(&cfg);
    let count = r.u32("tensor count")?;
    let expected = layout.named().len();
    if count != expected {
        return r.fail(format!("{count} tensors, config implies {expected}"));
    }
    let params = layout.try_map(|name, shape| {
        let name_len = r.u32("name length")?;
        let found = r.take(name_len, "tensor name")?;
        if found != name.as_bytes() {
            return r.fail(format!("expected tensor {name}, found {:?}", String::from_utf8_lossy(found)));
        }
        let rank = r.u32("rank")?;
        if rank > 8 {
            return r.fail(format!("{name}: implausible rank {rank}"));
        }
        let extents = (0..rank).map(|_| r.u32("extent")).collect::<Result<Vec<_>, _>>()?;
        if extents != *shape {
            return r.fail(format!("{name}: shape {extents:?}, config implies {shape:?}"));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4, name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Tensor::new(shape.clone(), data).map_err(|e| e.to_string())
    })?;
    if r.pos != bytes.len() {
        return r.fail(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok((cfg, params))
}

/// Parses a checkpoint, validating every tensor name and shape against the
/// embedded config.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams), ModelError> {
    parse(bytes).map_err(|message| ModelError::Checkpoint { path: "<memory>".into(), message })
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<(), ModelError> {
    std::fs::write(path, write_checkpoint(cfg, params))
        .map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), message: e.to_string() })
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams), ModelError> {
    let checkpoint_err = |message: String| ModelError::Checkpoint { path: path.display().to_string(), message };
    let bytes = std::fs::read(path).map_err(|e| checkpoint_err(e.to_string()))?;
    parse(&bytes).map_err(checkpoint_err)
}
