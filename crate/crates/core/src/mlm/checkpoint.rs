//! Binary checkpoint container for [`TinyTransformer`].
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic          8 bytes  "PETCKPT\0"
//! version        u32      1
//! layers         u32
//! model_dim      u32
//! heads          u32
//! ff_dim         u32
//! max_positions  u32
//! vocab_size     u32
//! num_labels     u32      0 when there is no classifier head
//! seed           u64
//! param_count    u32
//! per parameter, in declaration order:
//!     name_len u32, name (utf-8), rows u32, cols u32, data f32 × rows·cols
//! adam_step      u64
//! first moments  f32 × Σ rows·cols   (parameter order)
//! second moments f32 × Σ rows·cols   (parameter order)
//! ```

use std::path::Path;

use crate::error::{PetError, Result};
use crate::mlm::optim::AdamState;
use crate::mlm::tensor::Tensor;
use crate::mlm::{TinyTransformer, TinyTransformerConfig};

pub const MAGIC: &[u8; 8] = b"PETCKPT\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f64]) {
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(model: &TinyTransformer) -> Vec<u8> {
    let cfg = model.config();
    let params = model.params();
    let mut out = Vec::with_capacity(64 + params.num_scalars() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        cfg.layers,
        cfg.model_dim,
        cfg.heads,
        cfg.ff_dim,
        cfg.max_positions,
        model.vocab_size(),
        model.head().map_or(0, |h| h.num_labels()),
    ] {
        put_u32(&mut out, v);
    }
    out.extend_from_slice(&cfg.seed.to_le_bytes());
    put_u32(&mut out, params.len());
    for (name, t) in params.names.iter().zip(&params.tensors) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rows);
        put_u32(&mut out, t.cols);
        put_f32s(&mut out, &t.data);
    }
    let opt = model.optimizer();
    out.extend_from_slice(&opt.step.to_le_bytes());
    for t in opt.m.iter().chain(&opt.v) {
        put_f32s(&mut out, &t.data);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(PetError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 4)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<TinyTransformer> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(PetError::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version as u32 != VERSION {
        return Err(PetError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let layers = r.u32()?;
    let model_dim = r.u32()?;
    let heads = r.u32()?;
    let ff_dim = r.u32()?;
    let max_positions = r.u32()?;
    let vocab_size = r.u32()?;
    let num_labels = r.u32()?;
    let seed = r.u64()?;
    let config = TinyTransformerConfig {
        layers,
        model_dim,
        heads,
        ff_dim,
        max_positions,
        seed,
    };
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        r.take(name_len)?;
        let rows = r.u32()?;
        let cols = r.u32()?;
        tensors.push(Tensor::from_vec(rows, cols, r.f32s(rows * cols)?));
    }
    let step = r.u64()?;
    let moments = |r: &mut Reader| -> Result<Vec<Tensor>> {
        tensors
            .iter()
            .map(|t| Ok(Tensor::from_vec(t.rows, t.cols, r.f32s(t.len())?)))
            .collect()
    };
    let m = moments(&mut r)?;
    let v = moments(&mut r)?;
    if r.pos != buf.len() {
        return Err(PetError::Checkpoint("trailing bytes".into()));
    }
    TinyTransformer::from_parts(
        config,
        vocab_size,
        num_labels,
        tensors,
        AdamState { step, m, v },
    )
}

pub fn save(model: &TinyTransformer, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TinyTransformer> {
    from_bytes(&std::fs::read(path)?)
}
