//! Checkpoint layout (little-endian):
//!
//! ```text
//! magic "LFLM" | u32 version
//! u32 vocab_size | u32 d_model | u32 num_layers | u32 num_heads
//! u32 d_ff | u32 context_length | u64 seed
//! u32 tensor count
//! per tensor: u16 name length, name bytes, u8 ndim, u32 dims..., f32 data (row-major)
//! ```

use std::path::Path;

use super::params::{layout, Tensor};
use super::{Model, ModelConfig, Params};
use crate::binio::{self, ByteReader, ByteWriter, MAGIC_CHECKPOINT};
use crate::error::Result;

pub const CHECKPOINT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &Model<f32>) -> Vec<u8> {
    let c = &model.config;
    let mut w = ByteWriter::header(MAGIC_CHECKPOINT, CHECKPOINT_VERSION);
    for v in [
        c.vocab_size,
        c.d_model,
        c.num_layers,
        c.num_heads,
        c.d_ff,
        c.context_length,
    ] {
        w.u32(v as u32);
    }
    w.u64(c.seed);
    w.u32(model.params.tensors.len() as u32);
    for t in &model.params.tensors {
        w.str(&t.name);
        w.u8(t.shape.len() as u8);
        for &d in &t.shape {
            w.u32(d as u32);
        }
        w.f32s(&t.data);
    }
    w.into_inner()
}

pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<()> {
    binio::write_atomic(path, &checkpoint_bytes(model))
}

pub(crate) fn read_config(r: &mut ByteReader) -> Result<ModelConfig> {
    r.expect_header(MAGIC_CHECKPOINT, CHECKPOINT_VERSION)?;
    let mut next = |what| r.u32(what).map(|v| v as usize);
    let vocab_size = next("vocab_size")?;
    let d_model = next("d_model")?;
    let num_layers = next("num_layers")?;
    let num_heads = next("num_heads")?;
    let d_ff = next("d_ff")?;
    let context_length = next("context_length")?;
    let seed = r.u64("seed")?;
    let config = ModelConfig {
        vocab_size,
        d_model,
        num_layers,
        num_heads,
        d_ff,
        context_length,
        seed,
    };
    if !config.validate().is_empty() {
        return Err(r.corrupt(format!("invalid model config in header: {config:?}")));
    }
    Ok(config)
}

pub fn load_checkpoint(path: &Path) -> Result<Model<f32>> {
    let bytes = binio::read_file(path)?;
    decode(&bytes, path)
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<Model<f32>> {
    let mut r = ByteReader::new(bytes, path);
    let config = read_config(&mut r)?;
    let expected = layout(&config);
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(r.corrupt(format!(
            "expected {} tensors, header says {count}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in expected {
        let got_name = r.str("tensor name")?;
        if got_name != name {
            return Err(r.corrupt(format!("expected tensor {name}, found {got_name}")));
        }
        let ndim = r.u8("ndim")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32("dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(r.corrupt(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let data = r.f32s(shape.iter().product(), &name)?;
        tensors.push(Tensor { name, shape, data });
    }
    r.finish()?;
    Ok(Model {
        config,
        params: Params { tensors },
    })
}
