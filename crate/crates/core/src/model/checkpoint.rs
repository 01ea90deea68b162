// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoints.
//!
//! Layout: the 6-byte magic `TAROT1`; `d_model, n_heads, n_layers,
//! vocab_size, d_ff, max_seq` as little-endian `u64`; `rope_base` as a
//! little-endian `f64`; then every tensor of [`ModelParams::tensors`] in
//! order as little-endian `f64`.

use std::io::{Read, Write};

use super::{ModelConfig, ModelError, ModelParams, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"TAROT1";

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<()> {
    let c = &params.config;
    w.write_all(CHECKPOINT_MAGIC)?;
    for n in [c.d_model, c.n_heads, c.n_layers, c.vocab_size, c.d_ff, c.max_seq] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    w.write_all(&c.rope_base.to_le_bytes())?;
    for t in params.tensors() {
        for x in t {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams> {
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)
        .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    let mut buf = [0u8; 8];
    let mut ints = [0usize; 6];
    for slot in &mut ints {
        r.read_exact(&mut buf)
            .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
        *slot = usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| ModelError::Checkpoint("config value overflows usize".into()))?;
    }
    r.read_exact(&mut buf)
        .map_err(|_| ModelError::Checkpoint("truncated header".into()))?;
    let config = ModelConfig {
        d_model: ints[0],
        n_heads: ints[1],
        n_layers: ints[2],
        vocab_size: ints[3],
        d_ff: ints[4],
        max_seq: ints[5],
        rope_base: f64::from_le_bytes(buf),
    };
    config.validate()?;
    let mut params = ModelParams::init_with_std(config, 0, 0.0)?;
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| ModelError::Checkpoint("truncated tensor data".into()))?;
            *x = f64::from_le_bytes(buf);
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::Checkpoint("trailing bytes".into()));
    }
    if !params.is_finite() {
        return Err(ModelError::Checkpoint("non-finite weights".into()));
    }
    Ok(params)
}
