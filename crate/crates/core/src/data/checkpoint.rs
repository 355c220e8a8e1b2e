//! Checkpoint files: the container header with `kind = 2`, the model
//! configuration echoed as TOML, then every named parameter tensor as `f64`.
//!
//! ```text
//! "MVSE"  u16 version  u16 kind (=2)
//! u32 len, utf-8 TOML model config
//! u32 tensors
//! tensors x (u32 len, utf-8 name, u32 rank, rank x u32 dim, f64 values)
//! ```

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

use super::container::{Reader, Writer, KIND_CHECKPOINT};

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer::new(KIND_CHECKPOINT);
    let echo = toml::to_string(&ckpt.config).map_err(|e| Error::Config(e.to_string()))?;
    w.str(&echo)?;
    w.u32(ckpt.params.len())?;
    for (name, t) in ckpt.params.iter() {
        w.str(name)?;
        w.u32(t.rank())?;
        for &d in t.shape() {
            w.u32(d)?;
        }
        w.f64s(t.data());
    }
    Ok(w.buf)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::open(bytes, KIND_CHECKPOINT)?;
    let echo = r.str("config")?;
    let config: ModelConfig =
        toml::from_str(&echo).map_err(|e| Error::Malformed(format!("checkpoint config: {e}")))?;
    let n = r.u32("tensor count")?;
    let mut params = ModelParams::new();
    for _ in 0..n {
        let name = r.str("tensor name")?;
        let rank = r.u32("tensor rank")?;
        let shape = (0..rank)
            .map(|_| r.u32("tensor shape"))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().product();
        let data = r.f64s(len, "tensor data")?;
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    r.finish()?;
    Ok(Checkpoint { config, params })
}
