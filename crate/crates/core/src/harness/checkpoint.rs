//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "D2CK" | version u32 | config digest 32 bytes |
//!   tensor count u32 | tensors | EMA count u32 | EMA tensors
//! One tensor record: name length u32, UTF-8 name, rank u32, dims u32...,
//! payload f32. Saving rounds f64 parameters to f32; after that first
//! rounding, save→load→save is byte-identical. Writes go through a temp
//! file and an atomic rename.

use crate::autodiff::{ParamSet, Tensor};
use crate::error::{D2cError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"D2CK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub config_digest: [u8; 32],
    pub tensors: Vec<(String, Tensor)>,
    pub ema: Vec<(String, Tensor)>,
}

/// SHA-256 of the canonical JSON serialization of a config.
pub fn config_digest<T: Serialize>(config: &T) -> [u8; 32] {
    let bytes = serde_json::to_vec(config).expect("config serialization cannot fail");
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(&bytes));
    out
}

fn push_tensor(buf: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    digest: [u8; 32],
    params: &ParamSet,
    ema: &[(String, Tensor)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&digest);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        push_tensor(&mut buf, name, tensor);
    }
    buf.extend_from_slice(&(ema.len() as u32).to_le_bytes());
    for (name, tensor) in ema {
        push_tensor(&mut buf, name, tensor);
    }
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(D2cError::format("truncated checkpoint"));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| D2cError::format("checkpoint tensor name is not UTF-8"))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((name, Tensor::from_raw(shape, data)))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, off: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(D2cError::format("bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(D2cError::format(format!("unsupported checkpoint version {version}")));
    }
    let mut config_digest = [0u8; 32];
    config_digest.copy_from_slice(r.take(32)?);
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    let ema_count = r.u32()? as usize;
    let mut ema = Vec::with_capacity(ema_count);
    for _ in 0..ema_count {
        ema.push(r.tensor()?);
    }
    if r.off != bytes.len() {
        return Err(D2cError::format("trailing bytes in checkpoint"));
    }
    Ok(Checkpoint { version, config_digest, tensors, ema })
}

impl Checkpoint {
    /// Verify the stored digest against an expected config. A mismatch
    /// means the checkpoint was produced under a different model shape
    /// (fusion kind included).
    pub fn verify_digest<T: Serialize>(&self, config: &T) -> Result<()> {
        if self.config_digest != config_digest(config) {
            return Err(D2cError::config(
                "checkpoint config digest mismatch (wrong config or fusion kind for this checkpoint)",
            ));
        }
        Ok(())
    }

    /// Rebuild a ParamSet; names in `frozen` are marked non-trainable.
    pub fn to_param_set(&self, frozen: &[&str]) -> ParamSet {
        let mut ps = ParamSet::new();
        for (name, tensor) in &self.tensors {
            if frozen.contains(&name.as_str()) {
                ps.add_frozen(name, tensor.clone());
            } else {
                ps.add(name, tensor.clone());
            }
        }
        ps
    }

    /// EMA shadows applied over the stored tensors (frozen entries keep
    /// their stored values).
    pub fn to_param_set_ema(&self, frozen: &[&str]) -> ParamSet {
        let mut ps = self.to_param_set(frozen);
        for (name, tensor) in &self.ema {
            if let Some(id) = ps.lookup(name) {
                ps.get_mut(id).data_mut().copy_from_slice(tensor.data());
            }
        }
        ps
    }
}
