//! `GLPI` binary checkpoint container.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic          4 bytes  "GLPI"
//! version        u32      currently 1
//! step           u64
//! config_len     u32      length of the config block (52 for version 1)
//! config block:
//!   arch         u8       0 dense, 1 moe
//!   nonlinearity u8       0 silu, 1 relu
//!   final_ln     u8       0/1
//!   gate_renorm  u8       0/1 (0 for dense)
//!   layers, d_model, heads, d_head, vocab, max_seq,
//!   ffn_dim, experts, expert_dim, top_k       10 × u32 (unused fields 0)
//!   ln_eps       f64
//! tensor_count   u32
//! directory, one entry per tensor:
//!   name_len     u16, then name bytes (UTF-8)
//!   rank         u8 (1 or 2), then rank × u64 dims
//!   offset       u64      absolute byte offset of the payload
//! payload        f32 values, tensors back to back in directory order
//! ```
//!
//! Weight tensors are stored input-major (`y = x · W`); see
//! [`Params::named_tensors`] for names and order. Values are widened to
//! `f64` on load.

use std::path::Path;

use super::config::{FfnConfig, ModelConfig, Nonlinearity};
use super::forward::Model;
use super::params::{Params, TensorRank};
use crate::error::{Error, Result};
use crate::io::{read, write_atomic};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"GLPI";
pub const FORMAT_VERSION: u32 = 1;
const CONFIG_BLOCK_LEN: u32 = 52;

/// A named tensor as stored in a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Weights of a model at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model: Model,
}

fn encode_config(cfg: &ModelConfig, out: &mut Vec<u8>) {
    let (arch, renorm, ffn_dim, experts, expert_dim, top_k) = match cfg.ffn {
        FfnConfig::Dense { ffn_dim } => (0u8, 0u8, ffn_dim, 0, 0, 0),
        FfnConfig::Moe {
            experts,
            expert_dim,
            top_k,
            gate_renorm,
        } => (1, u8::from(gate_renorm), 0, experts, expert_dim, top_k),
    };
    out.extend_from_slice(&[
        arch,
        cfg.nonlinearity.code(),
        u8::from(cfg.final_layernorm),
        renorm,
    ]);
    for v in [
        cfg.layers,
        cfg.d_model,
        cfg.heads,
        cfg.d_head,
        cfg.vocab,
        cfg.max_seq,
        ffn_dim,
        experts,
        expert_dim,
        top_k,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.ln_eps.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_config(r: &mut Reader<'_>) -> Result<ModelConfig> {
    let path = r.path;
    let arch = r.u8()?;
    let nonlin = r.u8()?;
    let final_ln = r.u8()?;
    let renorm = r.u8()?;
    let mut v = [0usize; 10];
    for x in v.iter_mut() {
        *x = r.u32()? as usize;
    }
    let ln_eps = r.f64()?;
    let [layers, d_model, heads, d_head, vocab, max_seq, ffn_dim, experts, expert_dim, top_k] = v;
    let ffn = match arch {
        0 => FfnConfig::Dense { ffn_dim },
        1 => FfnConfig::Moe {
            experts,
            expert_dim,
            top_k,
            gate_renorm: renorm != 0,
        },
        a => return Err(Error::format(path, format!("unknown arch code {a}"))),
    };
    let cfg = ModelConfig {
        layers,
        d_model,
        heads,
        d_head,
        ffn,
        vocab,
        max_seq,
        nonlinearity: Nonlinearity::from_code(nonlin)
            .ok_or_else(|| Error::format(path, format!("unknown nonlinearity code {nonlin}")))?,
        final_layernorm: final_ln != 0,
        ln_eps,
    };
    cfg.validate()
        .map_err(|e| Error::format(path, format!("invalid config block: {e}")))?;
    Ok(cfg)
}

/// Serialises a container to bytes.
pub fn encode_container(step: u64, cfg: &ModelConfig, tensors: &[StoredTensor]) -> Vec<u8> {
    let mut head = Vec::new();
    head.extend_from_slice(MAGIC);
    head.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    head.extend_from_slice(&step.to_le_bytes());
    head.extend_from_slice(&CONFIG_BLOCK_LEN.to_le_bytes());
    encode_config(cfg, &mut head);
    head.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let dir_len: usize = tensors
        .iter()
        .map(|t| 2 + t.name.len() + 1 + 8 * t.shape.len() + 8)
        .sum();
    let mut offset = (head.len() + dir_len) as u64;
    for t in tensors {
        head.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        head.extend_from_slice(t.name.as_bytes());
        head.push(t.shape.len() as u8);
        for &dim in &t.shape {
            head.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        head.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.data.len() as u64;
    }
    for t in tensors {
        for &x in &t.data {
            head.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    head
}

/// Parses a container; checks magic, version, offsets and total length.
pub fn decode_container(bytes: &[u8], path: &Path) -> Result<(u64, ModelConfig, Vec<StoredTensor>)> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "missing GLPI magic"));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let step = r.u64()?;
    let cfg_len = r.u32()?;
    if cfg_len != CONFIG_BLOCK_LEN {
        return Err(Error::format(path, format!("config block of {cfg_len} bytes")));
    }
    let cfg = decode_config(&mut r)?;
    let count = r.u32()? as usize;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        if !(1..=2).contains(&rank) {
            return Err(Error::format(path, format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        dir.push((name, shape, offset));
    }
    let mut expected = r.pos;
    let mut tensors = Vec::with_capacity(count);
    for (name, shape, offset) in dir {
        if offset != expected {
            return Err(Error::format(
                path,
                format!("tensor {name} at offset {offset}, expected {expected}"),
            ));
        }
        let n: usize = shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(Error::format(path, format!("tensor {name} runs past end of file")));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        tensors.push(StoredTensor { name, shape, data });
        expected = end;
    }
    if expected != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes", bytes.len() - expected),
        ));
    }
    Ok((step, cfg, tensors))
}

pub(crate) fn stored_shape(rank: TensorRank, m: &Matrix) -> Vec<usize> {
    match rank {
        TensorRank::Vector => vec![m.cols()],
        TensorRank::Matrix => vec![m.rows(), m.cols()],
    }
}

/// Copies container tensors into `params`, requiring identical names and
/// shapes in canonical order.
pub(crate) fn fill_params(params: &mut Params, tensors: Vec<StoredTensor>, prefix: &str, path: &Path) -> Result<()> {
    let slots = params.named_tensors_mut();
    if slots.len() != tensors.len() {
        return Err(Error::format(
            path,
            format!("{} tensors, config implies {}", tensors.len(), slots.len()),
        ));
    }
    for ((name, rank, m), t) in slots.into_iter().zip(tensors) {
        let want_name = format!("{prefix}{name}");
        let want_shape = stored_shape(rank, m);
        if t.name != want_name || t.shape != want_shape {
            return Err(Error::format(
                path,
                format!(
                    "found tensor {} {:?}, expected {want_name} {want_shape:?}",
                    t.name, t.shape
                ),
            ));
        }
        m.as_mut_slice().copy_from_slice(&t.data);
    }
    Ok(())
}

pub(crate) fn params_to_stored(params: &Params, prefix: &str) -> Vec<StoredTensor> {
    params
        .named_tensors()
        .into_iter()
        .map(|(name, rank, m)| StoredTensor {
            name: format!("{prefix}{name}"),
            shape: stored_shape(rank, m),
            data: m.as_slice().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_container(
            self.step,
            &self.model.config,
            &params_to_stored(&self.model.params, ""),
        )
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (step, config, tensors) = decode_container(bytes, path)?;
        let mut params = Params::zeros(&config);
        fill_params(&mut params, tensors, "", path)?;
        Ok(Checkpoint {
            step,
            model: Model { config, params },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch_moe: bool) -> ModelConfig {
        let mut cfg = if arch_moe {
            ModelConfig::moe_default(11)
        } else {
            ModelConfig::dense_default(11)
        };
        cfg.layers = 2;
        cfg.d_model = 8;
        cfg.heads = 2;
        cfg.d_head = 4;
        cfg.max_seq = 5;
        cfg.ffn = if arch_moe {
            FfnConfig::Moe {
                experts: 3,
                expert_dim: 4,
                top_k: 2,
                gate_renorm: false,
            }
        } else {
            FfnConfig::Dense { ffn_dim: 6 }
        };
        cfg
    }

    #[test]
    fn round_trip_preserves_weights_and_config() {
        for moe in [false, true] {
            let model = Model::init(tiny(moe), 3).unwrap();
            let ck = Checkpoint { step: 42, model };
            let bytes = ck.to_bytes();
            assert_eq!(&bytes[..4], b"GLPI");
            let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint {
            step: 1,
            model: Model::init(tiny(false), 1).unwrap(),
        };
        let bytes = ck.to_bytes();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad_magic, p).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(Checkpoint::from_bytes(&bad_version, p).is_err());
    }
}
