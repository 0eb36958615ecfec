//! Binary checkpoint format, little-endian:
//!
//! ```text
//! "CHCK" | version u32
//! d_t n_heads enc_layers dec_layers mlp_dim beat_len n_beats (u32 each)
//! dropout f32 | mask_fill u8 | variant u8 | policy u8 | rng_seed u64 | epoch u32
//! n_tensors u32
//! per tensor: name_len u32, name bytes, rank u32, dims u32 x rank, f32 data
//! ```

use std::fs;
use std::path::Path;

use super::config::{MaskFill, ModelConfig};
use super::params::Params;
use crate::error::{Error, Result};
use crate::mask::{EncoderPolicy, Variant};
use crate::tensor::Mat;
use crate::tokenizer::ByteReader;

const MAGIC: &[u8; 4] = b"CHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Params<f32>,
    pub variant: Variant,
    pub policy: EncoderPolicy,
    pub rng_seed: u64,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.params.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.d_t,
            c.n_heads,
            c.enc_layers,
            c.dec_layers,
            c.mlp_dim,
            c.beat_len,
            c.n_beats,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&c.dropout.to_le_bytes());
        out.push(c.mask_fill.code());
        out.push(self.variant.code());
        out.push(self.policy.code());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        let tensors = self.params.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(t.rows as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols as u32).to_le_bytes());
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let config = ModelConfig {
            d_t: dims[0],
            n_heads: dims[1],
            enc_layers: dims[2],
            dec_layers: dims[3],
            mlp_dim: dims[4],
            beat_len: dims[5],
            n_beats: dims[6],
            dropout: r.f32()?,
            mask_fill: MaskFill::from_code(r.u8()?)?,
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let variant = Variant::from_code(r.u8()?)?;
        let policy = EncoderPolicy::from_code(r.u8()?)?;
        let rng_seed = r.u64()?;
        let epoch = r.u32()?;

        let mut params: Params<f32> = Params::init(&config, 0)?;
        let n_tensors = r.u32()? as usize;
        let mut slots = params.tensors_mut();
        if n_tensors != slots.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {n_tensors} tensors, config implies {}",
                slots.len()
            )));
        }
        for (expected, slot) in slots.iter_mut() {
            let len = r.u32()? as usize;
            let name = r.string(len)?;
            if &name != expected {
                return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match shape.as_slice() {
                [rows, cols] => (*rows, *cols),
                _ => return Err(Error::Format(format!("tensor {name} has rank {rank}, expected 2"))),
            };
            if (rows, cols) != (slot.rows, slot.cols) {
                return Err(Error::Format(format!(
                    "tensor {name} is {rows}x{cols}, config implies {}x{}",
                    slot.rows, slot.cols
                )));
            }
            let data = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
            **slot = Mat::from_vec(rows, cols, data);
        }
        drop(slots);
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            params,
            variant,
            policy,
            rng_seed,
            epoch,
        })
    }
}

/// Writes to a temporary sibling, then renames over `path`.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ck.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
