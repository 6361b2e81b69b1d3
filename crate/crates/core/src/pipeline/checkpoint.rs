//! Binary checkpoints.
//!
//! Layout: `SCALEMAE` magic, u32 format version, u64-length-prefixed JSON
//! metadata, u64-count-prefixed parameters and optimizer moments as
//! little-endian `f64`, then the SHA-256 of everything before it. Values are
//! widened to `f64`, which is exact for both scalar types.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ScaleMae;
use crate::nn::ParamStore;
use crate::pipeline::config::TrainConfig;
use crate::pipeline::train::{LogRow, Trainer};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SCALEMAE";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub scalar: String,
    pub step: usize,
    pub epoch: usize,
    pub seed: u64,
    pub opt_t: u64,
    pub n_data: usize,
    pub config: TrainConfig,
    pub log: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
    pub opt_state: Vec<f64>,
}

fn put_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    buf.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_checkpoint(rec: &CheckpointRecord) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&rec.meta)?;
    let mut buf = Vec::with_capacity(64 + meta.len() + 8 * (rec.params.len() + rec.opt_state.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta);
    put_f64s(&mut buf, &rec.params);
    put_f64s(&mut buf, &rec.opt_state);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::InvalidArgument("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::InvalidArgument("corrupt length".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<CheckpointRecord> {
    if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
        return Err(Error::InvalidArgument(format!("{} is not a checkpoint", path.display())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CheckpointChecksum { path: path.to_path_buf() });
    }
    let mut cur = Cursor { bytes: body, pos: 8 };
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = cur.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)?;
    let params = cur.f64s()?;
    let opt_state = cur.f64s()?;
    if cur.pos != body.len() {
        return Err(Error::InvalidArgument("trailing bytes in checkpoint".into()));
    }
    Ok(CheckpointRecord { meta, params, opt_state })
}

/// Writes via a temporary file in the same directory and renames it into
/// place, so a crash never leaves a half-written checkpoint at `path`.
pub fn save_checkpoint(path: &Path, rec: &CheckpointRecord) -> Result<()> {
    let bytes = encode_checkpoint(rec)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

impl<T: Scalar> Trainer<T> {
    pub fn checkpoint(&self) -> CheckpointRecord {
        CheckpointRecord {
            meta: CheckpointMeta {
                scalar: T::type_name().to_string(),
                step: self.step,
                epoch: self.epoch(),
                seed: self.cfg.seed,
                opt_t: self.opt.t,
                n_data: self.n_data,
                config: self.cfg.clone(),
                log: self.log.clone(),
            },
            params: self.params.flatten(),
            opt_state: self.opt.flatten(),
        }
    }

    pub fn from_checkpoint(rec: &CheckpointRecord) -> Result<Self> {
        if rec.meta.scalar != T::type_name() {
            return Err(Error::CheckpointScalar {
                found: rec.meta.scalar.clone(),
                expected: T::type_name().to_string(),
            });
        }
        let mut t = Self::new(rec.meta.config.clone(), rec.meta.n_data)?;
        t.params.load_flat(&rec.params)?;
        t.opt.load_flat(&rec.opt_state, rec.meta.opt_t)?;
        t.step = rec.meta.step;
        t.log = rec.meta.log.clone();
        Ok(t)
    }
}

/// Model and parameters for inference. Unlike [`Trainer::from_checkpoint`]
/// this accepts either stored scalar type.
pub fn model_from_checkpoint<T: Scalar>(rec: &CheckpointRecord) -> Result<(ScaleMae, ParamStore<T>)> {
    let model = ScaleMae::new(&rec.meta.config.model_config())?;
    let mut params = ParamStore::<T>::zeros(model.layout().clone());
    params.load_flat(&rec.params)?;
    Ok((model, params))
}
