//! Single-file checkpoints.
//!
//! ```text
//! "QSVLM1" | u32 version | u64 header length | JSON header | raw arrays | SHA-256
//! ```
//!
//! The header carries the config snapshot, step counter, RNG state and an
//! index of the arrays (name, shape, dtype, byte range). Arrays are stored
//! little-endian. The trailing digest covers every preceding byte, so
//! truncation and bit flips are both reported as corruption.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MAGIC: &[u8; 6] = b"QSVLM1";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len() * 4,
            ArrayData::F64(v) => v.len() * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => ArrayData::F64(flat.to_vec1::<f64>()?),
            DType::F32 => ArrayData::F32(flat.to_vec1::<f32>()?),
            other => {
                return Err(Error::invalid(format!("cannot store {other:?} array {name}")));
            }
        };
        Ok(Self {
            name: name.to_string(),
            shape: t.dims().to_vec(),
            data,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let dev = Device::Cpu;
        Ok(match &self.data {
            ArrayData::F32(v) => Tensor::from_vec(v.clone(), self.shape.as_slice(), &dev)?,
            ArrayData::F64(v) => Tensor::from_vec(v.clone(), self.shape.as_slice(), &dev)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Every stochastic choice of step `k` is derived from `(seed, k)`.
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<NamedArray>,
    pub v: Vec<NamedArray>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<NamedArray>,
    pub optimizer: OptimizerState,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    step: u64,
    rng: RngState,
    optimizer_t: u64,
    arrays: Vec<ArrayEntry>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups: [(&str, &[NamedArray]); 3] = [
            ("param", &self.params),
            ("adam_m", &self.optimizer.m),
            ("adam_v", &self.optimizer.v),
        ];
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        for (group, arrays) in groups {
            for a in arrays {
                if a.shape.iter().product::<usize>() != a.data.len() {
                    return Err(Error::shape("checkpoint array", format!("{:?}", a.shape), a.data.len()));
                }
                entries.push(ArrayEntry {
                    group: group.to_string(),
                    name: a.name.clone(),
                    shape: a.shape.clone(),
                    dtype: format!("{:?}", a.data.dtype()).to_lowercase(),
                    offset: payload.len(),
                    bytes: a.data.byte_len(),
                });
                match &a.data {
                    ArrayData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                    ArrayData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            step: self.step,
            rng: self.rng.clone(),
            optimizer_t: self.optimizer.t,
            arrays: entries,
        })?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fixed = MAGIC.len() + 4 + 8;
        if bytes.len() < fixed + DIGEST_LEN {
            return Err(corrupt(path, format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt(path, "bad magic header"));
        }
        let version = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt(path, "checksum mismatch (truncated or modified)"));
        }
        let hlen = u64::from_le_bytes(body[10..18].try_into().unwrap()) as usize;
        if fixed + hlen > body.len() {
            return Err(corrupt(path, "header length exceeds file"));
        }
        let header: Header = serde_json::from_slice(&body[fixed..fixed + hlen])
            .map_err(|e| corrupt(path, format!("header: {e}")))?;
        let payload = &body[fixed + hlen..];

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in header.arrays {
            if e.offset + e.bytes > payload.len() {
                return Err(corrupt(path, format!("array {} exceeds payload", e.name)));
            }
            let raw = &payload[e.offset..e.offset + e.bytes];
            let n: usize = e.shape.iter().product();
            let data = match e.dtype.as_str() {
                "f32" if raw.len() == n * 4 => ArrayData::F32(
                    raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                "f64" if raw.len() == n * 8 => ArrayData::F64(
                    raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
                ),
                _ => return Err(corrupt(path, format!("array {} has bad dtype or size", e.name))),
            };
            let arr = NamedArray {
                name: e.name,
                shape: e.shape,
                data,
            };
            match e.group.as_str() {
                "param" => params.push(arr),
                "adam_m" => m.push(arr),
                "adam_v" => v.push(arr),
                g => return Err(corrupt(path, format!("unknown array group {g}"))),
            }
        }
        header.config.validate()?;
        Ok(Self {
            config: header.config,
            step: header.step,
            rng: header.rng,
            params,
            optimizer: OptimizerState {
                t: header.optimizer_t,
                m,
                v,
            },
        })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    /// Builds the model and overwrites every parameter with the stored value.
    pub fn to_model(&self) -> Result<Model> {
        let dtype = self.params.first().map_or(DType::F32, |a| a.data.dtype());
        let model = Model::from_config(&self.config, dtype)?;
        if model.params().len() != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for a in &self.params {
            model.params().assign(&a.name, &a.to_tensor()?)?;
        }
        Ok(model)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn checkpoint_hash(ckpt: &Checkpoint) -> Result<String> {
    Ok(hex::encode(Sha256::digest(ckpt.to_bytes()?)))
}
