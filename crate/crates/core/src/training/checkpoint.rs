//! Binary checkpoint format.
//!
//! ```text
//! "IARS"                      4 bytes
//! version                     u32 LE
//! header length               u32 LE
//! header                      UTF-8 JSON (architecture, flags, epoch, optimizer, tensor count)
//! tensors, repeated:
//!   name length               u16 LE
//!   name                      UTF-8
//!   rank                      u8
//!   dims                      rank x u32 LE
//!   payload                   prod(dims) x f32 LE
//! crc32                       u32 LE over every preceding byte
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, ArchConfig, Model, VariantFlags};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IARS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("checkpoint header invalid: {0}")]
    Header(String),

    #[error("checkpoint payload malformed: {0}")]
    Malformed(String),
}

impl CheckpointError {
    /// Stable short code for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::BadMagic(_) => "bad_magic",
            CheckpointError::UnsupportedVersion { .. } => "wrong_version",
            CheckpointError::Truncated(_) => "truncated",
            CheckpointError::CrcMismatch { .. } => "crc_mismatch",
            CheckpointError::Header(_) => "bad_header",
            CheckpointError::Malformed(_) => "malformed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchConfig,
    pub flags: VariantFlags,
    pub epoch: u64,
    pub optimizer: Option<OptimizerHeader>,
    pub tensor_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub config: OptimizerConfig,
    pub step_count: u64,
}

/// Decoded checkpoint before it is bound to a model.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

pub struct Checkpoint {
    pub model: Model<f32>,
    pub optimizer: Option<Optimizer<f32>>,
    pub epoch: u64,
}

pub fn encode_checkpoint(model: &Model<f32>, optimizer: Option<&Optimizer<f32>>, epoch: u64) -> Vec<u8> {
    let mut tensors: Vec<(String, &[usize], &[f32])> = model
        .params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.tensor.shape(), p.tensor.data()))
        .collect();
    let state = optimizer.map(|o| o.state_tensors(&model.params)).unwrap_or_default();
    tensors.extend(state.iter().map(|(n, t)| (n.clone(), t.shape(), t.data())));

    let header = CheckpointHeader {
        arch: model.config.clone(),
        flags: model.flags,
        epoch,
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config,
            step_count: o.step_count,
        }),
        tensor_count: tensors.len() as u64,
    };
    let json = serde_json::to_vec(&header).expect("header serialises");

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses and verifies a checkpoint byte stream.
///
/// Structure is walked before the CRC is checked so that a short file is
/// reported as truncated rather than as a checksum failure.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header_bytes = r.take(header_len, "header")?;
    let header_text = std::str::from_utf8(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()));
    let header: Option<CheckpointHeader> = header_text
        .as_ref()
        .ok()
        .and_then(|t| serde_json::from_str(t).ok());

    // Walk the tensor records. With an unreadable header the count is
    // unknown, so read records until only the CRC remains.
    let body_end = bytes.len().saturating_sub(4);
    let mut tensors = Vec::new();
    loop {
        match &header {
            Some(h) if tensors.len() as u64 >= h.tensor_count => break,
            None if r.pos >= body_end => break,
            _ => {}
        }
        let name_len = u16::from_le_bytes(r.take(2, "tensor name length")?.try_into().expect("2 bytes")) as usize;
        let name = r.take(name_len, "tensor name")?;
        let rank = r.take(1, "tensor rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dims")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Malformed(format!("tensor dims {shape:?} overflow")))?;
        let payload = r.take(numel, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let name = String::from_utf8(name.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, tensor));
    }
    let stored = r.u32("crc")?;
    let computed = crc32fast::hash(&bytes[..r.pos - 4]);
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after crc",
            bytes.len() - r.pos
        )));
    }
    if stored != computed {
        return Err(CheckpointError::CrcMismatch { stored, computed });
    }
    let header = match (header_text, header) {
        (Err(e), _) => return Err(e),
        (Ok(t), None) => {
            let e = serde_json::from_str::<CheckpointHeader>(t).expect_err("header failed to parse above");
            return Err(CheckpointError::Header(e.to_string()));
        }
        (Ok(_), Some(h)) => h,
    };
    Ok(RawCheckpoint { header, tensors })
}

impl RawCheckpoint {
    /// Binds the tensors to a freshly built model with `flags`.
    pub fn into_model(self, flags: VariantFlags) -> Result<Checkpoint> {
        let h = self.header;
        let mut model: Model<f32> = build_model(&h.arch, flags, 0)?;
        let (params, state): (Vec<_>, Vec<_>) = self.tensors.into_iter().partition(|(n, _)| !n.starts_with("optim."));

        let expected: std::collections::BTreeSet<&str> = model.params.names().collect();
        let found: std::collections::BTreeSet<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        if expected != found || params.len() != found.len() {
            let missing = expected.difference(&found).map(|s| s.to_string()).collect();
            let unexpected = found.difference(&expected).map(|s| s.to_string()).collect();
            return Err(Error::ParamMismatch { missing, unexpected });
        }
        for (name, t) in params {
            let id = model.params.id(&name).expect("name checked");
            let slot = model.params.tensor_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::shape("checkpoint tensor", slot.shape(), t.shape()));
            }
            slot.data_mut().copy_from_slice(t.data());
        }
        let optimizer = match h.optimizer {
            Some(oh) => {
                let mut o = Optimizer::new(oh.config, &model.params)?;
                o.step_count = oh.step_count;
                o.load_state(&model.params, &state)?;
                Some(o)
            }
            None => None,
        };
        Ok(Checkpoint {
            model,
            optimizer,
            epoch: h.epoch,
        })
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model<f32>,
    optimizer: Option<&Optimizer<f32>>,
    epoch: u64,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, optimizer, epoch)).map_err(|e| Error::io(path, e))
}

fn read_raw(path: &Path) -> Result<RawCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Loads with the variant recorded in the file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let raw = read_raw(path.as_ref())?;
    let flags = raw.header.flags;
    raw.into_model(flags)
}

/// Loads into a model built with `flags`; fails with a parameter-name
/// mismatch when the file holds a different variant.
pub fn load_checkpoint_as(path: impl AsRef<Path>, flags: VariantFlags) -> Result<Checkpoint> {
    read_raw(path.as_ref())?.into_model(flags)
}
