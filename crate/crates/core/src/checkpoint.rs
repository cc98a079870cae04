//! `CUF1` checkpoint files.
//!
//! Layout: the 4-byte magic `CUF1`, the header length as a little-endian
//! `u64`, a UTF-8 JSON header, then the payload of raw little-endian `f32`
//! tensors at the byte offsets listed in the header (relative to the start
//! of the payload).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelError, SrModel};
use crate::tensor::{AdamState, ParameterSet, Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"CUF1";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on the JSON header, a guard against absurd length fields.
pub const MAX_HEADER_BYTES: u64 = 16 << 20;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a CUF1 checkpoint")]
    Magic,
    #[error("truncated checkpoint: {0}")]
    Truncated(&'static str),
    #[error("header is not valid JSON: {0}")]
    Header(String),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("tensor table: {0}")]
    Table(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub tensor_table: Vec<TensorEntry>,
    pub optimizer_state_present: bool,
    /// Adam step count when optimizer state is present.
    #[serde(default)]
    pub optimizer_step: Option<u64>,
}

/// A model's configuration and parameters, optionally with Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParameterSet<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn from_model(model: &SrModel, optimizer: Option<AdamState<f32>>) -> Self {
        Self {
            config: *model.config(),
            params: model.params.clone(),
            optimizer,
        }
    }

    pub fn into_model(self) -> Result<SrModel, ModelError> {
        SrModel::from_params(self.config, self.params)
    }

    fn tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut v: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|p| (p.name.clone(), &p.value)).collect();
        if let Some(opt) = &self.optimizer {
            for (p, m) in self.params.iter().zip(&opt.m) {
                v.push((format!("{ADAM_M}{}", p.name), m));
            }
            for (p, t) in self.params.iter().zip(&opt.v) {
                v.push((format!("{ADAM_V}{}", p.name), t));
            }
        }
        v
    }

    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensor_table = self
            .tensors()
            .into_iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name,
                    shape: t.shape().to_vec(),
                    byte_offset: offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            model_config: self.config,
            tensor_table,
            optimizer_state_present: self.optimizer.is_some(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let tensors = self.tensors();
        let payload: usize = tensors.iter().map(|(_, t)| 4 * t.len()).sum();
        let mut out = Vec::with_capacity(12 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let len_bytes: [u8; 8] = bytes
            .get(4..12)
            .ok_or(CheckpointError::Truncated("header length"))?
            .try_into()
            .expect("8 bytes");
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_BYTES {
            return Err(CheckpointError::Header(format!("header length {header_len} exceeds limit")));
        }
        let header_end = 12 + header_len as usize;
        let header_bytes = bytes.get(12..header_end).ok_or(CheckpointError::Truncated("header"))?;
        let header: Header =
            serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;
        Self::from_parts(header, &bytes[header_end..])
    }

    fn from_parts(header: Header, payload: &[u8]) -> Result<Self, CheckpointError> {
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        header.model_config.validate()?;
        let specs = header.model_config.param_specs();
        let n = specs.len();
        let expected_entries = if header.optimizer_state_present { 3 * n } else { n };
        let table = &header.tensor_table;
        if table.len() != expected_entries {
            return Err(CheckpointError::Table(format!(
                "{} entries, expected {expected_entries}",
                table.len()
            )));
        }
        if header.optimizer_state_present != header.optimizer_step.is_some() {
            return Err(CheckpointError::Table("optimizer step and state flag disagree".into()));
        }
        let mut offset = 0u64;
        let mut tensors = Vec::with_capacity(table.len());
        for (i, e) in table.iter().enumerate() {
            let spec = &specs[i % n];
            let want = match i / n {
                0 => spec.name.clone(),
                1 => format!("{ADAM_M}{}", spec.name),
                _ => format!("{ADAM_V}{}", spec.name),
            };
            if e.name != want {
                return Err(CheckpointError::Table(format!("entry {i} is {:?}, expected {want:?}", e.name)));
            }
            if e.shape != spec.shape {
                return Err(CheckpointError::Table(format!(
                    "{} has shape {:?}, expected {:?}",
                    e.name, e.shape, spec.shape
                )));
            }
            if e.byte_offset != offset {
                return Err(CheckpointError::Table(format!(
                    "{} starts at byte {}, expected {offset}",
                    e.name, e.byte_offset
                )));
            }
            let count = spec.shape.iter().product::<usize>();
            let end = offset + 4 * count as u64;
            let raw = payload
                .get(offset as usize..end as usize)
                .ok_or(CheckpointError::Truncated("payload"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            offset = end;
        }
        if offset != payload.len() as u64 {
            return Err(CheckpointError::Table(format!(
                "payload has {} bytes, table covers {offset}",
                payload.len()
            )));
        }
        let mut rest = tensors.into_iter();
        let mut params = ParameterSet::new();
        for (name, t) in rest.by_ref().take(n) {
            params.register(name, t)?;
        }
        let optimizer = header.optimizer_step.map(|step| {
            let m = rest.by_ref().take(n).map(|(_, t)| t).collect();
            let v = rest.map(|(_, t)| t).collect();
            AdamState { step, m, v }
        });
        Ok(Self {
            config: header.model_config,
            params,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// failed save never leaves a partial checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

/// Loads a checkpoint straight into a model.
pub fn model_from_bytes(bytes: &[u8]) -> Result<SrModel, CheckpointError> {
    Ok(Checkpoint::from_bytes(bytes)?.into_model()?)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| io(std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name")))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result.map_err(io)
}
