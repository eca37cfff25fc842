//! Single-file checkpoint container.
//!
//! Layout: `u64` little-endian header length, a JSON header, then the raw
//! little-endian `f32` data of every tensor listed in the header, in order.
//! Tensors are written sorted by name so that saving the same state twice
//! produces identical bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::schedule::{NoiseSchedule, ScheduleSpec};
use super::train::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{Denoiser, ParamStore, UNetConfig};
use crate::pipeline::{EditModel, EMBEDDING_PARAM, UNET_PREFIX};
use crate::taskvocab::{EmbeddingTable, TaskId, Vocab};

pub const CHECKPOINT_FORMAT_VERSION: &str = "funedit-ckpt-v1";
const OPT_M_PREFIX: &str = "optim.m.";
const OPT_V_PREFIX: &str = "optim.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` elements from the start of the data section.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: usize,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: String,
    pub unet: UNetConfig,
    pub schedule: ScheduleSpec,
    pub tasks: Vec<TaskId>,
    pub train: Option<TrainState>,
    pub tensors: Vec<TensorEntry>,
}

pub struct LoadedCheckpoint {
    pub header: CheckpointHeader,
    pub model: EditModel,
    optimizer: Option<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)>,
}

impl LoadedCheckpoint {
    /// Rebuilds a trainer positioned exactly where the saved run stopped.
    /// `config` overrides the stored one (e.g. to extend `steps`).
    pub fn into_trainer(self, config: Option<TrainConfig>) -> Result<Trainer> {
        let (Some(state), Some((m, v))) = (self.header.train, self.optimizer) else {
            return Err(Error::Malformed { what: "checkpoint".into(), reason: "no training state stored".into() });
        };
        let config = config.unwrap_or(state.config);
        let mut opt = AdamW::new(self.model.trainable_vars(), config.optimizer())?;
        opt.restore(state.step, &m, &v)?;
        Trainer::from_parts(self.model, opt, config)
    }
}

fn collect_tensors(model: &EditModel, optimizer: Option<&AdamW>) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, var) in model.trainable_vars() {
        out.insert(name, var.as_tensor().clone());
    }
    if let Some(opt) = optimizer {
        let (m, v) = opt.state();
        out.extend(m.into_iter().map(|(k, t)| (format!("{OPT_M_PREFIX}{k}"), t)));
        out.extend(v.into_iter().map(|(k, t)| (format!("{OPT_V_PREFIX}{k}"), t)));
    }
    out
}

/// Serializes a model, plus optimizer state when `trainer` is given.
pub fn checkpoint_bytes(model: &EditModel, train: Option<(&TrainConfig, &AdamW)>) -> Result<Vec<u8>> {
    let tensors = collect_tensors(model, train.map(|(_, o)| o));
    let mut entries = Vec::with_capacity(tensors.len());
    let mut data: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, t) in &tensors {
        let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        entries.push(TensorEntry { name: name.clone(), shape: t.dims().to_vec(), offset, len: values.len() });
        offset += values.len();
        data.reserve(values.len() * 4);
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION.to_string(),
        unet: model.config().clone(),
        schedule: model.schedule.spec(),
        tasks: model.vocab.tasks().to_vec(),
        train: train.map(|(c, o)| TrainState { step: o.step_count(), config: *c }),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + data.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(path: &Path, model: &EditModel, train: Option<(&TrainConfig, &AdamW)>) -> Result<()> {
    let bytes = checkpoint_bytes(model, train)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_trainer(path: &Path, trainer: &Trainer) -> Result<()> {
    save_checkpoint(path, trainer.model(), Some((trainer.config(), trainer.optimizer())))
}

fn parse_header(json: &[u8]) -> Result<CheckpointHeader> {
    let value: serde_json::Value = serde_json::from_slice(json)
        .map_err(|e| Error::Malformed { what: "checkpoint header".into(), reason: e.to_string() })?;
    let found = value.get("format_version").and_then(|v| v.as_str()).unwrap_or("<missing>");
    if found != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: found.to_string(), expected: CHECKPOINT_FORMAT_VERSION.to_string() });
    }
    serde_json::from_value(value).map_err(|e| Error::Malformed { what: "checkpoint header".into(), reason: e.to_string() })
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingFile(path.to_path_buf())
    } else {
        Error::Io(e)
    }
}

/// Reads and validates only the header.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let mut f = File::open(path).map_err(|e| missing(path, e))?;
    let file_len = f.metadata()?.len();
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(|_| Error::TruncatedCheckpoint("no header length".into()))?;
    let len = u64::from_le_bytes(len);
    if len > file_len.saturating_sub(8) {
        return Err(Error::TruncatedCheckpoint(format!("header of {len} bytes in a {file_len}-byte file")));
    }
    let mut json = vec![0u8; len as usize];
    f.read_exact(&mut json).map_err(|_| Error::TruncatedCheckpoint("header cut short".into()))?;
    parse_header(&json)
}

pub fn parse_checkpoint(bytes: &[u8], dtype: DType, device: &Device) -> Result<LoadedCheckpoint> {
    if bytes.len() < 8 {
        return Err(Error::TruncatedCheckpoint("no header length".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if len > bytes.len() - 8 {
        return Err(Error::TruncatedCheckpoint(format!("header of {len} bytes in a {}-byte file", bytes.len())));
    }
    let header = parse_header(&bytes[8..8 + len])?;
    let data = &bytes[8 + len..];
    let mut tensors = BTreeMap::new();
    for e in &header.tensors {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(Error::Malformed { what: "checkpoint".into(), reason: format!("tensor {} length/shape disagree", e.name) });
        }
        let (start, end) = (e.offset * 4, (e.offset + e.len) * 4);
        if end > data.len() {
            return Err(Error::TruncatedCheckpoint(format!("data for tensor {} cut short", e.name)));
        }
        let values: Vec<f32> = data[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::from_vec(values, e.shape.clone(), device)?.to_dtype(dtype)?;
        tensors.insert(e.name.clone(), t);
    }

    let vocab = Vocab::new(header.tasks.clone())?;
    let emb = tensors
        .remove(EMBEDDING_PARAM)
        .ok_or_else(|| Error::Malformed { what: "checkpoint".into(), reason: "missing embedding table".into() })?;
    let table = EmbeddingTable::from_var(Var::from_tensor(&emb)?, vocab.k())?;

    let mut unet = BTreeMap::new();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix(UNET_PREFIX) {
            unet.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(OPT_M_PREFIX) {
            m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix(OPT_V_PREFIX) {
            v.insert(rest.to_string(), t);
        } else {
            return Err(Error::Malformed { what: "checkpoint".into(), reason: format!("unexpected tensor {name}") });
        }
    }
    let n_loaded = unet.len();
    let store = ParamStore::from_tensors(unet, dtype, device)?;
    let denoiser = Denoiser::build(&header.unet, store)?;
    if denoiser.params().vars().len() != n_loaded {
        return Err(Error::Malformed { what: "checkpoint".into(), reason: "denoiser parameters missing".into() });
    }
    let model = EditModel::new(vocab, table, denoiser, NoiseSchedule::new(header.schedule)?)?;
    let optimizer = if header.train.is_some() { Some((m, v)) } else { None };
    Ok(LoadedCheckpoint { header, model, optimizer })
}

pub fn load_checkpoint(path: &Path, dtype: DType, device: &Device) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path).map_err(|e| missing(path, e))?;
    parse_checkpoint(&bytes, dtype, device)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors_are_distinct() {
        assert!(matches!(parse_header(b"{\"tensors\": []}"), Err(Error::VersionMismatch { found, .. }) if found == "<missing>"));
        assert!(matches!(parse_header(b"not json"), Err(Error::Malformed { .. })));
        let extra = format!("{{\"format_version\": \"{CHECKPOINT_FORMAT_VERSION}\", \"bogus\": 1}}");
        assert!(matches!(parse_header(extra.as_bytes()), Err(Error::Malformed { .. })));
    }

    #[test]
    fn header_length_beyond_file_is_truncation() {
        let mut bytes = 1000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(parse_checkpoint(&bytes, DType::F32, &Device::Cpu), Err(Error::TruncatedCheckpoint(_))));
    }
}
