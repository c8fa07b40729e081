//! Single-file checkpoints: a JSON header followed by raw little-endian
//! tensors (parameters, then optimiser moments).
//!
//! ```text
//! b"RCKP" | u32 format version | u64 header length | header JSON | tensor bytes
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::Adam;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::{Stage, TrainState};

pub const MAGIC: &[u8; 4] = b"RCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleInfo {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub tool_version: String,
    pub dtype: String,
    pub config: String,
    pub config_hash: String,
    pub stage: Stage,
    pub step: u64,
    pub object_id: Option<String>,
    pub schedule: ScheduleInfo,
    pub adam_t: u64,
    pub tensors: Vec<TensorEntry>,
}

pub fn header_of<T: Scalar>(state: &TrainState<T>) -> CheckpointHeader {
    let cfg = &state.model.config;
    CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        dtype: T::DTYPE.to_string(),
        config: cfg.to_toml(),
        config_hash: cfg.hash(),
        stage: state.stage,
        step: state.step,
        object_id: state.object_id.clone(),
        schedule: ScheduleInfo {
            timesteps: cfg.timesteps,
            beta_start: cfg.beta_start,
            beta_end: cfg.beta_end,
        },
        adam_t: state.adam.t,
        tensors: state
            .model
            .store
            .iter()
            .map(|(_, name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    }
}

/// Serialized bytes of a training state.
pub fn to_bytes<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let header = serde_json::to_vec(&header_of(state)).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    let tensors = state
        .model
        .store
        .iter()
        .map(|(_, _, t)| t)
        .chain(&state.adam.m)
        .chain(&state.adam.v);
    for t in tensors {
        T::write_le(t.data(), &mut out);
    }
    out
}

pub fn save<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = to_bytes(state);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads only the header.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(&bytes, path).map(|(h, _)| h)
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(format!(
            "{}: checkpoint format {version}, this build reads {CHECKPOINT_VERSION}",
            path.display()
        )));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::format(path, e))?;
    Ok((header, end))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8], path: &Path) -> Result<TrainState<T>> {
    let (header, mut at) = parse_header(bytes, path)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Version(format!(
            "{}: checkpoint holds {} tensors, requested {}",
            path.display(),
            header.dtype,
            T::DTYPE
        )));
    }
    let config = RunConfig::from_toml_str(&header.config)?;
    if config.hash() != header.config_hash {
        return Err(Error::Version(format!("{}: config hash mismatch", path.display())));
    }
    let expected_schedule = ScheduleInfo {
        timesteps: config.timesteps,
        beta_start: config.beta_start,
        beta_end: config.beta_end,
    };
    if header.schedule != expected_schedule {
        return Err(Error::Version(format!("{}: schedule does not match config", path.display())));
    }
    let mut model = Model::<T>::new(&config, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    if header.tensors.len() != ids.len() {
        return Err(Error::Version(format!(
            "{}: {} tensors stored, model has {}",
            path.display(),
            header.tensors.len(),
            ids.len()
        )));
    }
    let mut read = |shape: &[usize]| -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let need = n * T::BYTES;
        if at + need > bytes.len() {
            return Err(Error::format(path, "truncated tensor data"));
        }
        let data = T::read_le(&bytes[at..at + need]);
        at += need;
        Tensor::new(shape, data)
    };
    for (entry, &id) in header.tensors.iter().zip(&ids) {
        if model.store.name(id) != entry.name || model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Version(format!(
                "{}: tensor {} {:?} does not match model layout",
                path.display(),
                entry.name,
                entry.shape
            )));
        }
        *model.store.get_mut(id) = read(&entry.shape)?;
    }
    let mut adam = Adam::new(&model.store, config.adam_beta1, config.adam_beta2, config.adam_eps);
    adam.t = header.adam_t;
    for i in 0..ids.len() {
        adam.m[i] = read(&header.tensors[i].shape)?;
    }
    for i in 0..ids.len() {
        adam.v[i] = read(&header.tensors[i].shape)?;
    }
    if at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    Ok(TrainState {
        model,
        adam,
        step: header.step,
        stage: header.stage,
        object_id: header.object_id,
    })
}

pub fn load<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let cfg = RunConfig::micro();
        let mut state = TrainState::<f32>::new(Model::new(&cfg, 3).unwrap());
        state.step = 7;
        state.adam.t = 7;
        state.adam.m[0].data_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        save(&state, &path).unwrap();
        let back = load::<f32>(&path).unwrap();
        assert_eq!(to_bytes(&back), to_bytes(&state));
        assert_eq!(back.step, 7);
        assert!(matches!(load::<f64>(&path), Err(Error::Version(_))));
    }

    #[test]
    fn rejects_other_versions_and_garbage() {
        let cfg = RunConfig::micro();
        let state = TrainState::<f32>::new(Model::new(&cfg, 3).unwrap());
        let mut bytes = to_bytes(&state);
        let p = Path::new("mem");
        bytes[4] = 9;
        assert!(matches!(from_bytes::<f32>(&bytes, p), Err(Error::Version(_))));
        assert!(matches!(from_bytes::<f32>(b"nope", p), Err(Error::Format { .. })));
    }
}
