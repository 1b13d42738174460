//! JSON checkpoints: model config plus every named tensor, stored as base64 of the
//! little-endian bytes.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "parkcast-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    dtype: String,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

/// Writes `store` with its model `config`. `kind` names the model family so a
/// checkpoint of one model cannot be loaded into another.
pub fn save_checkpoint<T: Real, C: Serialize>(path: &Path, kind: &str, config: &C, store: &ParamStore<T>) -> Result<()> {
    let tensors = store
        .iter()
        .map(|p| {
            let mut bytes = Vec::with_capacity(p.value.numel() * T::BYTES);
            p.value.data().iter().for_each(|v| v.write_le(&mut bytes));
            TensorRecord { name: p.name.clone(), shape: p.value.shape().to_vec(), data: STANDARD.encode(bytes) }
        })
        .collect();
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: VERSION,
        dtype: T::DTYPE.into(),
        kind: kind.into(),
        config: serde_json::to_value(config)?,
        tensors,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

/// Reads only the config of a checkpoint, so the caller can build a matching model.
pub fn read_checkpoint_config<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<C> {
    let file = read_file(path, kind)?;
    Ok(serde_json::from_value(file.config)?)
}

/// Overwrites every tensor of `store` from the checkpoint. Names and shapes must match
/// exactly.
pub fn load_checkpoint<T: Real>(path: &Path, kind: &str, store: &mut ParamStore<T>) -> Result<()> {
    let file = read_file(path, kind)?;
    if file.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("dtype {} does not match {}", file.dtype, T::DTYPE)));
    }
    if file.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {} tensors, model has {}", file.tensors.len(), store.len())));
    }
    for rec in file.tensors {
        let id = store.id(&rec.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{}'", rec.name)))?;
        let p = store.get_mut(id);
        if p.value.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?}, model expects {:?}",
                rec.name,
                rec.shape,
                p.value.shape()
            )));
        }
        let bytes = STANDARD.decode(rec.data.as_bytes()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if bytes.len() != p.value.numel() * T::BYTES {
            return Err(Error::Checkpoint(format!("tensor '{}' has {} bytes", rec.name, bytes.len())));
        }
        let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        p.value = Tensor::new(&rec.shape, data)?;
    }
    Ok(())
}

fn read_file(path: &Path, kind: &str) -> Result<CheckpointFile> {
    let file: CheckpointFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format {} v{}", file.format, file.version)));
    }
    if file.kind != kind {
        return Err(Error::Checkpoint(format!("checkpoint holds a '{}' model, expected '{kind}'", file.kind)));
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(shape: &[usize]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_fn(shape, |i| i as f32 * 0.1 - 1.0));
        s.add_buffer("b", Tensor::new(&[1], vec![f32::MIN_POSITIVE]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let src = store(&[2, 3]);
        save_checkpoint(&path, "toy", &serde_json::json!({"width": 3}), &src).unwrap();
        let mut dst = store(&[2, 3]);
        dst.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
        load_checkpoint(&path, "toy", &mut dst).unwrap();
        for (a, b) in src.iter().zip(dst.iter()) {
            assert_eq!(a.value, b.value);
        }
        let cfg: serde_json::Value = read_checkpoint_config(&path, "toy").unwrap();
        assert_eq!(cfg["width"], 3);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, "toy", &(), &store(&[2, 3])).unwrap();
        let mut other = store(&[3, 2]);
        assert!(matches!(load_checkpoint(&path, "toy", &mut other), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_checkpoint(&path, "toy", &(), &store(&[2])).unwrap();
        assert!(load_checkpoint(&path, "other", &mut store(&[2])).is_err());
    }
}
