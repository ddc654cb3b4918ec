//! Checkpoint container: magic, format version, length-prefixed JSON
//! header, then raw little-endian `f32` parameter data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tasnet_autodiff::Tensor;

use super::{ModelRegistry, SeparationModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TASNETCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    /// Free-form training information (epoch, validation loss, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, model: &dyn SeparationModel, meta: serde_json::Value) -> Result<()> {
    let mut params = Vec::new();
    let mut data = Vec::with_capacity(model.param_count() * 4);
    for (name, t) in model.params().iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
        });
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        kind: model.kind().to_string(),
        config: model.config(),
        params,
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn split(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let end = 20usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::json("checkpoint header", e))?;
    Ok((header, &bytes[end..]))
}

pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes)?.0)
}

/// Rebuilds the model named in the header and fills in its parameters.
pub fn load_checkpoint(path: &Path, registry: &ModelRegistry) -> Result<(Box<dyn SeparationModel>, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, data) = split(&bytes)?;
    let mut model = registry.build(&header.kind, &header.config, 0)?;
    let store = model.params_mut();
    if store.len() != header.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, the {} model has {}",
            header.params.len(),
            header.kind,
            store.len()
        )));
    }
    for (entry, (name, t)) in header.params.iter().zip(store.iter_mut()) {
        if entry.name != name || entry.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} {:?} does not match model tensor {name:?} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let start = entry.offset as usize;
        let end = start + t.numel() * 4;
        let raw = data
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("data for {name:?} is truncated")))?;
        let vals: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        *t = Tensor::new(t.shape().to_vec(), vals)?;
    }
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{infer, ForwardOptions, TasNet, TasNetConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = TasNetConfig {
            filters: 8,
            bottleneck: 4,
            hidden: 6,
            blocks: 2,
            repeats: 1,
            ..Default::default()
        };
        let m = TasNet::new(cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&p, &m, serde_json::json!({"epoch": 3})).unwrap();
        let (back, header) = load_checkpoint(&p, &ModelRegistry::standard()).unwrap();
        assert_eq!(header.meta["epoch"], 3);
        assert_eq!(back.params(), m.params());
        let y: Vec<f64> = (0..200).map(|i| (i as f64 * 0.05).sin()).collect();
        let a = infer(&m, &y, &ForwardOptions::default()).unwrap();
        let b = infer(back.as_ref(), &y, &ForwardOptions::default()).unwrap();
        assert_eq!(a, b);
        let p2 = dir.path().join("m2.ckpt");
        save_checkpoint(&p2, back.as_ref(), serde_json::json!({"epoch": 3})).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        fs::write(&p, b"hello world, not a checkpoint").unwrap();
        assert_eq!(load_checkpoint(&p, &ModelRegistry::standard()).err().unwrap().category(), "checkpoint");
        let m = TasNet::new(TasNetConfig { filters: 4, bottleneck: 2, hidden: 2, blocks: 1, repeats: 1, ..Default::default() }, 0).unwrap();
        save_checkpoint(&p, &m, serde_json::Value::Null).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(load_checkpoint(&p, &ModelRegistry::standard()).is_err());
    }
}
