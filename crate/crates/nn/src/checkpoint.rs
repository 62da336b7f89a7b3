//! Versioned checkpoint container.
//!
//! Layout: the 8-byte magic `VSEGCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a UTF-8 JSON header, then the raw
//! little-endian `f32` data of every tensor in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::models::{ModelConfig, ModelHandle};
use crate::params::ParamKind;
use crate::precision::Precision;

const MAGIC: &[u8; 8] = b"VSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    architecture: String,
    config: ModelConfig,
    precision: Precision,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, model: &ModelHandle, epoch: usize) -> Result<()> {
    let store = model.store();
    let header = Header {
        version: FORMAT_VERSION,
        architecture: model.architecture().tag().to_string(),
        config: model.config().clone(),
        precision: model.precision,
        epoch,
        tensors: store
            .entries()
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.kind == ParamKind::Trainable,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for e in store.entries() {
        for v in e.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, returning the rebuilt model and its epoch counter.
pub fn load(path: &Path) -> Result<(ModelHandle, usize)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let mut json = vec![0u8; u64::from_le_bytes(b8) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut model = ModelHandle::build(header.config, 0)?;
    model.precision = header.precision;
    if model.store().len() != header.tensors.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint holds {} tensors, architecture expects {}",
            header.tensors.len(),
            model.store().len()
        )));
    }
    for t in &header.tensors {
        let id = model
            .store()
            .find(&t.name)
            .ok_or_else(|| NnError::Checkpoint(format!("unknown tensor {}", t.name)))?;
        let target = model.store_mut().get_mut(id);
        if target.shape() != t.shape.as_slice() {
            return Err(NnError::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                t.name,
                t.shape,
                target.shape()
            )));
        }
        for v in target.data_mut() {
            r.read_exact(&mut b4)?;
            *v = f32::from_le_bytes(b4);
        }
    }
    Ok((model, header.epoch))
}
