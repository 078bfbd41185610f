//! Checkpoint directories: `manifest.json` plus `weights.bin`.
//!
//! `weights.bin` is the little-endian concatenation of every tensor listed
//! in the manifest's index, in index order, stored as `f64` or `f32`
//! according to the manifest dtype.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Architecture, Dtype, HierarchicalModel};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "jebm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub dtype: Dtype,
    pub iteration: u64,
    pub architecture: Architecture,
    /// Free-form metadata (training config snapshot, optimizer step counts).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A model plus auxiliary named tensors (e.g. optimizer moments).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: HierarchicalModel,
    pub iteration: u64,
    pub meta: serde_json::Value,
    pub extra: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model: HierarchicalModel) -> Self {
        Checkpoint {
            model,
            iteration: 0,
            meta: serde_json::Value::Null,
            extra: Vec::new(),
        }
    }
}

fn elem_size(dtype: Dtype) -> u64 {
    match dtype {
        Dtype::F64 => 8,
        Dtype::F32 => 4,
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dtype: Dtype, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    let named = ckpt.model.named_tensors();
    let all = named
        .iter()
        .map(|(n, t)| (n.as_str(), *t))
        .chain(ckpt.extra.iter().map(|(n, t)| (n.as_str(), t)));
    for (name, t) in all {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
        });
        for &v in t.data() {
            match dtype {
                Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        dtype,
        iteration: ckpt.iteration,
        architecture: ckpt.model.architecture(),
        meta: ckpt.meta.clone(),
        tensors: entries,
    };
    write_atomic(&dir.join("weights.bin"), &bytes)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let weights_path = dir.join("weights.bin");
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        offset: 0,
        msg: e.to_string(),
    })?;
    let fmt_err = |path: &PathBuf, offset: u64, msg: String| Error::Format {
        path: path.clone(),
        offset,
        msg,
    };
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
        return Err(fmt_err(
            &manifest_path,
            0,
            format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
        ));
    }
    let bytes = fs::read(&weights_path)?;
    let es = elem_size(manifest.dtype);
    let mut model = HierarchicalModel::from_architecture(&manifest.architecture)?;
    let mut expected_offset = 0u64;
    let mut loaded: Vec<(String, Tensor)> = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(fmt_err(
                &weights_path,
                entry.offset,
                format!("tensor {} starts at {}, expected {}", entry.name, entry.offset, expected_offset),
            ));
        }
        let count: u64 = entry.shape.iter().product::<usize>() as u64;
        let end = entry.offset + count * es;
        if end > bytes.len() as u64 {
            return Err(fmt_err(
                &weights_path,
                bytes.len() as u64,
                format!("truncated: tensor {} needs bytes up to {}", entry.name, end),
            ));
        }
        let raw = &bytes[entry.offset as usize..end as usize];
        let data: Vec<f64> = match manifest.dtype {
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        loaded.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected_offset = end;
    }
    if expected_offset != bytes.len() as u64 {
        return Err(fmt_err(
            &weights_path,
            expected_offset,
            format!("{} trailing bytes", bytes.len() as u64 - expected_offset),
        ));
    }
    let mut by_name: std::collections::HashMap<String, Tensor> = loaded.into_iter().collect();
    for (name, slot) in model.named_tensors_mut() {
        let t = by_name.remove(&name).ok_or_else(|| {
            fmt_err(&manifest_path, 0, format!("tensor {} missing from index", name))
        })?;
        if t.shape() != slot.shape() {
            return Err(fmt_err(
                &manifest_path,
                0,
                format!("tensor {} has shape {:?}, architecture needs {:?}", name, t.shape(), slot.shape()),
            ));
        }
        *slot = t;
    }
    let mut extra: Vec<(String, Tensor)> = by_name.into_iter().collect();
    let order: std::collections::HashMap<&str, usize> = manifest
        .tensors
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.as_str(), i))
        .collect();
    extra.sort_by_key(|(n, _)| order[n.as_str()]);
    Ok(Checkpoint {
        model,
        iteration: manifest.iteration,
        meta: manifest.meta,
        extra,
    })
}

/// Reads only the manifest.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let p = dir.join("manifest.json");
    serde_json::from_slice(&fs::read(&p)?).map_err(|e| Error::Format {
        path: p,
        offset: 0,
        msg: e.to_string(),
    })
}
