//! On-disk parameter snapshots: `manifest.json` lists `{name, shape, offset}`
//! for each tensor, and `params.bin` holds the values as little-endian `f32`
//! concatenated in manifest order. Offsets are in bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const FORMAT: &str = "tarmac-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub entries: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn save<F: Scalar>(store: &ParamStore<F>, dir: &Path, metadata: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    let mut entries = Vec::with_capacity(store.len());
    for p in store.iter() {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f32le".into(),
        entries,
        metadata,
    };
    fs::write(dir.join(BLOB_FILE), blob)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load<F: Scalar>(dir: &Path) -> Result<(ParamStore<F>, serde_json::Value)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::Checkpoint(format!("no manifest at {}", manifest_path.display())));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    if manifest.format != FORMAT || manifest.dtype != "f32le" {
        return Err(Error::Checkpoint(format!(
            "unsupported format {}/{}",
            manifest.format, manifest.dtype
        )));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!("`{}` runs past the end of the blob", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| F::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok((store, manifest.metadata))
}
