//! Named-tensor weight files: a JSON manifest plus a little-endian `f64` blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor2;

pub const WEIGHTS_VERSION: &str = "pargraph-weights-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub version: String,
    /// Blob file name, relative to the manifest's directory.
    pub blob: String,
    pub sha256: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

pub type NamedTensors = Vec<(String, Tensor2)>;

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn encode_blob(tensors: &[(String, Tensor2)]) -> Vec<u8> {
    let total: usize = tensors.iter().map(|(_, t)| t.data().len()).sum();
    let mut bytes = Vec::with_capacity(total * 8);
    for (_, t) in tensors {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

/// Writes `<path>` (manifest) and `<path>.bin` (blob, extension replaced).
pub fn save_weights(
    path: &Path,
    tensors: &[(String, Tensor2)],
    meta: serde_json::Value,
) -> Result<()> {
    for (name, t) in tensors {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("tensor {name}")));
        }
    }
    let blob = encode_blob(tensors);
    let blob_path = blob_path_for(path);
    let manifest = WeightManifest {
        version: WEIGHTS_VERSION.to_string(),
        blob: blob_path
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("bad weight path {}", path.display())))?
            .to_string(),
        sha256: hex::encode(Sha256::digest(&blob)),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: [t.rows(), t.cols()],
            })
            .collect(),
        meta,
    };
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<WeightManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: WeightManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        message: format!("manifest: {e}"),
    })?;
    if manifest.version != WEIGHTS_VERSION {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("unsupported version {:?}", manifest.version),
        });
    }
    Ok(manifest)
}

pub fn load_weights(path: &Path) -> Result<(WeightManifest, NamedTensors)> {
    let manifest = load_manifest(path)?;
    let blob_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let corrupt = |message: String| Error::Corrupt {
        path: blob_path.clone(),
        message,
    };
    let expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape[0] * t.shape[1])
        .sum();
    if blob.len() != expected * 8 {
        return Err(corrupt(format!(
            "blob holds {} bytes, manifest needs {}",
            blob.len(),
            expected * 8
        )));
    }
    if hex::encode(Sha256::digest(&blob)) != manifest.sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n = entry.shape[0] * entry.shape[1];
        let data: Vec<f64> = blob[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += n * 8;
        let t = Tensor2::new(entry.shape[0], entry.shape[1], data)?;
        if !t.all_finite() {
            return Err(corrupt(format!(
                "tensor {} has non-finite entries",
                entry.name
            )));
        }
        out.push((entry.name.clone(), t));
    }
    Ok((manifest, out))
}
