//! NDJSON frame files and the `PARF` feature blob.
//!
//! Each line holds one frame. A subject carries its appearance feature either
//! inline (`"feature": [...]`) or as a reference into a blob file
//! (`"feature_ref": {"file": "...", "row": n}`) resolved relative to the
//! NDJSON file's directory. The blob is a 12-byte header (`PARF`, `u32` rows,
//! `u32` dim, little-endian) followed by row-major little-endian `f32`s.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{FrameAnnotation, GroupAnnotation, LabelSet, SubjectAnnotation};
use crate::error::{Error, Result};

const BLOB_MAGIC: &[u8; 4] = b"PARF";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    frame_id: u64,
    image_width: u32,
    image_height: u32,
    subjects: Vec<SubjectRecord>,
    groups: Vec<GroupRecord>,
    global: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SubjectRecord {
    id: u64,
    bbox: [f64; 4],
    actions: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_ref: Option<FeatureRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRef {
    file: String,
    row: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupRecord {
    members: Vec<u64>,
    activities: Vec<usize>,
}

/// Where [`save_dataset`] puts subject features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FeatureStorage {
    Inline,
    /// Blob written next to the NDJSON file under this name. Values are
    /// stored as `f32`.
    Blob(String),
}

pub fn read_feature_blob(path: &Path) -> Result<(usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |message: &str| Error::Corrupt {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != BLOB_MAGIC {
        return Err(corrupt("missing PARF header"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + rows * dim * 4 {
        return Err(corrupt("blob length does not match header"));
    }
    let values = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dim, values))
}

pub fn write_feature_blob(path: &Path, dim: usize, rows: &[Vec<f64>]) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + rows.len() * dim * 4);
    bytes.extend_from_slice(BLOB_MAGIC);
    bytes.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in rows {
        if r.len() != dim {
            return Err(Error::invalid("feature rows of unequal length"));
        }
        for &v in r {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct BlobCache {
    base: PathBuf,
    blobs: HashMap<String, (usize, Vec<f32>)>,
}

impl BlobCache {
    fn row(&mut self, file: &str, row: u32, line: usize) -> Result<Vec<f64>> {
        if !self.blobs.contains_key(file) {
            let blob = read_feature_blob(&self.base.join(file))?;
            self.blobs.insert(file.to_string(), blob);
        }
        let (dim, values) = &self.blobs[file];
        let start = row as usize * dim;
        if start + dim > values.len() {
            return Err(Error::data(
                Some(line),
                format!("feature_ref row {row} outside blob {file}"),
            ));
        }
        Ok(values[start..start + dim]
            .iter()
            .map(|&v| v as f64)
            .collect())
    }
}

/// Reads and validates every frame of an NDJSON file. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<FrameAnnotation>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut cache = BlobCache {
        base: path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf(),
        blobs: HashMap::new(),
    };
    let mut frames = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(Some(lineno), format!("schema violation: {e}")))?;
        let frame = from_record(record, &mut cache, lineno)?;
        frame
            .validate(None)
            .map_err(|e| Error::data(Some(lineno), e.to_string()))?;
        if let Some(first) = frames.first().map(FrameAnnotation::feature_dim) {
            if frame.feature_dim() != first {
                return Err(Error::data(
                    Some(lineno),
                    format!("feature dim {} differs from {first}", frame.feature_dim()),
                ));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

fn from_record(r: FrameRecord, cache: &mut BlobCache, line: usize) -> Result<FrameAnnotation> {
    let mut subjects = Vec::with_capacity(r.subjects.len());
    for s in r.subjects {
        let feature = match (s.feature, s.feature_ref) {
            (Some(f), None) => f,
            (None, Some(fr)) => cache.row(&fr.file, fr.row, line)?,
            _ => {
                return Err(Error::data(
                    Some(line),
                    format!(
                        "subject {} needs exactly one of feature / feature_ref",
                        s.id
                    ),
                ))
            }
        };
        subjects.push(SubjectAnnotation {
            id: s.id,
            bbox: s.bbox,
            feature,
            actions: s.actions.into_iter().collect(),
        });
    }
    Ok(FrameAnnotation {
        frame_id: r.frame_id,
        image_width: r.image_width,
        image_height: r.image_height,
        subjects,
        groups: r
            .groups
            .into_iter()
            .map(|g| GroupAnnotation {
                members: g.members.into_iter().collect(),
                activities: g.activities.into_iter().collect(),
            })
            .collect(),
        global_activities: r.global.into_iter().collect(),
    })
}

fn labels(set: &LabelSet) -> Vec<usize> {
    set.iter().copied().collect()
}

/// Writes frames as NDJSON (and the feature blob, if requested).
pub fn save_dataset(
    path: &Path,
    frames: &[FrameAnnotation],
    storage: &FeatureStorage,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut blob_rows: Vec<Vec<f64>> = Vec::new();
    for f in frames {
        let subjects = f
            .subjects
            .iter()
            .map(|s| {
                let (feature, feature_ref) = match storage {
                    FeatureStorage::Inline => (Some(s.feature.clone()), None),
                    FeatureStorage::Blob(name) => {
                        blob_rows.push(s.feature.clone());
                        let fr = FeatureRef {
                            file: name.clone(),
                            row: (blob_rows.len() - 1) as u32,
                        };
                        (None, Some(fr))
                    }
                };
                SubjectRecord {
                    id: s.id,
                    bbox: s.bbox,
                    actions: labels(&s.actions),
                    feature,
                    feature_ref,
                }
            })
            .collect();
        let record = FrameRecord {
            frame_id: f.frame_id,
            image_width: f.image_width,
            image_height: f.image_height,
            subjects,
            groups: f
                .groups
                .iter()
                .map(|g| GroupRecord {
                    members: g.members.iter().copied().collect(),
                    activities: labels(&g.activities),
                })
                .collect(),
            global: labels(&f.global_activities),
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    if let FeatureStorage::Blob(name) = storage {
        let dim = frames
            .first()
            .map(FrameAnnotation::feature_dim)
            .unwrap_or(0);
        let blob_path = path.parent().unwrap_or_else(|| Path::new(".")).join(name);
        write_feature_blob(&blob_path, dim, &blob_rows)?;
    }
    Ok(())
}
