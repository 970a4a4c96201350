//! Field snapshots: the on-disk pair `<name>.fsnap` (raw little-endian
//! binary32 values, no header) plus `<name>.json` (manifest).

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quantile::{field_quantile, DEFAULT_SUBSAMPLE_CAP};

pub const SNAPSHOT_SCHEMA_VERSION: &str = "1";
pub const DATA_EXTENSION: &str = "fsnap";
pub const MANIFEST_EXTENSION: &str = "json";

const IO_CHUNK_ELEMENTS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    RawGradient,
    CheckpointDelta,
    Synthetic,
    NullN0,
    NullN1,
    NullN2,
}

impl FieldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldKind::RawGradient => "raw_gradient",
            FieldKind::CheckpointDelta => "checkpoint_delta",
            FieldKind::Synthetic => "synthetic",
            FieldKind::NullN0 => "null_n0",
            FieldKind::NullN1 => "null_n1",
            FieldKind::NullN2 => "null_n2",
        }
    }

    pub fn is_null(self) -> bool {
        matches!(self, FieldKind::NullN0 | FieldKind::NullN1 | FieldKind::NullN2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteOrder {
    Le,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub schema_version: String,
    pub family: String,
    pub model_id: String,
    pub field_kind: FieldKind,
    /// Released training-step value.
    pub step: u64,
    pub n_elements: u64,
    pub dtype: Dtype,
    pub byte_order: ByteOrder,
    pub seed: Option<u64>,
    pub source: String,
    /// Hex SHA-256 of the data file.
    pub checksum: String,
}

/// Descriptive fields of a snapshot; the rest of the manifest is derived
/// from the values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SnapshotMeta {
    pub family: String,
    pub model_id: String,
    pub field_kind: FieldKind,
    pub step: u64,
    pub seed: Option<u64>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSnapshot {
    manifest: SnapshotManifest,
    values: Vec<f32>,
}

impl FieldSnapshot {
    /// Build a snapshot from values, rejecting non-finite entries.
    pub fn new(meta: SnapshotMeta, values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("snapshot must have at least one element".into()));
        }
        check_finite(&values)?;
        let checksum = checksum_values(&values);
        let manifest = SnapshotManifest {
            schema_version: SNAPSHOT_SCHEMA_VERSION.to_string(),
            family: meta.family,
            model_id: meta.model_id,
            field_kind: meta.field_kind,
            step: meta.step,
            n_elements: values.len() as u64,
            dtype: Dtype::F32,
            byte_order: ByteOrder::Le,
            seed: meta.seed,
            source: meta.source,
            checksum,
        };
        Ok(Self { manifest, values })
    }

    pub fn manifest(&self) -> &SnapshotManifest {
        &self.manifest
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn meta(&self) -> SnapshotMeta {
        SnapshotMeta {
            family: self.manifest.family.clone(),
            model_id: self.manifest.model_id.clone(),
            field_kind: self.manifest.field_kind,
            step: self.manifest.step,
            seed: self.manifest.seed,
            source: self.manifest.source.clone(),
        }
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub q90_abs: f64,
    pub n_nonfinite: u64,
}

/// Moments and the 90th-percentile magnitude of a field. Non-finite entries
/// are counted and skipped.
pub fn field_stats(values: &[f32], seed: u64) -> Result<FieldStats> {
    let finite: Vec<f32> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n_nonfinite = (values.len() - finite.len()) as u64;
    if finite.is_empty() {
        return Err(Error::InvalidArgument("field has no finite values".into()));
    }
    let (mean, std) = mean_and_population_std(&finite);
    let q90_abs = field_quantile(&finite, 0.9, DEFAULT_SUBSAMPLE_CAP, seed)?;
    Ok(FieldStats {
        mean,
        std,
        q90_abs,
        n_nonfinite,
    })
}

pub(crate) fn mean_and_population_std(values: &[f32]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var.sqrt())
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index] as f64,
        }),
        None => Ok(()),
    }
}

fn checksum_values(values: &[f32]) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::with_capacity(IO_CHUNK_ELEMENTS * 4);
    for chunk in values.chunks(IO_CHUNK_ELEMENTS) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        hasher.update(&buf);
    }
    hex::encode(hasher.finalize())
}

/// Paths of the data and manifest files for `name` inside `dir`.
pub fn snapshot_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.{DATA_EXTENSION}")),
        dir.join(format!("{name}.{MANIFEST_EXTENSION}")),
    )
}

/// Write `<dir>/<name>.fsnap` and `<dir>/<name>.json`. Both files are
/// written to temporaries and renamed into place.
pub fn write_snapshot(snapshot: &FieldSnapshot, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    check_finite(&snapshot.values)?;
    if snapshot.manifest.n_elements != snapshot.values.len() as u64 {
        return Err(Error::InvalidArgument(format!(
            "manifest n_elements {} does not match {} values",
            snapshot.manifest.n_elements,
            snapshot.values.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (data_path, manifest_path) = snapshot_paths(dir, name);

    let mut hasher = Sha256::new();
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        let mut buf = Vec::with_capacity(IO_CHUNK_ELEMENTS * 4);
        for chunk in snapshot.values.chunks(IO_CHUNK_ELEMENTS) {
            buf.clear();
            for v in chunk {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            hasher.update(&buf);
            w.write_all(&buf).map_err(|e| Error::io(&data_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&data_path, e))?;
    }
    let checksum = hex::encode(hasher.finalize());
    if checksum != snapshot.manifest.checksum {
        return Err(Error::InvalidArgument(format!(
            "manifest checksum {} does not match values ({checksum})",
            snapshot.manifest.checksum
        )));
    }
    tmp.persist(&data_path)
        .map_err(|e| Error::io(&data_path, e.error))?;

    let mut json = serde_json::to_vec_pretty(&snapshot.manifest)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    json.push(b'\n');
    crate::pipeline::json::write_atomic(&manifest_path, &json)?;
    Ok((data_path, manifest_path))
}

fn resolve_pair(path: &Path) -> (PathBuf, PathBuf) {
    let ext = path.extension().and_then(|e| e.to_str());
    let stem = match ext {
        Some(DATA_EXTENSION) | Some(MANIFEST_EXTENSION) => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let base = stem.as_os_str().to_os_string();
    let mut data = base.clone();
    data.push(format!(".{DATA_EXTENSION}"));
    let mut manifest = base;
    manifest.push(format!(".{MANIFEST_EXTENSION}"));
    (PathBuf::from(data), PathBuf::from(manifest))
}

pub fn read_manifest(path: &Path) -> Result<SnapshotManifest> {
    let (_, manifest_path) = resolve_pair(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: SnapshotManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if manifest.schema_version != SNAPSHOT_SCHEMA_VERSION {
        return Err(Error::Format {
            path: manifest_path,
            reason: format!("unsupported schema_version {:?}", manifest.schema_version),
        });
    }
    if manifest.n_elements == 0 {
        return Err(Error::Format {
            path: manifest_path,
            reason: "n_elements must be positive".into(),
        });
    }
    Ok(manifest)
}

/// Read a snapshot given either file of the pair or their common stem.
pub fn read_snapshot(path: &Path) -> Result<FieldSnapshot> {
    let manifest = read_manifest(path)?;
    let (data_path, _) = resolve_pair(path);

    let file = File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let actual_len = file.metadata().map_err(|e| Error::io(&data_path, e))?.len();
    let expected_len = manifest.n_elements.checked_mul(4).ok_or_else(|| Error::Format {
        path: data_path.clone(),
        reason: "n_elements overflows".into(),
    })?;
    if actual_len != expected_len {
        return Err(Error::Format {
            path: data_path,
            reason: format!("data file has {actual_len} bytes, manifest implies {expected_len}"),
        });
    }

    let n = manifest.n_elements as usize;
    let mut values = Vec::with_capacity(n);
    let mut hasher = Sha256::new();
    let mut reader = BufReader::new(file);
    let mut buf = vec![0u8; IO_CHUNK_ELEMENTS * 4];
    let mut remaining = expected_len as usize;
    while remaining > 0 {
        let take = remaining.min(buf.len());
        reader
            .read_exact(&mut buf[..take])
            .map_err(|e| Error::io(&data_path, e))?;
        hasher.update(&buf[..take]);
        values.extend(
            buf[..take]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
        );
        remaining -= take;
    }
    let actual = hex::encode(hasher.finalize());
    if actual != manifest.checksum {
        return Err(Error::Checksum {
            path: data_path,
            expected: manifest.checksum,
            actual,
        });
    }
    if let Err(Error::NonFinite { index, value }) = check_finite(&values) {
        return Err(Error::Format {
            path: data_path,
            reason: format!("non-finite value {value} at index {index}"),
        });
    }
    Ok(FieldSnapshot { manifest, values })
}
