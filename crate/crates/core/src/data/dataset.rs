use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_file, write_file, Standardization};
use crate::error::{Error, Result};
use crate::types::{EmbeddingMatrix, ProcedureSample};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub split: Split,
    /// Byte offset into the blob.
    pub offset: u64,
    pub byte_len: u64,
    pub step_labels: Vec<usize>,
    pub task_label: usize,
    pub target_mask: Vec<bool>,
}

/// JSON side of a dataset. The blob holds little-endian `f32` values, sample
/// after sample, each sample clip-major, then token-major, then channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub tokens_per_clip: usize,
    pub token_dim: usize,
    pub seq_len: usize,
    pub num_steps: usize,
    pub num_tasks: usize,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    #[serde(default)]
    pub standardization: Option<Standardization>,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokens_per_clip: usize,
    pub token_dim: usize,
    pub seq_len: usize,
    pub num_steps: usize,
    pub num_tasks: usize,
    pub standardization: Option<Standardization>,
    pub train: Vec<ProcedureSample>,
    pub val: Vec<ProcedureSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[ProcedureSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    fn sample_bytes(&self) -> u64 {
        (self.seq_len * self.tokens_per_clip * self.token_dim * 4) as u64
    }
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and the blob next to it with extension `.bin`.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<DatasetManifest> {
    let blob_file = blob_path(path);
    let per_sample = ds.sample_bytes();
    let mut blob = Vec::with_capacity((ds.train.len() + ds.val.len()) * per_sample as usize);
    let mut records = Vec::new();
    for (split, samples) in [(Split::Train, &ds.train), (Split::Val, &ds.val)] {
        for s in samples {
            if s.len() != ds.seq_len || s.clips.iter().any(|c| c.shape() != (ds.tokens_per_clip, ds.token_dim)) {
                return Err(Error::ShapeMismatch(format!(
                    "sample does not match {} clips of {}x{}",
                    ds.seq_len, ds.tokens_per_clip, ds.token_dim
                )));
            }
            records.push(SampleRecord {
                split,
                offset: blob.len() as u64,
                byte_len: per_sample,
                step_labels: s.step_labels.clone(),
                task_label: s.task_label,
                target_mask: s.target_mask.clone(),
            });
            for c in &s.clips {
                for x in c.as_slice() {
                    blob.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        tokens_per_clip: ds.tokens_per_clip,
        token_dim: ds.token_dim,
        seq_len: ds.seq_len,
        num_steps: ds.num_steps,
        num_tasks: ds.num_tasks,
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        standardization: ds.standardization.clone(),
        records,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_file(path, &json)?;
    write_file(&blob_file, &blob)?;
    Ok(manifest)
}

/// Reads a manifest and its blob, validating layout against the manifest.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&read_file(path)?).map_err(|e| Error::CorruptManifest(e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = read_file(&blob_file)?;
    decode(&manifest, &blob)
}

fn decode(m: &DatasetManifest, blob: &[u8]) -> Result<Dataset> {
    let (n, k, d) = (m.seq_len, m.tokens_per_clip, m.token_dim);
    let expected = (n * k * d * 4) as u64;
    let mut ds = Dataset {
        tokens_per_clip: k,
        token_dim: d,
        seq_len: n,
        num_steps: m.num_steps,
        num_tasks: m.num_tasks,
        standardization: m.standardization.clone(),
        train: Vec::new(),
        val: Vec::new(),
    };
    let mut spans: Vec<(u64, u64)> = Vec::with_capacity(m.records.len());
    for (i, r) in m.records.iter().enumerate() {
        if r.byte_len != expected {
            return Err(Error::ShapeMismatch(format!(
                "record {i} holds {} bytes, {n} clips of {k}x{d} need {expected}",
                r.byte_len
            )));
        }
        let end = r.offset.checked_add(r.byte_len).unwrap_or(u64::MAX);
        if end > blob.len() as u64 {
            return Err(Error::OffsetOutOfRange {
                offset: r.offset,
                end,
                len: blob.len() as u64,
            });
        }
        if r.step_labels.len() != n || r.target_mask.len() != n {
            return Err(Error::CorruptManifest(format!("record {i} labels or mask not of length {n}")));
        }
        spans.push((r.offset, end));
        let bytes = &blob[r.offset as usize..end as usize];
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let clips = values
            .chunks_exact(k * d)
            .map(|c| EmbeddingMatrix::new(k, d, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let sample = ProcedureSample {
            clips,
            step_labels: r.step_labels.clone(),
            task_label: r.task_label,
            target_mask: r.target_mask.clone(),
        };
        match r.split {
            Split::Train => ds.train.push(sample),
            Split::Val => ds.val.push(sample),
        }
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[1].0 < w[0].1) {
        return Err(Error::CorruptManifest("overlapping sample records".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};

    fn dataset() -> Dataset {
        let cfg = SyntheticConfig {
            tokens_per_clip: 2,
            token_dim: 4,
            train_samples: 10,
            val_samples: 3,
            ..Default::default()
        };
        let data = gen_synthetic(&cfg).unwrap();
        Dataset {
            tokens_per_clip: 2,
            token_dim: 4,
            seq_len: 9,
            num_steps: 12,
            num_tasks: 4,
            standardization: data.standardization,
            train: data.train,
            val: data.val,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let ds = dataset();
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let (m1, b1) = (std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("ds.bin")).unwrap());
        write_dataset(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), m1);
        assert_eq!(std::fs::read(dir.path().join("ds.bin")).unwrap(), b1);
    }

    #[test]
    fn truncated_blob() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        write_dataset(&dataset(), &path).unwrap();
        let bin = dir.path().join("ds.bin");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::OffsetOutOfRange { .. })));
    }

    #[test]
    fn manifest_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let mut m = write_dataset(&dataset(), &path).unwrap();
        m.tokens_per_clip = 3;
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn corrupt_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        let mut m = write_dataset(&dataset(), &path).unwrap();
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::CorruptManifest(_))));
        m.records[1].offset = m.records[0].offset;
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::CorruptManifest(_))));
    }
}
