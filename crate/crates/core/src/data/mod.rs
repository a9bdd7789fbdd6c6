//! Feature records, the class manifest, dataset files, pair sampling and a
//! synthetic dataset generator.

mod io;
mod sampler;
mod synthetic;

pub use io::{
    load_dataset, load_dataset_files, manifest_path, read_manifest, read_records, records_path,
    save_dataset, write_manifest, write_records, RecordsFile,
};
pub use sampler::{sample_pairs, PairSampler};
pub use synthetic::{gen_synthetic, gen_synthetic_with_maps, SyntheticConfig, SyntheticMaps};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("i/o: {0}")]
    Stream(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: &'static str },
    #[error("unsupported format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("records file truncated at record {record}")]
    Truncated { record: usize },
    #[error("trailing bytes after record {records}")]
    TrailingData { records: usize },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("{split} record {record}: {what} has dimension {actual}, expected {expected}")]
    DimMismatch {
        split: &'static str,
        record: usize,
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{split} record {record}: unknown class id {class_id} (manifest has {n_classes} classes)")]
    UnknownClass {
        split: &'static str,
        record: usize,
        class_id: u32,
        n_classes: usize,
    },
    #[error("{split} record {record}: non-finite {modality} value at coordinate {coord}")]
    NonFinite {
        split: &'static str,
        record: usize,
        modality: &'static str,
        coord: usize,
    },
    #[error("train record {record} belongs to unseen class {class_id}")]
    UnseenInTrain { record: usize, class_id: u32 },
    #[error("pair sampling needs at least 2 distinct classes, found {found}")]
    TooFewClasses { found: usize },
    #[error("batch size must be >= 1")]
    EmptyBatch,
    #[error("invalid generator arguments: {0}")]
    InvalidArgs(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Feature dimensions of the three modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureDims {
    pub audio: usize,
    pub video: usize,
    pub text: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        Self {
            audio: 1024,
            video: 1024,
            text: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub class_id: u32,
    pub audio: Vec<f64>,
    pub video: Vec<f64>,
}

impl FeatureRecord {
    pub fn bit_eq(&self, other: &Self) -> bool {
        fn same(a: &[f64], b: &[f64]) -> bool {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.class_id == other.class_id && same(&self.audio, &other.audio) && same(&self.video, &other.video)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub seen: bool,
    pub text: Vec<f64>,
}

/// All classes of a dataset with their label text features.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassManifest {
    classes: Vec<ClassInfo>,
    text_dim: usize,
}

impl ClassManifest {
    /// Validates ids (contiguous from 0, in order), names, text dims and the
    /// presence of at least one seen class.
    pub fn new(classes: Vec<ClassInfo>) -> Result<Self> {
        let Some(first) = classes.first() else {
            return Err(DataError::InvalidManifest("no classes".into()));
        };
        let text_dim = first.text.len();
        if text_dim == 0 {
            return Err(DataError::InvalidManifest("text dimension is 0".into()));
        }
        for (i, c) in classes.iter().enumerate() {
            if c.id as usize != i {
                return Err(DataError::InvalidManifest(format!(
                    "class ids must be contiguous from 0; position {i} has id {}",
                    c.id
                )));
            }
            if c.name.is_empty() || c.name.contains(['\t', '\n', '\r']) {
                return Err(DataError::InvalidManifest(format!(
                    "class {i}: name must be nonempty without tabs or newlines"
                )));
            }
            if c.text.len() != text_dim {
                return Err(DataError::InvalidManifest(format!(
                    "class {i}: text dimension {} differs from {text_dim}",
                    c.text.len()
                )));
            }
            if let Some(coord) = c.text.iter().position(|v| !v.is_finite()) {
                return Err(DataError::InvalidManifest(format!(
                    "class {i}: non-finite text value at coordinate {coord}"
                )));
            }
        }
        if !classes.iter().any(|c| c.seen) {
            return Err(DataError::InvalidManifest("no seen class".into()));
        }
        Ok(Self { classes, text_dim })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn text_dim(&self) -> usize {
        self.text_dim
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn get(&self, id: u32) -> Option<&ClassInfo> {
        self.classes.get(id as usize)
    }

    pub fn is_seen(&self, id: u32) -> bool {
        self.get(id).is_some_and(|c| c.seen)
    }

    pub fn text(&self, id: u32) -> Option<&[f64]> {
        self.get(id).map(|c| c.text.as_slice())
    }

    pub fn seen_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().filter(|c| c.seen).map(|c| c.id)
    }

    pub fn unseen_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.iter().filter(|c| !c.seen).map(|c| c.id)
    }

    /// The same manifest with classes reordered by `order` (new position ->
    /// old id) and ids renumbered.
    pub fn permuted(&self, order: &[u32]) -> Result<Self> {
        let classes = order
            .iter()
            .enumerate()
            .map(|(new_id, &old)| {
                let mut c = self
                    .get(old)
                    .ok_or_else(|| DataError::InvalidManifest(format!("no class {old}")))?
                    .clone();
                c.id = new_id as u32;
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(classes)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitSet {
    pub train: Vec<FeatureRecord>,
    pub validation: Vec<FeatureRecord>,
    pub test: Vec<FeatureRecord>,
}

impl SplitSet {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &[FeatureRecord])> {
        [
            ("train", self.train.as_slice()),
            ("val", self.validation.as_slice()),
            ("test", self.test.as_slice()),
        ]
        .into_iter()
    }
}

/// A validated manifest together with its splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: ClassManifest,
    pub splits: SplitSet,
    dims: FeatureDims,
}

impl Dataset {
    /// Validates every record against the manifest and the declared feature
    /// dims.
    pub fn new(manifest: ClassManifest, splits: SplitSet, audio_dim: usize, video_dim: usize) -> Result<Self> {
        let n_classes = manifest.len();
        for (split, records) in splits.iter() {
            for (record, r) in records.iter().enumerate() {
                if r.class_id as usize >= n_classes {
                    return Err(DataError::UnknownClass {
                        split,
                        record,
                        class_id: r.class_id,
                        n_classes,
                    });
                }
                for (what, values, expected) in [("audio", &r.audio, audio_dim), ("video", &r.video, video_dim)] {
                    if values.len() != expected {
                        return Err(DataError::DimMismatch {
                            split,
                            record,
                            what,
                            expected,
                            actual: values.len(),
                        });
                    }
                    if let Some(coord) = values.iter().position(|v| !v.is_finite()) {
                        return Err(DataError::NonFinite {
                            split,
                            record,
                            modality: what,
                            coord,
                        });
                    }
                }
            }
        }
        if let Some((record, r)) = splits
            .train
            .iter()
            .enumerate()
            .find(|(_, r)| !manifest.is_seen(r.class_id))
        {
            return Err(DataError::UnseenInTrain {
                record,
                class_id: r.class_id,
            });
        }
        let dims = FeatureDims {
            audio: audio_dim,
            video: video_dim,
            text: manifest.text_dim(),
        };
        Ok(Self { manifest, splits, dims })
    }

    pub fn dims(&self) -> FeatureDims {
        self.dims
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let same_records = |a: &[FeatureRecord], b: &[FeatureRecord]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
        };
        let same_manifest = self.manifest.len() == other.manifest.len()
            && self.manifest.classes().iter().zip(other.manifest.classes()).all(|(a, b)| {
                a.id == b.id
                    && a.name == b.name
                    && a.seen == b.seen
                    && a.text.len() == b.text.len()
                    && a.text.iter().zip(&b.text).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        self.dims == other.dims
            && same_manifest
            && same_records(&self.splits.train, &other.splits.train)
            && same_records(&self.splits.validation, &other.splits.validation)
            && same_records(&self.splits.test, &other.splits.test)
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;

    pub fn manifest(n_seen: usize, n_unseen: usize, dt: usize) -> ClassManifest {
        let classes = (0..n_seen + n_unseen)
            .map(|i| ClassInfo {
                id: i as u32,
                name: format!("c{i}"),
                seen: i < n_seen,
                text: (0..dt).map(|j| (i * dt + j) as f64 * 0.25 - 1.0).collect(),
            })
            .collect();
        ClassManifest::new(classes).unwrap()
    }

    pub fn record(class_id: u32, da: usize, dv: usize) -> FeatureRecord {
        FeatureRecord {
            class_id,
            audio: vec![class_id as f64; da],
            video: vec![-(class_id as f64); dv],
        }
    }
}
