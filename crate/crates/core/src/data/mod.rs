//! Datasets: readers for MNIST IDX and `.amat` text files, the
//! rotated/scaled dataset generators, a binary split store, and seeded
//! mini-batch iteration.

mod amat;
mod batch;
mod generate;
mod idx;
mod store;

pub use amat::{read_amat, write_amat};
pub use batch::{batches, Batch, Batches};
pub use generate::{
    generate_transformed, read_sidecar, write_sidecar, RegimeKind, TransformRegime,
};
pub use idx::{parse_idx, read_idx};
pub use store::{read_split, split_paths, write_split, IMAGES_MAGIC, LABELS_MAGIC};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::QuarterTurn;
use crate::tensor::{Tensor4, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg} (byte offset {offset})")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("{path}: line {line}: {msg}")]
    Text {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sidecar: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parameters drawn for one generated image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub angle_deg: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub source: String,
    pub regime: RegimeKind,
    pub seed: Option<u64>,
    /// One entry per image when produced by a generator.
    pub draws: Vec<Draw>,
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor4,
    labels: Vec<usize>,
    classes: usize,
    meta: DatasetMeta,
}

impl Dataset {
    /// `classes` defaults to `max(label) + 1`.
    pub fn new(
        images: Tensor4,
        labels: Vec<usize>,
        classes: Option<usize>,
        source: impl Into<String>,
    ) -> Result<Self> {
        let count = images.shape()[0];
        if count != labels.len() {
            return Err(DataError::Invalid(format!(
                "{count} images but {} labels",
                labels.len()
            )));
        }
        let inferred = labels.iter().max().map_or(0, |&m| m + 1);
        let classes = classes.unwrap_or(inferred);
        if inferred > classes {
            return Err(DataError::Invalid(format!(
                "label {} out of range for {classes} classes",
                inferred - 1
            )));
        }
        Ok(Self {
            images,
            labels,
            classes,
            meta: DatasetMeta {
                source: source.into(),
                regime: RegimeKind::None,
                seed: None,
                draws: Vec::new(),
                normalization: None,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor4 {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut DatasetMeta {
        &mut self.meta
    }

    /// `(channels, height, width)` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.shape();
        [c, h, w]
    }

    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if self.labels.iter().any(|&l| l >= classes) {
            return Err(DataError::Invalid(format!(
                "labels exceed {classes} classes"
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// Items `[start, end)`, keeping metadata aligned.
    pub fn subset(&self, start: usize, end: usize) -> Result<Self> {
        let end = end.min(self.len());
        let start = start.min(end);
        let mut meta = self.meta.clone();
        if !meta.draws.is_empty() {
            meta.draws = meta.draws[start..end].to_vec();
        }
        Ok(Self {
            images: self.images.slice_batch(start, end)?,
            labels: self.labels[start..end].to_vec(),
            classes: self.classes,
            meta,
        })
    }

    /// Applies `(v − mean) / std` to every pixel and records the constants.
    pub fn standardize(&mut self, norm: Normalization) -> Result<()> {
        if self.meta.normalization.is_some() {
            return Err(DataError::Invalid("dataset is already standardized".into()));
        }
        if norm.std.is_nan() || norm.std <= 0.0 {
            return Err(DataError::Invalid(format!(
                "std must be positive, got {}",
                norm.std
            )));
        }
        for v in self.images.data_mut() {
            *v = (*v - norm.mean) / norm.std;
        }
        self.meta.normalization = Some(norm);
        Ok(())
    }

    /// Inverse of [`Dataset::standardize`].
    pub fn destandardize(&mut self) -> Result<()> {
        let norm = self
            .meta
            .normalization
            .take()
            .ok_or_else(|| DataError::Invalid("dataset is not standardized".into()))?;
        for v in self.images.data_mut() {
            *v = *v * norm.std + norm.mean;
        }
        Ok(())
    }

    /// Every image rotated by the same quarter turn (labels unchanged).
    pub fn rotated(&self, turn: QuarterTurn) -> Result<Self> {
        Ok(Self {
            images: crate::geometry::rot90(&self.images, turn)?,
            labels: self.labels.clone(),
            classes: self.classes,
            meta: self.meta.clone(),
        })
    }

    pub(crate) fn from_parts(
        images: Tensor4,
        labels: Vec<usize>,
        classes: usize,
        meta: DatasetMeta,
    ) -> Self {
        Self {
            images,
            labels,
            classes,
            meta,
        }
    }
}
