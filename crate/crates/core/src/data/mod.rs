//! Trial ingestion and synchronisation.
//!
//! A trial is one annotation file plus its face frames, an audio feature
//! matrix and a word-span transcript. Rows whose label holds the `-5`
//! sentinel are dropped; every modality is first brought to the original
//! frame count and then gathered through the kept-row map, so all streams end
//! up with one row per label.

mod align;
mod annotations;
mod augment;
mod features;
mod manifest;
mod normalize;
mod trial;
mod window;

pub use align::{assemble_visual, fit_length, gather_rows, populate_word_features, read_word_spans, WordSpan};
pub use annotations::{parse_annotations, Annotations, SENTINEL};
pub use augment::{augment_visual, Augment, Frames, CROP, FRAME_SIZE};
pub use features::{read_feature_file, write_feature_file, FEATURE_MAGIC};
pub use manifest::{read_manifest, write_manifest, ManifestRow, Partition};
pub use normalize::{normalize_visual, normalize_visual_pixel, FeatureStats, NormStats};
pub use trial::{load_trial, load_trials, Trial};
pub use window::{make_windows, Window, WindowConfig, WindowMode};

use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{0}: bad magic, not an AFF1 file")]
    BadMagic(PathBuf),
    #[error("{0}: truncated feature file")]
    TruncatedFile(PathBuf),
    #[error("{0}: matrix dimensions overflow")]
    DimOverflow(PathBuf),
    #[error("malformed row {line}: {detail}")]
    MalformedRow { line: usize, detail: String },
    #[error("every annotation row is excluded")]
    EmptyTrial,
    #[error("feature matrix has no rows")]
    EmptyFeature,
    #[error("word spans overlap: [{0}, {1}) and [{2}, {3})")]
    OverlappingSpans(f64, f64, f64, f64),
    #[error("invalid word span: {0}")]
    InvalidSpan(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("image {path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> DataError {
        let path = path.into();
        move |source| DataError::Io { path, source }
    }
}

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DataError> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(DataError::ShapeMismatch(format!(
                "{rows}x{cols} matrix from {} values",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}
