//! Merging several prediction sequences of the same frames.
//!
//! `ccc_center` moves every rater to the grand mean and weights it by its
//! CCC against the mean of the other raters. `ewe_merge` is the estimator
//! weighted evaluator: Pearson agreement with the plain mean, no centring.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{ccc_detailed, pearson, MetricError};

/// Floor applied to agreement weights before normalisation.
pub const WEIGHT_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("need at least 2 raters, got {0}")]
    TooFewRaters(usize),
    #[error("rater {index} has {len} values, expected {expected}")]
    LengthMismatch {
        index: usize,
        len: usize,
        expected: usize,
    },
    #[error("every rater is constant")]
    DegenerateRaters,
    #[error("non-finite value at position {0}")]
    NonFiniteInput(usize),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Merged sequence and the normalised rater weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Merged {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

fn check_raters(raters: &[Vec<f64>]) -> Result<usize, FusionError> {
    if raters.len() < 2 {
        return Err(FusionError::TooFewRaters(raters.len()));
    }
    let expected = raters[0].len();
    for (index, r) in raters.iter().enumerate() {
        if r.len() != expected {
            return Err(FusionError::LengthMismatch {
                index,
                len: r.len(),
                expected,
            });
        }
        if let Some(pos) = r.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::NonFiniteInput(pos));
        }
    }
    let constant = |r: &Vec<f64>| r.iter().all(|&v| v == r[0]);
    if raters.iter().all(constant) {
        return Err(FusionError::DegenerateRaters);
    }
    Ok(expected)
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn weighted_sum(raters: &[Vec<f64>], raw: &[f64]) -> Merged {
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mut values = vec![0.0; raters[0].len()];
    for (r, w) in raters.iter().zip(&weights) {
        for (o, v) in values.iter_mut().zip(r) {
            *o += w * v;
        }
    }
    Merged { values, weights }
}

pub fn ccc_center(raters: &[Vec<f64>]) -> Result<Merged, FusionError> {
    let n = check_raters(raters)?;
    let k = raters.len();
    let grand = raters.iter().map(|r| r.iter().sum::<f64>()).sum::<f64>() / (k * n) as f64;
    let centered: Vec<Vec<f64>> = raters
        .iter()
        .map(|r| {
            let shift = grand - mean(r);
            r.iter().map(|v| v + shift).collect()
        })
        .collect();
    let totals: Vec<f64> = (0..n).map(|i| centered.iter().map(|r| r[i]).sum()).collect();
    let mut raw = Vec::with_capacity(k);
    for r in &centered {
        let others: Vec<f64> = totals
            .iter()
            .zip(r)
            .map(|(t, v)| (t - v) / (k - 1) as f64)
            .collect();
        let c = ccc_detailed(r, &others)?;
        raw.push(c.value.max(WEIGHT_FLOOR));
    }
    Ok(weighted_sum(&centered, &raw))
}

pub fn ewe_merge(raters: &[Vec<f64>]) -> Result<Merged, FusionError> {
    let n = check_raters(raters)?;
    let k = raters.len() as f64;
    let avg: Vec<f64> = (0..n).map(|i| raters.iter().map(|r| r[i]).sum::<f64>() / k).collect();
    let raw = raters
        .iter()
        .map(|r| Ok(pearson(r, &avg)?.max(WEIGHT_FLOOR)))
        .collect::<Result<Vec<f64>, FusionError>>()?;
    Ok(weighted_sum(raters, &raw))
}

/// Clamps every value into `[-1, 1]`.
pub fn clip(seq: &[f64]) -> Result<Vec<f64>, FusionError> {
    seq.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_finite() {
                Ok(v.clamp(-1.0, 1.0))
            } else {
                Err(FusionError::NonFiniteInput(i))
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PredRow {
    frame: usize,
    valence: f64,
    arousal: f64,
}

/// Per-frame `(valence, arousal)` predictions of one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub valence: Vec<f64>,
    pub arousal: Vec<f64>,
}

impl Predictions {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FusionError> {
        let mut w = csv::Writer::from_path(path)?;
        for (frame, (&valence, &arousal)) in self.valence.iter().zip(&self.arousal).enumerate() {
            w.serialize(PredRow {
                frame,
                valence,
                arousal,
            })?;
        }
        w.flush().map_err(|e| FusionError::Csv(e.into()))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FusionError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FusionError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut out = Predictions {
            valence: Vec::new(),
            arousal: Vec::new(),
        };
        for (i, row) in reader.deserialize::<PredRow>().enumerate() {
            let row = row?;
            if row.frame != i {
                return Err(FusionError::Io {
                    path: path.display().to_string(),
                    detail: format!("row {i} has frame {}", row.frame),
                });
            }
            out.valence.push(row.valence);
            out.arousal.push(row.arousal);
        }
        Ok(out)
    }
}
