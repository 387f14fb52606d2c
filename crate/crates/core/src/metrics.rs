//! Concordance correlation coefficient as an evaluation metric and as a
//! differentiable training loss.
//!
//! All moments are population (1/N) moments.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, Var};

/// Denominators below this are treated as degenerate.
pub const DEGENERATE_DENOM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 points, got {0}")]
    TooShort(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A CCC value plus whether its denominator collapsed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ccc {
    pub value: f64,
    pub degenerate: bool,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort(x.len()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Lin's CCC with a degenerate flag; degenerate pairs score 0.
pub fn ccc_detailed(x: &[f64], y: &[f64]) -> Result<Ccc, MetricError> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    let (vx, vy, cov) = (vx / n, vy / n, cov / n);
    let gap = mx - my;
    let denom = vx + vy + gap * gap;
    if denom < DEGENERATE_DENOM {
        return Ok(Ccc {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Ccc {
        value: (2.0 * cov / denom).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

pub fn ccc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    ccc_detailed(x, y).map(|c| c.value)
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    let denom = (sxx * syy).sqrt();
    if denom < DEGENERATE_DENOM {
        return Ok(0.0);
    }
    Ok((sxy / denom).clamp(-1.0, 1.0))
}

/// `1 − ccc(pred, gold)` recorded on `pred`'s tape. A degenerate window
/// yields the constant 1 with no gradient.
pub fn ccc_loss<'t>(pred: Var<'t>, gold: &[f64]) -> Result<Var<'t>, MetricError> {
    let shape = pred.shape();
    let n: usize = shape.iter().product();
    if n != gold.len() {
        return Err(MetricError::LengthMismatch(n, gold.len()));
    }
    if n < 2 {
        return Err(MetricError::TooShort(n));
    }
    let tape = pred.tape();

    let gold_mean = mean(gold);
    let gold_var = gold.iter().map(|g| (g - gold_mean) * (g - gold_mean)).sum::<f64>() / n as f64;
    let gold_centered = Tensor::new(shape, gold.iter().map(|g| g - gold_mean).collect())?;

    let mx = pred.mean()?;
    let centered = pred.sub(mx)?;
    let cov = centered.mul(tape.constant(gold_centered))?.mean()?;
    let gap = mx.add_scalar(-gold_mean)?;
    let denom = pred.variance()?.add(gap.mul(gap)?)?.add_scalar(gold_var)?;
    if denom.item().unwrap_or(0.0) < DEGENERATE_DENOM {
        return Ok(tape.constant(Tensor::scalar(1.0)?));
    }
    let ccc = cov.scale(2.0)?.div(denom)?;
    Ok(ccc.scale(-1.0)?.add_scalar(1.0)?)
}

/// Per-target and mean CCC.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CccReport {
    pub ccc_valence: f64,
    pub ccc_arousal: f64,
    pub mean_ccc: f64,
}

impl CccReport {
    pub fn new(ccc_valence: f64, ccc_arousal: f64) -> Self {
        CccReport {
            ccc_valence,
            ccc_arousal,
            mean_ccc: (ccc_valence + ccc_arousal) / 2.0,
        }
    }
}

pub fn evaluate(
    pred_valence: &[f64],
    pred_arousal: &[f64],
    gold_valence: &[f64],
    gold_arousal: &[f64],
) -> Result<CccReport, MetricError> {
    Ok(CccReport::new(
        ccc(pred_valence, gold_valence)?,
        ccc(pred_arousal, gold_arousal)?,
    ))
}
