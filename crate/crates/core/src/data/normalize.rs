use super::{DataError, Matrix};
use crate::model::checkpoint::AUX_PREFIX;
use crate::model::Checkpoint;
use crate::tensor::Tensor;

/// Standard deviations below this mark a constant dimension.
const MIN_STD: f64 = 1e-12;

/// Maps an intensity in `[0, 1]` to `[-1, 1]` by `(x - 0.5) / 0.5`.
pub fn normalize_visual(x: f64) -> f64 {
    (x - 0.5) / 0.5
}

pub fn normalize_visual_pixel(p: u8) -> f64 {
    normalize_visual(p as f64 / 255.0)
}

/// Per-column z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    /// Population statistics over every row of every matrix.
    pub fn fit<'a>(mats: impl IntoIterator<Item = &'a Matrix>) -> Result<Self, DataError> {
        let mats: Vec<&Matrix> = mats.into_iter().collect();
        let cols = mats.first().map(|m| m.cols).ok_or(DataError::EmptyFeature)?;
        if mats.iter().any(|m| m.cols != cols) {
            return Err(DataError::ShapeMismatch("feature widths differ across trials".into()));
        }
        let rows: usize = mats.iter().map(|m| m.rows).sum();
        if rows == 0 {
            return Err(DataError::EmptyFeature);
        }
        let mut mean = vec![0.0; cols];
        for m in &mats {
            for r in m.data.chunks(cols) {
                for (s, v) in mean.iter_mut().zip(r) {
                    *s += v;
                }
            }
        }
        mean.iter_mut().for_each(|s| *s /= rows as f64);
        let mut var = vec![0.0; cols];
        for m in &mats {
            for r in m.data.chunks(cols) {
                for ((s, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                    *s += (v - mu) * (v - mu);
                }
            }
        }
        let std = var.iter().map(|s| (s / rows as f64).sqrt()).collect();
        Ok(FeatureStats { mean, std })
    }

    /// Columns whose values were constant; [`FeatureStats::apply`] only
    /// centres these.
    pub fn zero_variance(&self) -> Vec<bool> {
        self.std.iter().map(|&s| s < MIN_STD).collect()
    }

    pub fn apply(&self, m: &Matrix) -> Result<Matrix, DataError> {
        if m.cols != self.mean.len() {
            return Err(DataError::ShapeMismatch(format!(
                "{} columns, statistics for {}",
                m.cols,
                self.mean.len()
            )));
        }
        let mut out = m.clone();
        for r in out.data.chunks_mut(m.cols) {
            for ((v, mu), sd) in r.iter_mut().zip(&self.mean).zip(&self.std) {
                *v -= mu;
                if *sd >= MIN_STD {
                    *v /= sd;
                }
            }
        }
        Ok(out)
    }
}

/// Audio and text statistics computed on training trials only.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub audio: FeatureStats,
    pub text: FeatureStats,
}

impl NormStats {
    const NAMES: [&'static str; 4] = ["audio_mean", "audio_std", "text_mean", "text_std"];

    /// Checkpoint records carrying these statistics.
    pub fn to_records(&self) -> Vec<(String, Tensor)> {
        [&self.audio.mean, &self.audio.std, &self.text.mean, &self.text.std]
            .into_iter()
            .zip(Self::NAMES)
            .map(|(v, name)| {
                let t = Tensor::new(vec![v.len()], v.clone()).expect("finite statistics");
                (format!("{AUX_PREFIX}norm.{name}"), t)
            })
            .collect()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Option<Self> {
        let get = |name: &str| ckpt.get(&format!("{AUX_PREFIX}norm.{name}")).map(|t| t.data().to_vec());
        let [am, asd, tm, tsd] = Self::NAMES.map(get);
        Some(NormStats {
            audio: FeatureStats { mean: am?, std: asd? },
            text: FeatureStats { mean: tm?, std: tsd? },
        })
    }
}
