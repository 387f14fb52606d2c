use std::path::Path;

use super::trainer::window_inputs;
use super::TrainError;
use crate::data::{make_windows, Augment, NormStats, Trial, WindowConfig, WindowMode};
use crate::fusion::{ccc_center, clip, ewe_merge, Merged, Predictions};
use crate::metrics::{evaluate, CccReport};
use crate::model::{Checkpoint, Model, ModelConfig};

/// A trained fold: weights plus the statistics its inputs were normalised
/// with.
#[derive(Clone, Debug)]
pub struct FoldModel {
    pub model: Model,
    pub stats: Option<NormStats>,
}

impl FoldModel {
    pub fn from_checkpoint(ckpt: &Checkpoint, config: ModelConfig) -> Result<Self, TrainError> {
        let mut model = Model::new(config)?;
        model.load_checkpoint(ckpt)?;
        Ok(FoldModel {
            model,
            stats: NormStats::from_checkpoint(ckpt),
        })
    }

    pub fn load(path: impl AsRef<Path>, config: ModelConfig) -> Result<Self, TrainError> {
        FoldModel::from_checkpoint(&Checkpoint::load(path)?, config)
    }

    pub fn predict(&self, trial: &Trial, wcfg: &WindowConfig) -> Result<Predictions, TrainError> {
        match &self.stats {
            Some(s) => predict_trial(&self.model, &trial.normalized(s)?, wcfg),
            None => predict_trial(&self.model, trial, wcfg),
        }
    }
}

/// Whole-trial prediction from centre-cropped evaluation windows. Frames
/// covered by several windows get the mean of their predictions.
pub fn predict_trial(model: &Model, trial: &Trial, wcfg: &WindowConfig) -> Result<Predictions, TrainError> {
    let n = trial.len();
    let mut sum_v = vec![0.0; n];
    let mut sum_a = vec![0.0; n];
    let mut count = vec![0u32; n];
    for w in make_windows(n, wcfg, WindowMode::Eval) {
        let (visual, audio, text, valid) = window_inputs(trial, w, Augment::Eval)?;
        let (v, a) = model.predict(&visual, &audio, &text)?;
        for i in 0..valid {
            sum_v[w.start + i] += v[i];
            sum_a[w.start + i] += a[i];
            count[w.start + i] += 1;
        }
    }
    let avg = |s: Vec<f64>| s.into_iter().zip(&count).map(|(x, &c)| x / c as f64).collect();
    Ok(Predictions {
        valence: avg(sum_v),
        arousal: avg(sum_a),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMethod {
    Ccc,
    Ewe,
}

impl MergeMethod {
    /// Merges rater sequences. A single rater passes through unchanged.
    pub fn merge(self, raters: &[Vec<f64>]) -> Result<Merged, TrainError> {
        if raters.len() == 1 {
            return Ok(Merged {
                values: raters[0].clone(),
                weights: vec![1.0],
            });
        }
        Ok(match self {
            MergeMethod::Ccc => ccc_center(raters)?,
            MergeMethod::Ewe => ewe_merge(raters)?,
        })
    }
}

/// Fused and clipped prediction of one trial.
#[derive(Clone, Debug)]
pub struct FusedTrial {
    pub trial_id: String,
    pub predictions: Predictions,
    pub valence_weights: Vec<f64>,
    pub arousal_weights: Vec<f64>,
    /// Present when the trial has labels.
    pub report: Option<CccReport>,
}

/// Runs every fold model on every trial, merges across folds and clips.
pub fn predict_and_fuse(
    models: &[FoldModel],
    trials: &[Trial],
    wcfg: &WindowConfig,
    method: MergeMethod,
) -> Result<Vec<FusedTrial>, TrainError> {
    if models.is_empty() {
        return Err(TrainError::Config("no models to fuse".into()));
    }
    trials
        .iter()
        .map(|t| {
            let preds = models.iter().map(|m| m.predict(t, wcfg)).collect::<Result<Vec<_>, _>>()?;
            let v = method.merge(&preds.iter().map(|p| p.valence.clone()).collect::<Vec<_>>())?;
            let a = method.merge(&preds.iter().map(|p| p.arousal.clone()).collect::<Vec<_>>())?;
            let predictions = Predictions {
                valence: clip(&v.values)?,
                arousal: clip(&a.values)?,
            };
            let report = match t.label_columns() {
                Some((gv, ga)) => Some(evaluate(&predictions.valence, &predictions.arousal, &gv, &ga)?),
                None => None,
            };
            Ok(FusedTrial {
                trial_id: t.trial_id.clone(),
                predictions,
                valence_weights: v.weights,
                arousal_weights: a.weights,
                report,
            })
        })
        .collect()
}
