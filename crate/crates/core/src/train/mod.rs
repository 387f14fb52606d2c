//! Fold training and fused inference.

mod optim;
mod predict;
pub mod schedule;
mod trainer;

pub use optim::AdamW;
pub use predict::{predict_and_fuse, predict_trial, FoldModel, FusedTrial, MergeMethod};
pub use schedule::{
    lr_trace, scheduler_step, warmup_lr, ScheduleConfig, ScheduleEvent, SchedulerState, StopReason,
};
pub use trainer::{split_fold, train_fold, EpochLog, TrainOutcome, Trainer};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, WindowConfig};
use crate::folds::FoldError;
use crate::fusion::FusionError;
use crate::metrics::MetricError;
use crate::model::{backbone_groups, CheckpointError, ModelConfig, ModelError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("fold {0} has no {1} trials")]
    EmptyFold(usize, &'static str),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("trial {0} has no labels")]
    Unlabelled(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Training hyperparameters. Field names double as TOML keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub window_len: usize,
    pub hop: usize,
    /// Start of the shifted second pass of training windows.
    pub train_offset: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Parameter groups unfrozen in order, on top of the base group.
    pub unfreeze_stages: Vec<String>,
    pub seed: u64,
    /// Minimum gain in validation mean CCC that counts as improvement.
    pub improvement_threshold: f64,
    /// Score validation on all trials concatenated instead of averaging
    /// per-trial CCC.
    pub global_validation_ccc: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            window_len: 300,
            hop: 200,
            train_offset: 100,
            lr: 1e-5,
            min_lr: 1e-7,
            weight_decay: 0.001,
            plateau_patience: 5,
            plateau_factor: 0.1,
            warmup_epochs: 10,
            max_epochs: 100,
            early_stop_patience: 10,
            unfreeze_stages: vec!["backbone.stage3".into(), "backbone.stage2".into()],
            seed: 0,
            improvement_threshold: 1e-5,
            global_validation_ccc: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TrainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        TrainConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.min_lr > 0.0 && self.min_lr < self.lr && self.lr.is_finite()) {
            return bad(format!("need 0 < min_lr < lr, got {} and {}", self.min_lr, self.lr));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("window_len", self.window_len),
            ("hop", self.hop),
            ("plateau_patience", self.plateau_patience),
            ("warmup_epochs", self.warmup_epochs),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} must lie in (0, 1)", self.plateau_factor));
        }
        if !(self.weight_decay >= 0.0) || !(self.improvement_threshold >= 0.0) {
            return bad("weight_decay and improvement_threshold must be non-negative".into());
        }
        self.window().validate()?;
        self.model.validate()?;
        let groups = backbone_groups(&self.model);
        if let Some(s) = self.unfreeze_stages.iter().find(|s| !groups.contains(s)) {
            return bad(format!("unknown unfreeze stage {s:?}; backbone groups are {groups:?}"));
        }
        Ok(())
    }

    pub fn window(&self) -> WindowConfig {
        WindowConfig {
            window_len: self.window_len,
            hop: self.hop,
            train_offset: self.train_offset,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr: self.lr,
            min_lr: self.min_lr,
            plateau_patience: self.plateau_patience,
            plateau_factor: self.plateau_factor,
            warmup_epochs: self.warmup_epochs,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            unfreeze_stages: self.unfreeze_stages.clone(),
        }
    }
}

/// SplitMix64 finaliser, used to derive independent per-epoch and
/// per-window seeds from the run seed.
pub(crate) fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_toml_round_trip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.batch_size, cfg.window_len, cfg.hop), (2, 300, 200));
        assert_eq!((cfg.lr, cfg.min_lr, cfg.weight_decay), (1e-5, 1e-7, 0.001));
        assert_eq!((cfg.max_epochs, cfg.early_stop_patience), (100, 10));
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("lr = 0.001\nmin_lr = 0.00001\n[model]\nkey_dim = 16\n").unwrap();
        assert_eq!(partial.model.key_dim, 16);
        assert_eq!(partial.hop, 200);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(TrainConfig::from_toml("lr = 1e-7\nmin_lr = 1e-5\n").is_err());
        assert!(TrainConfig::from_toml("batch_size = 0\n").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 1\n").is_err());
        assert!(TrainConfig::from_toml("unfreeze_stages = [\"backbone.stage9\"]\n").is_err());
    }
}
