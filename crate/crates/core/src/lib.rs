//! Continuous valence/arousal regression from visual, audio and linguistic
//! streams fused by cross-modal co-attention.

pub mod data;
pub mod folds;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
