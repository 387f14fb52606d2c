use rand::Rng;

use super::params::{glorot, Bound, ParamId, ParamStore};
use super::{Linear, ModelConfig, BASE_GROUP};
use crate::tensor::{mismatch, Tensor, TensorError, Var};

/// Small per-frame CNN: `len(visual_channels)` stages of
/// conv3×3 → relu → maxpool2, global average pooling, and a linear output
/// layer to `visual_dim`.
///
/// Stage `i` (1-based) lives in parameter group `backbone.stage{i}` so it can
/// be unfrozen on its own; the output layer is in the base group.
#[derive(Clone, Debug)]
pub struct VisualBackbone {
    stages: Vec<(ParamId, ParamId)>,
    out: Linear,
    crop: usize,
}

pub fn stage_group(stage: usize) -> String {
    format!("backbone.stage{stage}")
}

impl VisualBackbone {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &ModelConfig) -> Self {
        let mut c_in = 3;
        let mut stages = Vec::new();
        for (i, &c_out) in cfg.visual_channels.iter().enumerate() {
            let group = stage_group(i + 1);
            let w = store.add(
                format!("{group}.conv.weight"),
                &group,
                glorot(rng, &[c_out, c_in, 3, 3], c_in * 9, c_out * 9),
            );
            let b = store.add(format!("{group}.conv.bias"), &group, Tensor::zeros(&[c_out]));
            stages.push((w, b));
            c_in = c_out;
        }
        let out = Linear::new(store, rng, "backbone.out", BASE_GROUP, c_in, cfg.visual_dim);
        VisualBackbone {
            stages,
            out,
            crop: cfg.crop,
        }
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    /// `frames: [T × 3 × crop × crop] → [T × visual_dim]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, frames: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.crop || shape[3] != self.crop {
            return Err(mismatch(
                "visual_backbone",
                format!("expected [T, 3, {0}, {0}], got {shape:?}", self.crop),
            ));
        }
        let mut x = frames;
        // Pooling first is exact: a per-channel bias and relu both commute
        // with a max, and the pooled tensor is a quarter of the size.
        for &(w, b) in &self.stages {
            x = x.conv2d(p[w])?.maxpool2()?.add_bias(p[b], 1)?.relu()?;
        }
        self.out.forward(p, x.global_avg_pool()?)
    }
}
