use rand::Rng;

use super::params::{Bound, ParamId, ParamStore};
use super::{Linear, BASE_GROUP};
use crate::tensor::{mismatch, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

/// Per-frame valence and arousal, each `[T]`.
#[derive(Clone, Debug)]
pub struct ModelOutput<'t> {
    pub valence: Var<'t>,
    pub arousal: Var<'t>,
}

impl ModelOutput<'_> {
    pub fn len(&self) -> usize {
        self.valence.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vecs(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.valence.value().data().to_vec(),
            self.arousal.value().data().to_vec(),
        )
    }
}

/// Layer-normalises the attention feature, folds its three modality blocks
/// back onto the frame axis, appends the visual temporal encoding and applies
/// the output layer.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    outputs: Vec<Linear>,
}

impl FusionHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        key_dim: usize,
        visual_dim: usize,
        separate: bool,
    ) -> Self {
        let norm_gamma = store.add("head.norm.gamma", BASE_GROUP, Tensor::filled(&[key_dim], 1.0));
        let norm_beta = store.add("head.norm.beta", BASE_GROUP, Tensor::zeros(&[key_dim]));
        let d_in = 3 * key_dim + visual_dim;
        let outputs = if separate {
            vec![
                Linear::new(store, rng, "head.valence", BASE_GROUP, d_in, 1),
                Linear::new(store, rng, "head.arousal", BASE_GROUP, d_in, 1),
            ]
        } else {
            vec![Linear::new(store, rng, "head.out", BASE_GROUP, d_in, 2)]
        };
        FusionHead {
            norm_gamma,
            norm_beta,
            outputs,
        }
    }

    pub fn output_layers(&self) -> &[Linear] {
        &self.outputs
    }

    /// `att: [3T × d_K]`, `visual_enc: [T × d]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        att: Var<'t>,
        visual_enc: Var<'t>,
    ) -> Result<ModelOutput<'t>, TensorError> {
        let t = visual_enc.shape()[0];
        let rows = att.shape()[0];
        if rows != 3 * t {
            return Err(mismatch(
                "fusion_head",
                format!("attention rows {rows} != 3 x {t} frames"),
            ));
        }
        let normed = att.layer_norm(p[self.norm_gamma], p[self.norm_beta], LN_EPS)?;
        let blocks = [
            normed.narrow(0, 0, t)?,
            normed.narrow(0, t, t)?,
            normed.narrow(0, 2 * t, t)?,
            visual_enc,
        ];
        let fused = Var::concat(&blocks, 1)?;
        let (valence, arousal) = match self.outputs.as_slice() {
            [joint] => {
                let y = joint.forward(p, fused)?;
                (y.narrow(1, 0, 1)?, y.narrow(1, 1, 1)?)
            }
            [v, a] => (v.forward(p, fused)?, a.forward(p, fused)?),
            _ => unreachable!("one joint or two separate output layers"),
        };
        Ok(ModelOutput {
            valence: valence.reshape(&[t])?,
            arousal: arousal.reshape(&[t])?,
        })
    }
}
