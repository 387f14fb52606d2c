//! The co-attention regression network.
//!
//! Three branches encode the visual, audio and linguistic streams over time.
//! Each branch output is projected to a query, key and value; the projections
//! are stacked along the time axis into cross-modal `Q`, `K`, `V` matrices and
//! combined with `(softmax(QKᵀ/√d_K) + 1)·V`. The normalised attention feature
//! is concatenated with the visual temporal encoding and a fully connected
//! layer regresses valence and arousal for every frame.

mod attention;
mod backbone;
pub mod checkpoint;
mod head;
mod params;
mod tcn;

pub use attention::{
    attention_weights, coattention, colsum_broadcast, standard_attention, AttentionBundle,
    QkvEncoder,
};
pub use backbone::{stage_group, VisualBackbone};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use head::{FusionHead, ModelOutput};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tcn::{BranchConfig, Tcn};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("modality lengths differ: visual {visual}, audio {audio}, text {text}")]
    LengthMismatch {
        visual: usize,
        audio: usize,
        text: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),
}

/// Group name of the parameters that are always trainable.
pub const BASE_GROUP: &str = "base";

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels of each conv stage of the visual backbone.
    pub visual_channels: Vec<usize>,
    /// Width of the per-frame spatial encoding.
    pub visual_dim: usize,
    /// Spatial size of the (cropped) input frames.
    pub crop: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub tcn_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub dropout: f64,
    pub key_dim: usize,
    pub heads: usize,
    /// One output layer per target instead of a joint two-unit layer.
    pub separate_heads: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            visual_channels: vec![4, 8, 16],
            visual_dim: 64,
            crop: 40,
            audio_dim: 128,
            text_dim: 768,
            tcn_channels: vec![64, 64],
            kernel_size: 3,
            dilations: vec![1, 2],
            dropout: 0.1,
            key_dim: 32,
            heads: 1,
            separate_heads: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn branch(&self, input_dim: usize) -> BranchConfig {
        BranchConfig {
            input_dim,
            tcn_channels: self.tcn_channels.clone(),
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
            dropout_rate: self.dropout,
            output_dim: self.tcn_channels.last().copied().unwrap_or(input_dim),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.visual_channels.is_empty() || self.visual_channels.contains(&0) {
            return bad("visual_channels must be non-empty and positive");
        }
        if self.crop >> self.visual_channels.len() == 0 {
            return bad("crop too small for the number of pooling stages");
        }
        if [self.visual_dim, self.audio_dim, self.text_dim, self.key_dim].contains(&0) {
            return bad("dimensions must be positive");
        }
        if self.heads == 0 || self.key_dim % self.heads != 0 {
            return bad("heads must divide key_dim");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        self.branch(self.visual_dim).validate()
    }
}

/// Parameter groups of the visual backbone stages, first stage first.
pub fn backbone_groups(cfg: &ModelConfig) -> Vec<String> {
    (1..=cfg.visual_channels.len()).map(stage_group).collect()
}

/// Forward-pass mode. Training mode owns the dropout RNG.
pub enum Mode {
    Eval,
    Train(ChaCha8Rng),
}

impl Mode {
    pub fn train(seed: u64) -> Self {
        Mode::Train(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub(crate) fn dropout<'t>(&mut self, x: Var<'t>, p: f64) -> Result<Var<'t>, TensorError> {
        match self {
            Mode::Train(rng) if p > 0.0 => {
                let shape = x.shape();
                let keep = 1.0 / (1.0 - p);
                let n = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                    .collect();
                x.mul(x.tape().constant(Tensor::new(shape, mask)?))
            }
            _ => Ok(x),
        }
    }
}

/// Affine layer `x · W + b` with `W: [d_in × d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        group: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            group,
            params::glorot(rng, &[d_in, d_out], d_in, d_out),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[d_out]));
        Linear { weight, bias }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, TensorError> {
        x.linear(p[self.weight], p[self.bias])
    }
}

/// The full network plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    pub backbone: VisualBackbone,
    pub visual_tcn: Tcn,
    pub audio_tcn: Tcn,
    pub text_tcn: Tcn,
    pub encoders: [QkvEncoder; 3],
    pub head: FusionHead,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let backbone = VisualBackbone::new(&mut store, &mut rng, &config);
        let visual_tcn = Tcn::new(&mut store, &mut rng, "visual_tcn", &config.branch(config.visual_dim))?;
        let audio_tcn = Tcn::new(&mut store, &mut rng, "audio_tcn", &config.branch(config.audio_dim))?;
        let text_tcn = Tcn::new(&mut store, &mut rng, "text_tcn", &config.branch(config.text_dim))?;
        let enc_width = visual_tcn.output_dim();
        let encoders = ["visual", "audio", "text"].map(|m| {
            QkvEncoder::new(&mut store, &mut rng, &format!("attn.{m}"), enc_width, config.key_dim)
        });
        let head = FusionHead::new(
            &mut store,
            &mut rng,
            config.key_dim,
            visual_tcn.output_dim(),
            config.separate_heads,
        );
        Ok(Model {
            config,
            store,
            backbone,
            visual_tcn,
            audio_tcn,
            text_tcn,
            encoders,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `visual: [T × 3 × crop × crop]`, `audio: [T × d_a]`, `text: [T × d_t]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        visual: Var<'t>,
        audio: Var<'t>,
        text: Var<'t>,
        mode: &mut Mode,
    ) -> Result<ModelOutput<'t>, ModelError> {
        let (tv, ta, tt) = (visual.shape()[0], audio.shape()[0], text.shape()[0]);
        if tv != ta || tv != tt {
            return Err(ModelError::LengthMismatch {
                visual: tv,
                audio: ta,
                text: tt,
            });
        }
        let spatial = self.backbone.forward(p, visual)?;
        let v_enc = self.visual_tcn.forward(p, spatial, mode)?;
        let a_enc = self.audio_tcn.forward(p, audio, mode)?;
        let t_enc = self.text_tcn.forward(p, text, mode)?;

        let qkv = [
            self.encoders[0].encode(p, v_enc)?,
            self.encoders[1].encode(p, a_enc)?,
            self.encoders[2].encode(p, t_enc)?,
        ];
        let bundle = AttentionBundle::new(qkv, self.config.key_dim)?;
        let att = coattention(&bundle, self.config.heads)?;
        Ok(self.head.forward(p, att, v_enc)?)
    }

    /// Eval-mode prediction without gradient tracking. Returns
    /// `(valence, arousal)`.
    pub fn predict(
        &self,
        visual: &Tensor,
        audio: &Tensor,
        text: &Tensor,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let tape = Tape::new();
        let p = self.store.bind(&tape, |_| false);
        let out = self.forward(
            &p,
            tape.constant(visual.clone()),
            tape.constant(audio.clone()),
            tape.constant(text.clone()),
            &mut Mode::Eval,
        )?;
        Ok(out.to_vecs())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self
                .store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Copies every parameter from `ckpt`. Records under [`checkpoint::AUX_PREFIX`]
    /// are ignored; any other missing, extra or reshaped record is an error.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), ModelError> {
        let records: Vec<&(String, Tensor)> = ckpt
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(checkpoint::AUX_PREFIX))
            .collect();
        if records.len() != self.store.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "{} parameter records, model has {}",
                records.len(),
                self.store.len()
            )));
        }
        for param in self.store.iter() {
            let (_, t) = records
                .iter()
                .find(|(n, _)| *n == param.name)
                .ok_or_else(|| ModelError::CheckpointMismatch(format!("missing {}", param.name)))?;
            if t.shape() != param.value.shape() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "{}: shape {:?}, expected {:?}",
                    param.name,
                    t.shape(),
                    param.value.shape()
                )));
            }
        }
        for param in self.store.iter_mut() {
            let (_, t) = records.iter().find(|(n, _)| *n == param.name).expect("checked");
            param.value = t.clone();
        }
        Ok(())
    }
}
