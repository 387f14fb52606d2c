use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{glorot, Bound, ParamId, ParamStore};
use super::{ModelError, Mode, BASE_GROUP};
use crate::tensor::{mismatch, Tensor, TensorError, Var};

/// Hyperparameters of one temporal branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub input_dim: usize,
    pub tcn_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub dropout_rate: f64,
    pub output_dim: usize,
}

impl BranchConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.tcn_channels.len() != self.dilations.len() {
            return err(format!(
                "{} channel widths but {} dilations",
                self.tcn_channels.len(),
                self.dilations.len()
            ));
        }
        if self.input_dim == 0
            || self.kernel_size == 0
            || self.tcn_channels.contains(&0)
            || self.dilations.contains(&0)
        {
            return err("TCN dimensions, kernel size and dilations must be positive".into());
        }
        let last = self.tcn_channels.last().copied().unwrap_or(self.input_dim);
        if self.output_dim != last {
            return err(format!("output_dim {} != last channel width {last}", self.output_dim));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct TcnLayer {
    conv_w: ParamId,
    conv_b: ParamId,
    /// 1×1 residual projection, present when the width changes.
    proj: Option<(ParamId, ParamId)>,
    dilation: usize,
}

/// Stack of residual blocks `relu(causal_conv(x)) → dropout → + residual(x)`
/// operating on `[T × d]` sequences.
#[derive(Clone, Debug)]
pub struct Tcn {
    layers: Vec<TcnLayer>,
    dropout: f64,
    input_dim: usize,
    output_dim: usize,
}

impl Tcn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &BranchConfig,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let mut c_in = cfg.input_dim;
        let mut layers = Vec::new();
        for (i, (&c_out, &dilation)) in cfg.tcn_channels.iter().zip(&cfg.dilations).enumerate() {
            let prefix = format!("{name}.layer{i}");
            let conv_w = store.add(
                format!("{prefix}.conv.weight"),
                BASE_GROUP,
                glorot(rng, &[c_out, c_in, k], c_in * k, c_out * k),
            );
            let conv_b = store.add(format!("{prefix}.conv.bias"), BASE_GROUP, Tensor::zeros(&[c_out]));
            let proj = (c_in != c_out).then(|| {
                let w = store.add(
                    format!("{prefix}.proj.weight"),
                    BASE_GROUP,
                    glorot(rng, &[c_out, c_in, 1], c_in, c_out),
                );
                let b = store.add(format!("{prefix}.proj.bias"), BASE_GROUP, Tensor::zeros(&[c_out]));
                (w, b)
            });
            layers.push(TcnLayer {
                conv_w,
                conv_b,
                proj,
                dilation,
            });
            c_in = c_out;
        }
        Ok(Tcn {
            layers,
            dropout: cfg.dropout_rate,
            input_dim: cfg.input_dim,
            output_dim: c_in,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Parameter ids of layer `i` as `(conv_weight, conv_bias, projection)`.
    pub fn layer_params(&self, i: usize) -> (ParamId, ParamId, Option<(ParamId, ParamId)>) {
        let l = &self.layers[i];
        (l.conv_w, l.conv_b, l.proj)
    }

    /// `seq: [T × input_dim] → [T × output_dim]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        seq: Var<'t>,
        mode: &mut Mode,
    ) -> Result<Var<'t>, TensorError> {
        let shape = seq.shape();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(mismatch(
                "tcn",
                format!("expected [T, {}], got {shape:?}", self.input_dim),
            ));
        }
        let mut x = seq.transpose()?;
        for layer in &self.layers {
            let h = x
                .conv1d_causal(p[layer.conv_w], layer.dilation)?
                .add_bias(p[layer.conv_b], 0)?
                .relu()?;
            let h = mode.dropout(h, self.dropout)?;
            let residual = match layer.proj {
                Some((w, b)) => x.conv1d_causal(p[w], 1)?.add_bias(p[b], 0)?,
                None => x,
            };
            x = h.add(residual)?;
        }
        x.transpose()
    }
}
