use rand::Rng;

use super::params::{Bound, ParamStore};
use super::{Linear, BASE_GROUP};
use crate::tensor::{mismatch, Tensor, TensorError, Var};

/// Three independent affine maps from a branch encoding to its query, key
/// and value.
#[derive(Clone, Debug)]
pub struct QkvEncoder {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl QkvEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        key_dim: usize,
    ) -> Self {
        QkvEncoder {
            query: Linear::new(store, rng, &format!("{name}.query"), BASE_GROUP, d_in, key_dim),
            key: Linear::new(store, rng, &format!("{name}.key"), BASE_GROUP, d_in, key_dim),
            value: Linear::new(store, rng, &format!("{name}.value"), BASE_GROUP, d_in, key_dim),
        }
    }

    pub fn encode<'t>(
        &self,
        p: &Bound<'t>,
        enc: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>), TensorError> {
        Ok((
            self.query.forward(p, enc)?,
            self.key.forward(p, enc)?,
            self.value.forward(p, enc)?,
        ))
    }
}

/// Per-branch projections and their cross-modal stacks. The branch matrices
/// are stacked along the time axis, so `q`, `k` and `v` are `[3T × d_K]`.
#[derive(Clone, Debug)]
pub struct AttentionBundle<'t> {
    pub branches: [(Var<'t>, Var<'t>, Var<'t>); 3],
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    pub key_dim: usize,
}

impl<'t> AttentionBundle<'t> {
    pub fn new(
        branches: [(Var<'t>, Var<'t>, Var<'t>); 3],
        key_dim: usize,
    ) -> Result<Self, TensorError> {
        let rows = branches[0].0.shape()[0];
        for (q, k, v) in &branches {
            for m in [q, k, v] {
                if m.shape() != [rows, key_dim] {
                    return Err(mismatch(
                        "attention_bundle",
                        format!("branch matrix {:?}, expected [{rows}, {key_dim}]", m.shape()),
                    ));
                }
            }
        }
        let stack = |pick: fn(&(Var<'t>, Var<'t>, Var<'t>)) -> Var<'t>| {
            Var::concat(&branches.iter().map(pick).collect::<Vec<_>>(), 0)
        };
        Ok(AttentionBundle {
            q: stack(|b| b.0)?,
            k: stack(|b| b.1)?,
            v: stack(|b| b.2)?,
            branches,
            key_dim,
        })
    }
}

fn head_slices<'t>(x: Var<'t>, heads: usize) -> Result<Vec<Var<'t>>, TensorError> {
    let width = x.shape()[1];
    if heads == 0 || width % heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            detail: format!("{heads} heads do not divide width {width}"),
        });
    }
    let hw = width / heads;
    if heads == 1 {
        return Ok(vec![x]);
    }
    (0..heads).map(|h| x.narrow(1, h * hw, hw)).collect()
}

/// Row-stochastic attention weights `softmax(q·kᵀ/√d)` for a single head.
pub fn attention_weights<'t>(q: Var<'t>, k: Var<'t>) -> Result<Var<'t>, TensorError> {
    let d = q.shape()[1];
    if k.shape()[1] != d {
        return Err(mismatch("attention", format!("{:?} vs {:?}", q.shape(), k.shape())));
    }
    q.matmul(k.transpose()?)?
        .scale(1.0 / (d as f64).sqrt())?
        .softmax_rows()
}

fn multi_head<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
    plus_one: bool,
) -> Result<Var<'t>, TensorError> {
    let (qs, ks, vs) = (head_slices(q, heads)?, head_slices(k, heads)?, head_slices(v, heads)?);
    let mut outs = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let mut w = attention_weights(qh, kh)?;
        if plus_one {
            w = w.add_scalar(1.0)?;
        }
        outs.push(w.matmul(vh)?);
    }
    if outs.len() == 1 {
        Ok(outs.pop().expect("one head"))
    } else {
        Var::concat(&outs, 1)
    }
}

/// Cross-modal co-attention `(softmax(QKᵀ/√d_K) + 1)·V`. With several heads
/// the key width is split evenly and the head outputs are concatenated.
pub fn coattention<'t>(bundle: &AttentionBundle<'t>, heads: usize) -> Result<Var<'t>, TensorError> {
    multi_head(bundle.q, bundle.k, bundle.v, heads, true)
}

/// Plain scaled dot-product attention `softmax(QKᵀ/√d_K)·V`.
pub fn standard_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    heads: usize,
) -> Result<Var<'t>, TensorError> {
    multi_head(q, k, v, heads, false)
}

/// Every row holds the column sums of `v`.
pub fn colsum_broadcast(v: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = v
        .dims2()
        .ok_or_else(|| mismatch("colsum_broadcast", "rank-2 input required"))?;
    let mut sums = vec![0.0; n];
    for row in v.data().chunks(n) {
        for (s, x) in sums.iter_mut().zip(row) {
            *s += x;
        }
    }
    Tensor::new(vec![m, n], sums.repeat(m))
}
