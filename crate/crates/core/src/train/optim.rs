use crate::model::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay: `p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter `(m, v, steps)`; created on first update.
    state: Vec<Option<(Vec<f64>, Vec<f64>, i32)>>,
}

impl AdamW {
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: vec![None; num_params],
        }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        for (id, g) in grads {
            let slot = id.index();
            let param = store.get_mut(*id);
            let n = param.value.numel();
            let (m, v, t) = self.state[slot].get_or_insert_with(|| (vec![0.0; n], vec![0.0; n], 0));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t);
            let bc2 = 1.0 - self.beta2.powi(*t);
            let decay = 1.0 - lr * self.weight_decay;
            let mut data = param.value.data().to_vec();
            for (((p, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let step = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *p = *p * decay - lr * step;
            }
            param.value = Tensor::new(param.value.shape().to_vec(), data).expect("finite update");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", "base", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut opt = AdamW::new(1, 0.0);
        opt.step(&mut store, &[(id, Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())], 0.1);
        let v = store.get(id).value.data();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("w", "base", Tensor::new(vec![1], vec![2.0]).unwrap());
        let mut opt = AdamW::new(1, 0.5);
        opt.step(&mut store, &[(id, Tensor::zeros(&[1]))], 0.1);
        assert!((store.get(id).value.data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }
}
