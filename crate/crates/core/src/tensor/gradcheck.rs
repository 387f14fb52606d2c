//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass on constant inputs,
//! so it stays independent of the backward rules it verifies.

use super::{Tape, Tensor, TensorError, Var};

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest element-wise `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

/// Denominator floor for the relative error, so gradients that are zero
/// analytically are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with step `h`.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, TensorError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .map(|v| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()))
            })
            .collect()
    };

    let eval = |probe: &[Tensor]| -> Result<f64, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.item();
        v.ok_or_else(|| TensorError::NonScalarLoss(out.shape()))
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            probe[ti] = with_value(input, j, orig + h)?;
            let plus = eval(&probe)?;
            probe[ti] = with_value(input, j, orig - h)?;
            let minus = eval(&probe)?;
            probe[ti] = input.clone();
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
        }
    }
    Ok(report)
}

fn with_value(t: &Tensor, index: usize, value: f64) -> Result<Tensor, TensorError> {
    let mut data = t.data().to_vec();
    data[index] = value;
    Tensor::new(t.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_analytic_gradients() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let ok = check(&[x.clone()], 1e-4, |_, v| v[0].mul(v[0])?.sum()).unwrap();
        assert!(ok.max_rel_error < 1e-8);
        let report = check(&[x], 1e-4, |tape, v| {
            let c = tape.constant(Tensor::filled(&[3], 2.0));
            v[0].mul(c)?.sum()
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }
}
