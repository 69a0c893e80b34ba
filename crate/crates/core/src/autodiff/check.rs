use super::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function against central
/// differences. Returns `max_i |analytic_i - numeric_i| / (|numeric_i| + 1e-8)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(invalid(format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x);
        let y = f(&tape, xv)?;
        tape.backward(y)?;
        xv.grad()
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; x.numel()])
    };
    let eval = |probe: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let xv = tape.constant(probe.clone());
        Ok(f(&tape, xv)?.item())
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / (numeric.abs() + 1e-8));
    }
    Ok(worst)
}
