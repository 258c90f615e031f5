use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::Result;

/// Relative discrepancy used by the finite-difference checks.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare the reverse-mode gradient of a scalar function against central
/// differences at `x`, returning the maximum relative error over
/// coordinates. A NaN result means the adjoint is broken.
pub fn grad_check<F, Fun>(f: Fun, x: &Tensor<F>, eps: f64) -> Result<f64>
where
    F: Real,
    Fun: Fn(&mut Tape<F>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    let grads = tape.backward(root)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<F>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let r = f(&mut t, v)?;
        Ok(t.value(r).item().to_f64().unwrap_or(f64::NAN))
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + F::lit(eps);
        minus.data_mut()[i] = minus.data()[i] - F::lit(eps);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i].to_f64().unwrap_or(f64::NAN);
        let e = rel_error(a, numeric);
        if e.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(e);
    }
    Ok(worst)
}
