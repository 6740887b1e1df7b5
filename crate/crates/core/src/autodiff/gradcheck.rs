use crate::error::{Error, Result};

use super::tensor::{no_grad, Real, Tensor};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare reverse-mode gradients of a scalar function against central
/// finite differences, elementwise over `x`.
///
/// The relative error uses an absolute floor of 1e-6 in the denominator so
/// near-zero gradients do not blow the ratio up. `f` is re-evaluated
/// 2*numel times with recording disabled; run the check at `f64` to keep
/// the difference quotient out of the rounding noise.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidInput("grad_check: eps must be > 0".into()));
    }
    if !x.requires_grad() {
        return Err(Error::InvalidInput(
            "grad_check: x must require grad".into(),
        ));
    }
    let y = f(x)?;
    if y.numel() != 1 {
        return Err(Error::InvalidInput(format!(
            "grad_check: f must produce a scalar, got shape {:?}",
            y.shape()
        )));
    }
    x.zero_grad();
    y.backward()?;
    let analytic = x
        .grad()
        .ok_or_else(|| Error::InvalidInput("grad_check: f does not reach x".into()))?;

    let step = T::from_f64(eps);
    let mut max_rel = 0.0f64;
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.set_element(i, orig + step);
        let fp = no_grad(|| f(x)).and_then(|t| t.item())?.to_f64();
        x.set_element(i, orig - step);
        let fm = no_grad(|| f(x)).and_then(|t| t.item())?.to_f64();
        x.set_element(i, orig);

        let fd = (fp - fm) / (2.0 * eps);
        let ad = analytic[i].to_f64();
        let denom = ad.abs().max(fd.abs()).max(1e-6);
        let rel = (ad - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        pass: max_rel <= tol,
    })
}
