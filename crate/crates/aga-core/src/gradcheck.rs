//! Central finite-difference verification of analytic gradients.

use alloc::format;
use alloc::vec::Vec;

use crate::error::Error;
use crate::Result;

/// Numeric gradient of a scalar function by central differences.
///
/// `f` must be a deterministic function of `params`; it is called `2n` times
/// on perturbed copies. A non-finite function value is rejected.
pub fn central_diff_gradient<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work)?;
        work[i] = orig - h;
        let fm = f(&work)?;
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite difference evaluation at parameter {i}"),
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Relative error between an analytic and a numeric gradient entry:
/// `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-12);
    (analytic - numeric).abs() / denom
}

/// Maximum relative error between `analytic` and the central-difference
/// gradient of `f` at `params`.
pub fn max_rel_error<F>(f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(Error::DimMismatch {
            what: "analytic gradient length",
            expected: params.len(),
            actual: analytic.len(),
        });
    }
    let numeric = central_diff_gradient(f, params, h)?;
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(&numeric) {
        worst = worst.max(rel_error(a, n));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn square_at_three() {
        let f = |p: &[f64]| Ok(p[0] * p[0]);
        let err = max_rel_error(f, &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let f = |p: &[f64]| Ok(p[0] * p[0]);
        // Sign error in the claimed analytic gradient.
        let err = max_rel_error(f, &[3.0], &[-6.0], 1e-5).unwrap();
        assert!(err > 1.0, "err {err}");
    }

    #[test]
    fn rejects_non_finite_function() {
        let f = |p: &[f64]| Ok(1.0 / (p[0] - p[0]));
        let r = central_diff_gradient(f, &[1.0], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn multivariate_quadratic() {
        // f = x^2 + 2xy + y^2, grad = (2x+2y, 2x+2y)
        let f = |p: &[f64]| Ok(p[0] * p[0] + 2.0 * p[0] * p[1] + p[1] * p[1]);
        let err = max_rel_error(f, &[1.0, 2.0], &[6.0, 6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn softmax_cross_entropy_through_tape() {
        use crate::Tape;
        // -log softmax(x)[0] on a 1x3 row.
        let point = vec![0.4, -0.3, 0.9];
        let build = |p: &[f64]| -> crate::Result<(Tape, crate::Tensor, crate::Tensor)> {
            let mut t = Tape::new();
            let x = t.leaf(&[1, 3], p.to_vec(), true)?;
            let sm = t.row_softmax(x, None)?;
            let picked = t.mul_mask(sm, &[1.0, 0.0, 0.0])?;
            let s = t.sum_all(picked);
            let l = t.log(s);
            let loss = t.scale(l, -1.0);
            Ok((t, x, loss))
        };
        let eval = |p: &[f64]| build(p).map(|(t, _, loss)| t.scalar_value(loss));
        let (mut t, x, loss) = build(&point).unwrap();
        t.backward(loss).unwrap();
        let analytic = t.grad_or_zeros(x);
        let err = max_rel_error(eval, &point, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "err {err}");
    }
}
