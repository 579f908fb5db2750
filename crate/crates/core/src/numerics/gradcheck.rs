//! Central finite-difference checks of recorded gradients.

use super::tape::{Tape, Var};
use super::tensor::ParamStore;
use crate::error::Result;

/// Denominator floor for the relative error, so that coordinates whose true
/// gradient is ~0 are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks `grad` against central differences of `value` at `point`.
pub fn grad_check_fn<F, G>(value: F, grad: G, point: &[f64], step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let analytic = grad(point);
    let mut x = point.to_vec();
    let mut max_err = 0.0f64;
    let mut worst = None;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = value(&x);
        x[i] = orig - step;
        let minus = value(&x);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if err > max_err || err.is_nan() {
            max_err = err;
            worst = Some(("x".to_string(), i));
        }
    }
    GradCheckReport {
        max_rel_error: max_err,
        worst,
        checked: x.len(),
        tol,
        passed: max_err < tol,
    }
}

/// Checks every trainable coordinate of `params` for the scalar function
/// `f`, which records its computation on the tape it is handed.
pub fn grad_check<F>(params: &mut ParamStore, f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;
    drop(tape);

    let eval = |p: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        Ok(t.scalar(l))
    };

    let ids: Vec<_> = params.ids().collect();
    let mut max_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0;
    for id in ids {
        let Some(analytic) = params.get(id).grad().map(<[f64]>::to_vec) else {
            continue;
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(params)?;
            params.get_mut(id).data_mut()[i] = orig;
            let err = relative_error(a, (plus - minus) / (2.0 * step));
            checked += 1;
            if err > max_err || err.is_nan() {
                max_err = err;
                worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    params.zero_grads();
    Ok(GradCheckReport {
        max_rel_error: max_err,
        worst,
        checked,
        tol,
        passed: max_err < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let r = grad_check_fn(|x| x[0] * x[0], |x| vec![2.0 * x[0]], &[3.0], 1e-5, 1e-4);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn wrong_analytic_gradient_fails() {
        let r = grad_check_fn(|x| x[0] * x[0], |x| vec![x[0]], &[3.0], 1e-5, 1e-4);
        assert!(!r.passed);
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let mut p = ParamStore::new();
        p.add("w", Tensor::vector(vec![0.3, -0.7, 1.1]).requires_grad())
            .unwrap();
        let good = grad_check(
            &mut p,
            |t, s| {
                let w = t.param(s, s.id("w").unwrap());
                let y = t.sigmoid(w);
                Ok(t.sum(y))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(good.passed);
        let bad = grad_check(
            &mut p,
            |t, s| {
                let w = t.param(s, s.id("w").unwrap());
                let y = t.broken_sigmoid(w);
                Ok(t.sum(y))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!bad.passed, "{bad:?}");
        assert_eq!(bad.worst.unwrap().0, "w");
    }
}
