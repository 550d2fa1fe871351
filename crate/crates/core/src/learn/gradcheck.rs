//! Central finite-difference gradient checks.

use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Worst disagreement found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error `|a - n| / max(|n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-6)
}

/// Compares `gradient` at `point` with central differences of `f`.
pub fn grad_check(f: impl Fn(&[f64]) -> f64, gradient: &[f64], point: &[f64], eps: f64) -> GradCheck {
    assert_eq!(gradient.len(), point.len(), "gradient and point differ in length");
    let mut x = point.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x);
        x[i] = orig - eps;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(gradient[i], numeric);
        if err > worst.max_rel_error || i == 0 {
            worst = GradCheck {
                max_rel_error: err,
                worst_index: i,
                analytic: gradient[i],
                numeric,
            };
        }
    }
    worst
}

/// Flattens a parameter set in iteration order.
pub fn flatten(params: &ParamSet<f64>) -> Vec<f64> {
    params.iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
}

/// Inverse of [`flatten`] against a layout template.
pub fn unflatten(template: &ParamSet<f64>, flat: &[f64]) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    let mut at = 0;
    for (k, t) in template.iter() {
        let n = t.len();
        out.insert(
            k.clone(),
            Tensor::from_vec(t.shape(), flat[at..at + n].to_vec()).expect("template shape"),
        );
        at += n;
    }
    assert_eq!(at, flat.len(), "flat length does not match template");
    out
}
