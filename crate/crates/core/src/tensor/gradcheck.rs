//! Central-finite-difference verification of recorded adjoints.

use super::{no_grad, Elem, Tensor};
use crate::Result;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum per-element relative error between analytic and numeric
    /// gradients.
    pub max_rel_err: f64,
    pub pass: bool,
    /// Elements exceeding tolerance: (flat index, analytic, numeric).
    pub failures: Vec<(usize, f64, f64)>,
}

/// Compares the analytic gradient of a scalar-valued `f` at `x` against
/// central differences with the given step. Non-finite values anywhere are
/// reported as failure rather than propagated.
pub fn grad_check<T: Elem>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    x: &Tensor<T>,
    step: f64,
    tol: f64,
) -> GradCheckReport {
    let failed = |idx: usize| GradCheckReport {
        max_rel_err: f64::INFINITY,
        pass: false,
        failures: vec![(idx, f64::NAN, f64::NAN)],
    };

    let leaf = x.detach();
    leaf.set_requires_grad(true);
    let analytic: Vec<f64> = {
        let y = match f(&leaf) {
            Ok(y) => y,
            Err(_) => return failed(usize::MAX),
        };
        if y.backward().is_err() {
            return failed(usize::MAX);
        }
        match leaf.grad() {
            Some(g) => g.iter().map(|v| v.as_f64()).collect(),
            None => return failed(usize::MAX),
        }
    };

    let base = x.to_vec();
    let shape = x.shape();
    let mut max_rel_err = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..base.len() {
        let eval = |delta: f64| -> Option<f64> {
            let mut d = base.clone();
            d[i] = T::of_f64(d[i].as_f64() + delta);
            let probe = Tensor::raw(shape.clone(), d);
            no_grad(|| f(&probe)).ok().and_then(|y| y.item().ok()).map(|v| v.as_f64())
        };
        let (Some(fp), Some(fm)) = (eval(step), eval(-step)) else {
            return failed(i);
        };
        let numeric = (fp - fm) / (2.0 * step);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return failed(i);
        }
        // the floor keeps central-difference roundoff (~1e-11 absolute in
        // f64) from registering as relative error on near-zero gradients
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel_err {
            max_rel_err = rel;
        }
        if rel > tol {
            failures.push((i, a, numeric));
        }
    }
    GradCheckReport {
        max_rel_err,
        pass: failures.is_empty(),
        failures,
    }
}
