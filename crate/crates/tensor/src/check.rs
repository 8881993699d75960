//! Finite-difference gradient checking.

use crate::{Gradients, ParamStore, Scalar};

/// Central finite differences of `loss` w.r.t. every scalar parameter,
/// evaluated in f64.
pub fn finite_differences(
    store: &ParamStore<f64>,
    step: f64,
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> Vec<Vec<f64>> {
    let mut work = store.clone();
    let mut out = Vec::new();
    for id in store.ids() {
        let n = store.get(id).numel();
        let mut g = vec![0.0; n];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let up = loss(&work);
            work.get_mut(id).data_mut()[j] = orig - step;
            let down = loss(&work);
            work.get_mut(id).data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        out.push(g);
    }
    out
}

/// Relative error with an absolute floor on the denominator, so entries
/// whose true gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Largest relative error across all parameters.
pub fn max_relative_error<S: Scalar>(
    store: &ParamStore<f64>,
    grads: &Gradients<S>,
    numeric: &[Vec<f64>],
    floor: f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (id, num) in store.ids().zip(numeric) {
        for (j, n) in num.iter().enumerate() {
            let a = grads.param(id).map_or(0.0, |g| g.data()[j].as_f64());
            worst = worst.max(relative_error(a, *n, floor));
        }
    }
    worst
}
