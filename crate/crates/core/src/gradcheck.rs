//! Central-difference gradient oracle.
//!
//! Used by the test suites to verify every analytic gradient against an
//! independent numerical estimate. The function under test is re-evaluated
//! from plain arrays, so the oracle shares no code with the backward pass it
//! checks.

use crate::tensor::Elem;
use ndarray::ArrayD;

/// Relative error between analytic and numeric derivative with an absolute
/// floor for near-zero entries.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Central differences of `f` with respect to entry `idx` of `x`.
pub fn central_diff<E: Elem>(
    x: &ArrayD<E>,
    idx: usize,
    h: f64,
    mut f: impl FnMut(&ArrayD<E>) -> f64,
) -> f64 {
    let mut xp = x.clone();
    let mut xm = x.clone();
    {
        let sp = xp.as_slice_mut().unwrap();
        sp[idx] = sp[idx] + E::from_f64(h);
    }
    {
        let sm = xm.as_slice_mut().unwrap();
        sm[idx] = sm[idx] - E::from_f64(h);
    }
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Compare an analytic gradient against central differences on up to
/// `max_probes` entries (evenly strided through the tensor). Returns the
/// maximum relative error observed.
pub fn check_grad<E: Elem>(
    x: &ArrayD<E>,
    analytic: &ArrayD<E>,
    h: f64,
    max_probes: usize,
    mut f: impl FnMut(&ArrayD<E>) -> f64,
) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient shape mismatch");
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let probes = max_probes.min(n).max(1);
    let stride = (n / probes).max(1);
    let ga = analytic.as_standard_layout();
    let gs = ga.as_slice().unwrap();
    let mut worst = 0.0f64;
    let mut i = 0;
    while i < n {
        let numeric = central_diff(x, i, h, &mut f);
        let err = rel_err(gs[i].as_f64(), numeric, 1e-6);
        if err > worst {
            worst = err;
        }
        i += stride;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn quadratic_gradient_checks_out() {
        let x = arr1(&[0.3f64, -0.7, 1.1]).into_dyn();
        let grad = x.mapv(|v| 2.0 * v);
        let worst = check_grad(&x, &grad, 1e-5, 16, |a| a.iter().map(|v| v * v).sum());
        assert!(worst < 1e-8, "worst {worst}");
    }
}
