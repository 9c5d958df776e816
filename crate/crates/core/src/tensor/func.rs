//! Composite differentiable functions built from primitive ops.

use super::{Elem, Var};
use ndarray::Axis;

/// Row-wise log-softmax over the last axis of a 2-d tensor.
///
/// The row maximum is subtracted as a detached constant; the shift cancels
/// exactly in the log-sum-exp so gradients are unaffected.
pub fn log_softmax<E: Elem>(logits: &Var<E>) -> Var<E> {
    assert_eq!(logits.shape().len(), 2);
    let rows = logits.shape()[0];
    let maxes = logits
        .value()
        .map_axis(Axis(1), |row| row.iter().cloned().fold(E::neg_infinity(), E::max))
        .into_shape_with_order((rows, 1))
        .unwrap()
        .into_dyn();
    let shifted = logits.sub(&Var::constant(maxes));
    let lse = shifted.exp().sum_axes(&[1], true).ln();
    shifted.sub(&lse)
}

pub fn softmax<E: Elem>(logits: &Var<E>) -> Var<E> {
    log_softmax(logits).exp()
}

/// Mean over the batch of `-sum_c y_c * log p_c`. Targets may be soft.
pub fn cross_entropy<E: Elem>(logits: &Var<E>, targets: &Var<E>) -> Var<E> {
    let n = logits.shape()[0].max(1);
    log_softmax(logits)
        .mul(targets)
        .sum_all()
        .scalef(-1.0 / n as f64)
}

/// `0.5 *` mean over the batch of the squared row error.
pub fn mse_loss<E: Elem>(pred: &Var<E>, targets: &Var<E>) -> Var<E> {
    let n = pred.shape()[0].max(1);
    pred.sub(targets).sqr().sum_all().scalef(0.5 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use approx::assert_relative_eq;
    use ndarray::arr2;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Var::param(arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]).into_dyn());
        let p = softmax(&x);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| p.value()[[r, c]]).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y() {
        let x = Var::param(arr2(&[[0.2, -0.1, 0.7]]).into_dyn());
        let y = Var::constant(arr2(&[[0.0, 1.0, 0.0]]).into_dyn());
        let l = cross_entropy(&x, &y);
        let g = backward(&l, &[&x], false);
        let p = softmax(&x);
        for c in 0..3 {
            let expect = p.value()[[0, c]] - y.value()[[0, c]];
            assert_relative_eq!(g[0].value()[[0, c]], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn mse_matches_half_square() {
        let x = Var::param(arr2(&[[3.0]]).into_dyn());
        let y = Var::constant(arr2(&[[1.0]]).into_dyn());
        let l = mse_loss(&x, &y);
        assert_relative_eq!(l.item(), 2.0, epsilon = 1e-12);
        let g = backward(&l, &[&x], false);
        assert_relative_eq!(g[0].value()[[0, 0]], 2.0, epsilon = 1e-12);
    }
}
