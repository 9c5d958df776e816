//! Dense linear solves: pivoted LU plus a differentiable `solve` op.
//!
//! The systems here are small (kernel matrices of a few hundred rows at most),
//! so a straightforward partial-pivot LU is plenty. The `solve` op's VJP is
//! expressed with further `solve`/`matmul` ops, which keeps it double
//! differentiable for the kernel-ridge objectives.

use super::{Elem, Var, Vjp};
use crate::error::{Error, Result};
use ndarray::{Array2, ArrayD, Ix2};

/// Solve `a x = b` by LU with partial pivoting. `a` is `n x n`, `b` is `n x m`.
pub fn lu_solve<E: Elem>(a: &Array2<E>, b: &Array2<E>) -> Result<Array2<E>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(Error::argument(format!(
            "solve: shape mismatch a={:?} b={:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    let m = b.ncols();
    for k in 0..n {
        // pivot
        let mut piv = k;
        let mut best = lu[[k, k]].abs();
        for r in k + 1..n {
            let v = lu[[r, k]].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best.as_f64() < 1e-300 || !best.is_finite() {
            return Err(Error::Solver(
                "singular system (zero pivot); a positive ridge term \u{3bb} would regularize it"
                    .to_string(),
            ));
        }
        if piv != k {
            for c in 0..n {
                lu.swap([k, c], [piv, c]);
            }
            for c in 0..m {
                x.swap([k, c], [piv, c]);
            }
        }
        let d = lu[[k, k]];
        for r in k + 1..n {
            let f = lu[[r, k]] / d;
            lu[[r, k]] = f;
            if f != E::zero() {
                for c in k + 1..n {
                    let v = lu[[k, c]] * f;
                    lu[[r, c]] -= v;
                }
                for c in 0..m {
                    let v = x[[k, c]] * f;
                    x[[r, c]] -= v;
                }
            }
        }
    }
    // back substitution
    for k in (0..n).rev() {
        let d = lu[[k, k]];
        for c in 0..m {
            x[[k, c]] /= d;
        }
        for r in 0..k {
            let f = lu[[r, k]];
            if f != E::zero() {
                for c in 0..m {
                    let v = x[[k, c]] * f;
                    x[[r, c]] -= v;
                }
            }
        }
    }
    Ok(x)
}

struct SolveVjp;
impl<E: Elem> Vjp<E> for SolveVjp {
    fn backward(&self, p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        let (a, b) = (&p[0], &p[1]);
        // x = a^{-1} b ; gb = a^{-T} g ; ga = -gb x^T
        let gb = a.permute(&[1, 0]).solve(grad).expect("solve vjp");
        let x = a.solve(b).expect("solve vjp");
        let ga = gb.matmul(&x.permute(&[1, 0])).neg();
        vec![Some(ga), Some(gb)]
    }
}

impl<E: Elem> Var<E> {
    /// Differentiable `a^{-1} self-as-b` — that is, `a.solve(b)` returns
    /// `x` with `a x = b`.
    pub fn solve(&self, b: &Var<E>) -> Result<Var<E>> {
        let a2 = self
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::argument("solve: lhs must be 2-d"))?
            .to_owned();
        let b2 = b
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| Error::argument("solve: rhs must be 2-d"))?
            .to_owned();
        let x = lu_solve(&a2, &b2)?;
        Ok(Var::from_op(
            x.into_dyn(),
            vec![self.clone(), b.clone()],
            Box::new(SolveVjp),
        ))
    }
}

/// Minimum-norm least-squares solve of `a w = b` (used by the proposition
/// verifier): `w = a^T (a a^T)^{-1} b` when rows <= cols (wide, interpolating)
/// and `w = (a^T a)^{-1} a^T b` when rows > cols (overdetermined).
pub fn lstsq<E: Elem>(a: &Array2<E>, b: &Array2<E>) -> Result<Array2<E>> {
    let (n, f) = (a.nrows(), a.ncols());
    if n <= f {
        let gram = a.dot(&a.t()); // n x n
        let alpha = lu_solve(&gram, b)?;
        Ok(a.t().dot(&alpha))
    } else {
        let gram = a.t().dot(a); // f x f
        let rhs = a.t().dot(b);
        lu_solve(&gram, &rhs)
    }
}

/// Largest singular value via power iteration on `a^T a`.
pub fn spectral_norm<E: Elem>(a: &Array2<E>, iters: usize) -> f64 {
    let g = a.t().dot(a);
    let n = g.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = ndarray::Array1::<E>::from_elem(n, E::from_f64(1.0 / (n as f64).sqrt()));
    let mut lambda = 0.0f64;
    for _ in 0..iters {
        let w = g.dot(&v);
        let norm = w.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.mapv(|x| x / E::from_f64(norm));
    }
    lambda.sqrt()
}

pub(crate) fn as2<E: Elem>(a: &ArrayD<E>) -> Array2<E> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use approx::assert_relative_eq;
    use ndarray::arr2;

    #[test]
    fn lu_solves_known_system() {
        let a = arr2(&[[2.0, 1.0], [1.0, 3.0]]);
        let b = arr2(&[[5.0], [10.0]]);
        let x = lu_solve(&a, &b).unwrap();
        assert_relative_eq!(x[[0, 0]], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[[1, 0]], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn singular_system_reports_solver_error() {
        let a = arr2(&[[1.0, 2.0], [2.0, 4.0]]);
        let b = arr2(&[[1.0], [2.0]]);
        let err = lu_solve(&a, &b).unwrap_err();
        assert!(err.to_string().contains("ridge"));
    }

    #[test]
    fn solve_op_gradient_matches_closed_form() {
        // L = sum(solve(A, b)) with A fixed spd; dL/db = A^{-T} 1.
        let a = Var::param(arr2(&[[3.0, 1.0], [1.0, 2.0]]).into_dyn());
        let b = Var::param(arr2(&[[1.0], [2.0]]).into_dyn());
        let x = a.solve(&b).unwrap();
        let g = backward(&x.sum_all(), &[&b, &a], false);
        let ainv_t_one = lu_solve(&arr2(&[[3.0, 1.0], [1.0, 2.0]]), &arr2(&[[1.0], [1.0]])).unwrap();
        assert_relative_eq!(g[0].value()[[0, 0]], ainv_t_one[[0, 0]], epsilon = 1e-12);
        assert_relative_eq!(g[0].value()[[1, 0]], ainv_t_one[[1, 0]], epsilon = 1e-12);
        // ga = -gb x^T
        let xval = lu_solve(&arr2(&[[3.0, 1.0], [1.0, 2.0]]), &arr2(&[[1.0], [2.0]])).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_relative_eq!(
                    g[1].value()[[i, j]],
                    -ainv_t_one[[i, 0]] * xval[[j, 0]],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn lstsq_overdetermined_recovers_planted() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((12, 4), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let b = a.dot(&w);
        let w2 = lstsq(&a, &b).unwrap();
        for (x, y) in w.iter().zip(w2.iter()) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }
}
