//! Op constructors and their vector-Jacobian products.
//!
//! Every VJP is written in terms of other ops, never raw array math on the
//! saved values, so `backward(create_graph = true)` produces gradients that
//! are themselves differentiable.

use super::{Elem, Var, Vjp};
use ndarray::{ArrayD, Axis, Ix2, IxDyn, Zip};

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = da.max(db);
    }
    out
}

impl<E: Elem> Var<E> {
    /// Sum a gradient back down to `target` shape after broadcasting.
    pub(crate) fn reduce_to(&self, target: &[usize]) -> Var<E> {
        if self.shape() == target {
            return self.clone();
        }
        let extra = self.shape().len() - target.len();
        let mut axes: Vec<usize> = (0..extra).collect();
        for (i, &t) in target.iter().enumerate() {
            if t == 1 && self.shape()[extra + i] != 1 {
                axes.push(extra + i);
            }
        }
        let summed = self.sum_axes(&axes, true);
        summed.reshape(target)
    }
}

// ---------------------------------------------------------------------------
// elementwise binary ops
// ---------------------------------------------------------------------------

macro_rules! binary_op {
    ($name:ident, $vjp:ident, $apply:expr, $grads:expr) => {
        struct $vjp;
        impl<E: Elem> Vjp<E> for $vjp {
            fn backward(&self, parents: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
                let (a, b) = (&parents[0], &parents[1]);
                #[allow(clippy::redundant_closure_call)]
                let (ga, gb): (Var<E>, Var<E>) = $grads(a, b, grad);
                vec![
                    Some(ga.reduce_to(a.shape())),
                    Some(gb.reduce_to(b.shape())),
                ]
            }
        }

        impl<E: Elem> Var<E> {
            pub fn $name(&self, other: &Var<E>) -> Var<E> {
                let shape = broadcast_shape(self.shape(), other.shape());
                let av = self.value().broadcast(IxDyn(&shape)).expect("broadcast");
                let bv = other.value().broadcast(IxDyn(&shape)).expect("broadcast");
                let mut out = ArrayD::<E>::zeros(IxDyn(&shape));
                #[allow(clippy::redundant_closure_call)]
                Zip::from(&mut out)
                    .and(&av)
                    .and(&bv)
                    .for_each(|o, &x, &y| *o = $apply(x, y));
                Var::from_op(out, vec![self.clone(), other.clone()], Box::new($vjp))
            }
        }
    };
}

binary_op!(add, AddVjp, |x: E, y: E| x + y, |_a, _b, g: &Var<E>| (
    g.clone(),
    g.clone()
));
binary_op!(sub, SubVjp, |x: E, y: E| x - y, |_a, _b, g: &Var<E>| (
    g.clone(),
    g.neg()
));
binary_op!(mul, MulVjp, |x: E, y: E| x * y, |a: &Var<E>,
                                             b: &Var<E>,
                                             g: &Var<E>| (
    g.mul(b),
    g.mul(a)
));
binary_op!(div, DivVjp, |x: E, y: E| x / y, |a: &Var<E>,
                                             b: &Var<E>,
                                             g: &Var<E>| (
    g.div(b),
    g.mul(a).div(&b.sqr()).neg()
));

// ---------------------------------------------------------------------------
// elementwise unary ops
// ---------------------------------------------------------------------------

struct NegVjp;
impl<E: Elem> Vjp<E> for NegVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.neg())]
    }
}

struct ScaleVjp<E>(E);
impl<E: Elem> Vjp<E> for ScaleVjp<E> {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.scale(self.0))]
    }
}

struct AddScalarVjp;
impl<E: Elem> Vjp<E> for AddScalarVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.clone())]
    }
}

struct ExpVjp;
impl<E: Elem> Vjp<E> for ExpVjp {
    fn backward(&self, p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.mul(&p[0].exp()))]
    }
}

struct LnVjp;
impl<E: Elem> Vjp<E> for LnVjp {
    fn backward(&self, p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.div(&p[0]))]
    }
}

struct PowfVjp(f64);
impl<E: Elem> Vjp<E> for PowfVjp {
    fn backward(&self, p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        let d = p[0].powf(self.0 - 1.0).scale(E::from_f64(self.0));
        vec![Some(grad.mul(&d))]
    }
}

struct SqrVjp;
impl<E: Elem> Vjp<E> for SqrVjp {
    fn backward(&self, p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.mul(&p[0]).scale(E::from_f64(2.0)))]
    }
}

struct ReluVjp;
impl<E: Elem> Vjp<E> for ReluVjp {
    fn backward(&self, p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        // Piecewise-constant mask; second derivative is zero a.e.
        let mask = p[0]
            .value()
            .mapv(|x| if x > E::zero() { E::one() } else { E::zero() });
        vec![Some(grad.mul(&Var::constant(mask)))]
    }
}

impl<E: Elem> Var<E> {
    pub fn neg(&self) -> Var<E> {
        let out = self.value().mapv(|x| -x);
        Var::from_op(out, vec![self.clone()], Box::new(NegVjp))
    }

    pub fn scale(&self, c: E) -> Var<E> {
        let out = self.value().mapv(|x| x * c);
        Var::from_op(out, vec![self.clone()], Box::new(ScaleVjp(c)))
    }

    pub fn scalef(&self, c: f64) -> Var<E> {
        self.scale(E::from_f64(c))
    }

    pub fn addf(&self, c: f64) -> Var<E> {
        let c = E::from_f64(c);
        let out = self.value().mapv(|x| x + c);
        Var::from_op(out, vec![self.clone()], Box::new(AddScalarVjp))
    }

    pub fn exp(&self) -> Var<E> {
        let out = self.value().mapv(|x| x.exp());
        Var::from_op(out, vec![self.clone()], Box::new(ExpVjp))
    }

    pub fn ln(&self) -> Var<E> {
        let out = self.value().mapv(|x| x.ln());
        Var::from_op(out, vec![self.clone()], Box::new(LnVjp))
    }

    pub fn powf(&self, p: f64) -> Var<E> {
        let pe = E::from_f64(p);
        let out = self.value().mapv(|x| x.powf(pe));
        Var::from_op(out, vec![self.clone()], Box::new(PowfVjp(p)))
    }

    pub fn sqr(&self) -> Var<E> {
        let out = self.value().mapv(|x| x * x);
        Var::from_op(out, vec![self.clone()], Box::new(SqrVjp))
    }

    pub fn sqrt(&self) -> Var<E> {
        self.powf(0.5)
    }

    pub fn relu(&self) -> Var<E> {
        let out = self
            .value()
            .mapv(|x| if x > E::zero() { x } else { E::zero() });
        Var::from_op(out, vec![self.clone()], Box::new(ReluVjp))
    }
}

// ---------------------------------------------------------------------------
// reductions and broadcast
// ---------------------------------------------------------------------------

struct SumAxesVjp {
    in_shape: Vec<usize>,
}
impl<E: Elem> Vjp<E> for SumAxesVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.broadcast_to(&self.in_shape))]
    }
}

struct BroadcastVjp {
    in_shape: Vec<usize>,
}
impl<E: Elem> Vjp<E> for BroadcastVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.reduce_to(&self.in_shape))]
    }
}

struct ReshapeVjp {
    in_shape: Vec<usize>,
}
impl<E: Elem> Vjp<E> for ReshapeVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.reshape(&self.in_shape))]
    }
}

struct PermuteVjp {
    axes: Vec<usize>,
}
impl<E: Elem> Vjp<E> for PermuteVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        let mut inv = vec![0usize; self.axes.len()];
        for (i, &a) in self.axes.iter().enumerate() {
            inv[a] = i;
        }
        vec![Some(grad.permute(&inv))]
    }
}

impl<E: Elem> Var<E> {
    /// Sum over `axes`, keeping them as size-1 dims when `keep` is set.
    pub fn sum_axes(&self, axes: &[usize], keep: bool) -> Var<E> {
        if axes.is_empty() {
            return self.clone();
        }
        let mut value = ArrayD::clone(self.value());
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &ax in sorted.iter().rev() {
            value = value.sum_axis(Axis(ax));
        }
        if keep {
            let mut shape = self.shape().to_vec();
            for &ax in &sorted {
                shape[ax] = 1;
            }
            value = value.into_shape_with_order(IxDyn(&shape)).unwrap();
        }
        let vjp = SumAxesVjp {
            in_shape: self.shape().to_vec(),
        };
        Var::from_op(value, vec![self.clone()], Box::new(vjp))
    }

    pub fn mean_axes(&self, axes: &[usize], keep: bool) -> Var<E> {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes, keep).scalef(1.0 / n as f64)
    }

    /// Sum of all elements; result is a 0-d tensor.
    pub fn sum_all(&self) -> Var<E> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean_all(&self) -> Var<E> {
        self.sum_all().scalef(1.0 / self.len() as f64)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<E> {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self
            .value()
            .broadcast(IxDyn(shape))
            .expect("broadcast_to: incompatible shape")
            .to_owned();
        let vjp = BroadcastVjp {
            in_shape: self.shape().to_vec(),
        };
        Var::from_op(value, vec![self.clone()], Box::new(vjp))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<E> {
        if self.shape() == shape {
            return self.clone();
        }
        let value = self
            .value()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let vjp = ReshapeVjp {
            in_shape: self.shape().to_vec(),
        };
        Var::from_op(value, vec![self.clone()], Box::new(vjp))
    }

    pub fn permute(&self, axes: &[usize]) -> Var<E> {
        let value = self
            .value()
            .view()
            .permuted_axes(axes)
            .as_standard_layout()
            .to_owned();
        let vjp = PermuteVjp {
            axes: axes.to_vec(),
        };
        Var::from_op(value, vec![self.clone()], Box::new(vjp))
    }
}

// ---------------------------------------------------------------------------
// matmul (2-D)
// ---------------------------------------------------------------------------

struct MatmulVjp;
impl<E: Elem> Vjp<E> for MatmulVjp {
    fn backward(&self, p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        let (a, b) = (&p[0], &p[1]);
        let ga = grad.matmul(&b.permute(&[1, 0]));
        let gb = a.permute(&[1, 0]).matmul(grad);
        vec![Some(ga), Some(gb)]
    }
}

impl<E: Elem> Var<E> {
    /// `[m, k] x [k, n] -> [m, n]`. Output is always standard (C) layout.
    pub fn matmul(&self, other: &Var<E>) -> Var<E> {
        let a = self
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let b = other
            .value()
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        assert_eq!(a.ncols(), b.nrows(), "matmul inner dimension mismatch");
        let mut out = ndarray::Array2::<E>::zeros((a.nrows(), b.ncols()));
        ndarray::linalg::general_mat_mul(E::one(), &a, &b, E::zero(), &mut out);
        Var::from_op(
            out.into_dyn(),
            vec![self.clone(), other.clone()],
            Box::new(MatmulVjp),
        )
    }
}

// ---------------------------------------------------------------------------
// indexing, slicing, concatenation
// ---------------------------------------------------------------------------

struct IndexSelectVjp {
    axis: usize,
    indices: Vec<usize>,
    in_len: usize,
}
impl<E: Elem> Vjp<E> for IndexSelectVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.scatter_add(self.axis, &self.indices, self.in_len))]
    }
}

struct ScatterAddVjp {
    axis: usize,
    indices: Vec<usize>,
}
impl<E: Elem> Vjp<E> for ScatterAddVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.index_select(self.axis, &self.indices))]
    }
}

struct NarrowVjp {
    axis: usize,
    start: usize,
    in_len: usize,
}
impl<E: Elem> Vjp<E> for NarrowVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.pad_axis(self.axis, self.start, self.in_len))]
    }
}

struct PadAxisVjp {
    axis: usize,
    start: usize,
    len: usize,
}
impl<E: Elem> Vjp<E> for PadAxisVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.narrow(self.axis, self.start, self.len))]
    }
}

struct ConcatVjp {
    axis: usize,
    lens: Vec<usize>,
}
impl<E: Elem> Vjp<E> for ConcatVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        let mut out = Vec::with_capacity(self.lens.len());
        let mut start = 0;
        for &len in &self.lens {
            out.push(Some(grad.narrow(self.axis, start, len)));
            start += len;
        }
        out
    }
}

impl<E: Elem> Var<E> {
    /// Gather `indices` along `axis` (rows may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Var<E> {
        let value = self.value().select(Axis(axis), indices);
        let vjp = IndexSelectVjp {
            axis,
            indices: indices.to_vec(),
            in_len: self.shape()[axis],
        };
        Var::from_op(value, vec![self.clone()], Box::new(vjp))
    }

    /// Adjoint of `index_select`: scatter-add slices into a zero tensor whose
    /// `axis` has length `out_len`.
    pub fn scatter_add(&self, axis: usize, indices: &[usize], out_len: usize) -> Var<E> {
        assert_eq!(self.shape()[axis], indices.len());
        let mut shape = self.shape().to_vec();
        shape[axis] = out_len;
        let mut value = ArrayD::<E>::zeros(IxDyn(&shape));
        for (i, &dst_idx) in indices.iter().enumerate() {
            let src = self.value().index_axis(Axis(axis), i);
            let mut dst = value.index_axis_mut(Axis(axis), dst_idx);
            dst += &src;
        }
        let vjp = ScatterAddVjp {
            axis,
            indices: indices.to_vec(),
        };
        Var::from_op(value, vec![self.clone()], Box::new(vjp))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<E> {
        let value = self
            .value()
            .slice_axis(
                Axis(axis),
                ndarray::Slice::from(start as isize..(start + len) as isize),
            )
            .to_owned();
        let vjp = NarrowVjp {
            axis,
            start,
            in_len: self.shape()[axis],
        };
        Var::from_op(value, vec![self.clone()], Box::new(vjp))
    }

    /// Zero-pad along `axis` so the input occupies `[start, start+len)` of an
    /// axis of length `out_len`.
    pub fn pad_axis(&self, axis: usize, start: usize, out_len: usize) -> Var<E> {
        let len = self.shape()[axis];
        assert!(start + len <= out_len);
        let mut shape = self.shape().to_vec();
        shape[axis] = out_len;
        let mut value = ArrayD::<E>::zeros(IxDyn(&shape));
        value
            .slice_axis_mut(
                Axis(axis),
                ndarray::Slice::from(start as isize..(start + len) as isize),
            )
            .assign(self.value());
        let vjp = PadAxisVjp { axis, start, len };
        Var::from_op(value, vec![self.clone()], Box::new(vjp))
    }

    pub fn concat(parts: &[Var<E>], axis: usize) -> Var<E> {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let vjp = ConcatVjp {
            axis,
            lens: parts.iter().map(|p| p.shape()[axis]).collect(),
        };
        Var::from_op(value, parts.to_vec(), Box::new(vjp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use ndarray::{arr1, arr2};

    fn p1(data: &[f64]) -> Var<f64> {
        Var::param(arr1(data).into_dyn())
    }

    #[test]
    fn broadcast_binary_reduces_grad() {
        let a = Var::param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = p1(&[10.0, 20.0]);
        let y = a.mul(&b).sum_all();
        let g = backward(&y, &[&a, &b], false);
        assert_eq!(
            g[0].value().clone().into_raw_vec_and_offset().0,
            vec![10.0, 20.0, 10.0, 20.0]
        );
        assert_eq!(
            g[1].value().clone().into_raw_vec_and_offset().0,
            vec![1.0 + 3.0, 2.0 + 4.0]
        );
    }

    #[test]
    fn matmul_grads() {
        let a = Var::param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Var::param(arr2(&[[5.0], [6.0]]).into_dyn());
        let y = a.matmul(&b).sum_all();
        let g = backward(&y, &[&a, &b], false);
        assert_eq!(
            g[0].value().clone().into_raw_vec_and_offset().0,
            vec![5.0, 6.0, 5.0, 6.0]
        );
        assert_eq!(
            g[1].value().clone().into_raw_vec_and_offset().0,
            vec![4.0, 6.0]
        );
    }

    #[test]
    fn select_scatter_roundtrip() {
        let a = p1(&[1.0, 2.0, 3.0, 4.0]);
        let s = a.index_select(0, &[3, 0, 0]);
        assert_eq!(
            s.value().clone().into_raw_vec_and_offset().0,
            vec![4.0, 1.0, 1.0]
        );
        let y = s.sqr().sum_all();
        let g = backward(&y, &[&a], false);
        // d/da of (a3^2 + 2*a0^2)
        assert_eq!(
            g[0].value().clone().into_raw_vec_and_offset().0,
            vec![4.0, 0.0, 0.0, 8.0]
        );
    }

    #[test]
    fn narrow_pad_roundtrip() {
        let a = p1(&[1.0, 2.0, 3.0, 4.0]);
        let s = a.narrow(0, 1, 2);
        let y = s.sum_all();
        let g = backward(&y, &[&a], false);
        assert_eq!(
            g[0].value().clone().into_raw_vec_and_offset().0,
            vec![0.0, 1.0, 1.0, 0.0]
        );
    }

    #[test]
    fn concat_splits_grad() {
        let a = p1(&[1.0, 2.0]);
        let b = p1(&[3.0]);
        let y = Var::concat(&[a.clone(), b.clone()], 0).sqr().sum_all();
        let g = backward(&y, &[&a, &b], false);
        assert_eq!(
            g[0].value().clone().into_raw_vec_and_offset().0,
            vec![2.0, 4.0]
        );
        assert_eq!(g[1].value().clone().into_raw_vec_and_offset().0, vec![6.0]);
    }

    #[test]
    fn empty_batch_ops() {
        let a = Var::<f64>::param(ArrayD::zeros(IxDyn(&[0, 3])));
        let y = a.sqr().sum_all();
        assert_eq!(y.item(), 0.0);
    }
}
