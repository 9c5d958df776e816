//! Fixed sparse linear maps over the trailing two (spatial) dimensions.
//!
//! A [`PlaneMap`] sends an `H x W` plane to an `OH x OW` plane, each output
//! pixel being a fixed weighted sum of up to `FANIN` input pixels (entries with
//! index `-1` contribute zero). The same map is applied to every leading
//! `batch x channel` slice. Flips, integer translations, bilinear affine
//! resampling (rotate/scale), and bilinear upsampling are all instances; since
//! the map is constant, the op is linear in the input and its VJP is the
//! transposed scatter, which pairs back with the gather for double
//! differentiation.

use super::{Elem, Var, Vjp};
use ndarray::{ArrayD, IxDyn};
use std::rc::Rc;
use std::sync::Arc;

pub const FANIN: usize = 4;

/// Sparse plane-to-plane linear map with fan-in up to [`FANIN`].
#[derive(Debug)]
pub struct PlaneMap {
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    /// `out_len * FANIN` source pixel indices, -1 for "zero".
    pub idx: Vec<i64>,
    /// `out_len * FANIN` weights (as f64; cast at apply time).
    pub w: Vec<f64>,
}

impl PlaneMap {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize)) -> Self {
        let n = out_hw.0 * out_hw.1;
        PlaneMap {
            in_hw,
            out_hw,
            idx: vec![-1; n * FANIN],
            w: vec![0.0; n * FANIN],
        }
    }

    pub fn set(&mut self, out_pix: usize, taps: &[(i64, f64)]) {
        debug_assert!(taps.len() <= FANIN);
        for (k, &(i, wt)) in taps.iter().enumerate() {
            self.idx[out_pix * FANIN + k] = i;
            self.w[out_pix * FANIN + k] = wt;
        }
    }

    /// Identity map (useful as a base and in tests).
    pub fn identity(hw: (usize, usize)) -> Self {
        let mut m = PlaneMap::new(hw, hw);
        for p in 0..hw.0 * hw.1 {
            m.set(p, &[(p as i64, 1.0)]);
        }
        m
    }
}

fn gather_kernel<E: Elem>(x: &ArrayD<E>, map: &PlaneMap) -> ArrayD<E> {
    let s = x.shape();
    let lead: usize = s[..s.len() - 2].iter().product();
    let in_len = map.in_hw.0 * map.in_hw.1;
    let out_len = map.out_hw.0 * map.out_hw.1;
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = map.out_hw.0;
    shape[n - 1] = map.out_hw.1;
    let mut out = ArrayD::<E>::zeros(IxDyn(&shape));
    let xs = x.as_slice().expect("plane gather: contiguous");
    let os = out.as_slice_mut().unwrap();
    for l in 0..lead {
        let xp = &xs[l * in_len..(l + 1) * in_len];
        let op = &mut os[l * out_len..(l + 1) * out_len];
        for (p, o) in op.iter_mut().enumerate() {
            let mut acc = E::zero();
            for k in 0..FANIN {
                let i = map.idx[p * FANIN + k];
                if i >= 0 {
                    acc += xp[i as usize] * E::from_f64(map.w[p * FANIN + k]);
                }
            }
            *o = acc;
        }
    }
    out
}

fn scatter_kernel<E: Elem>(g: &ArrayD<E>, map: &PlaneMap) -> ArrayD<E> {
    let s = g.shape();
    let lead: usize = s[..s.len() - 2].iter().product();
    let in_len = map.in_hw.0 * map.in_hw.1;
    let out_len = map.out_hw.0 * map.out_hw.1;
    let mut shape = s.to_vec();
    let n = shape.len();
    shape[n - 2] = map.in_hw.0;
    shape[n - 1] = map.in_hw.1;
    let mut out = ArrayD::<E>::zeros(IxDyn(&shape));
    let gs = g.as_slice().expect("plane scatter: contiguous");
    let os = out.as_slice_mut().unwrap();
    for l in 0..lead {
        let gp = &gs[l * out_len..(l + 1) * out_len];
        let op = &mut os[l * in_len..(l + 1) * in_len];
        for (p, gv) in gp.iter().enumerate() {
            for k in 0..FANIN {
                let i = map.idx[p * FANIN + k];
                if i >= 0 {
                    op[i as usize] += *gv * E::from_f64(map.w[p * FANIN + k]);
                }
            }
        }
    }
    out
}

struct GatherVjp {
    map: Arc<PlaneMap>,
}
impl<E: Elem> Vjp<E> for GatherVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.plane_scatter(Arc::clone(&self.map)))]
    }
}

struct ScatterVjp {
    map: Arc<PlaneMap>,
}
impl<E: Elem> Vjp<E> for ScatterVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.plane_gather(Arc::clone(&self.map)))]
    }
}

impl<E: Elem> Var<E> {
    /// Apply a fixed plane map to the trailing two dimensions.
    pub fn plane_gather(&self, map: Arc<PlaneMap>) -> Var<E> {
        let s = self.shape();
        assert!(s.len() >= 2);
        assert_eq!((s[s.len() - 2], s[s.len() - 1]), map.in_hw);
        let value = gather_kernel(self.value(), &map);
        Var::from_op(value, vec![self.clone()], Box::new(GatherVjp { map }))
    }

    /// Adjoint of [`Var::plane_gather`].
    pub fn plane_scatter(&self, map: Arc<PlaneMap>) -> Var<E> {
        let s = self.shape();
        assert!(s.len() >= 2);
        assert_eq!((s[s.len() - 2], s[s.len() - 1]), map.out_hw);
        let value = scatter_kernel(self.value(), &map);
        Var::from_op(value, vec![self.clone()], Box::new(ScatterVjp { map }))
    }
}

// Rc<PlaneMap> would keep maps thread-local; Arc lets callers build a map once
// and reuse it across rayon workers (the map itself is immutable).
const _: fn() = || {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<PlaneMap>();
};

/// Bilinear sampling table: each output pixel reads input at (sy, sx) in
/// continuous coordinates with zero padding outside.
pub fn bilinear_map(
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    sample_at: impl Fn(usize, usize) -> (f64, f64),
) -> PlaneMap {
    let mut map = PlaneMap::new(in_hw, out_hw);
    let (h, w) = in_hw;
    for oy in 0..out_hw.0 {
        for ox in 0..out_hw.1 {
            let (sy, sx) = sample_at(oy, ox);
            let y0 = sy.floor();
            let x0 = sx.floor();
            let dy = sy - y0;
            let dx = sx - x0;
            let mut taps: Vec<(i64, f64)> = Vec::with_capacity(4);
            for (yy, wy) in [(y0 as i64, 1.0 - dy), (y0 as i64 + 1, dy)] {
                for (xx, wx) in [(x0 as i64, 1.0 - dx), (x0 as i64 + 1, dx)] {
                    let wt = wy * wx;
                    if wt == 0.0 {
                        continue;
                    }
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        taps.push((yy * w as i64 + xx, wt));
                    }
                }
            }
            map.set(oy * out_hw.1 + ox, &taps);
        }
    }
    map
}

// Keep an Rc alias available for single-thread call sites that want it.
#[allow(dead_code)]
pub(crate) type PlaneMapRc = Rc<PlaneMap>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use ndarray::Array3;

    #[test]
    fn identity_map_is_identity() {
        let x = Var::param(
            Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a * 12 + b * 4 + c) as f64).into_dyn(),
        );
        let m = Arc::new(PlaneMap::identity((3, 4)));
        let y = x.plane_gather(m);
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn gather_scatter_adjoint() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let map = Arc::new(bilinear_map((5, 5), (3, 3), |oy, ox| {
            (oy as f64 * 1.3 - 0.2, ox as f64 * 1.7 + 0.1)
        }));
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 5, 5]), |_| rng.random_range(-1.0..1.0));
        let y = ArrayD::from_shape_fn(IxDyn(&[1, 3, 3]), |_| rng.random_range(-1.0..1.0));
        let lhs: f64 = (&*Var::constant(x.clone()).plane_gather(Arc::clone(&map)).value() * &y).sum();
        let rhs: f64 = (&*Var::constant(y).plane_scatter(map).value() * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn grad_flows_through_gather() {
        let x = Var::param(Array3::from_elem((1, 2, 2), 1.0f64).into_dyn());
        let m = Arc::new(bilinear_map((2, 2), (2, 2), |oy, ox| {
            (oy as f64, ox as f64 + 0.5)
        }));
        let y = x.plane_gather(m).sum_all();
        let g = backward(&y, &[&x], false);
        // Each output reads (ox+0.5): half weight on two horizontal neighbours,
        // clipped at the right edge.
        assert_eq!(g[0].value()[[0, 0, 0]], 0.5);
        assert_eq!(g[0].value()[[0, 0, 1]], 1.0);
    }
}
