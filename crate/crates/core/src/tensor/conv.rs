//! Convolution building blocks: im2col / col2im and 2x2 average pooling.
//!
//! A convolution is expressed as `im2col -> matmul -> reshape/permute`, so its
//! backward (and backward-of-backward) falls out of the op pairs here: the VJP
//! of `im2col` is `col2im` and vice versa, and `avg_pool2` pairs with
//! `avg_unpool2`.

use super::{Elem, Var, Vjp};
use ndarray::{ArrayD, IxDyn};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub chans: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }
}

fn im2col_kernel<E: Elem>(x: &ArrayD<E>, g: ConvGeom) -> ArrayD<E> {
    let (oh, ow) = g.out_hw();
    let ckk = g.chans * g.kernel * g.kernel;
    let mut out = ArrayD::<E>::zeros(IxDyn(&[g.batch * oh * ow, ckk]));
    let xs = x.as_slice().expect("im2col: input must be contiguous");
    let os = out.as_slice_mut().unwrap();
    let plane = g.height * g.width;
    for b in 0..g.batch {
        let xb = &xs[b * g.chans * plane..(b + 1) * g.chans * plane];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * ckk;
                for c in 0..g.chans {
                    let xc = &xb[c * plane..(c + 1) * plane];
                    let col0 = row + c * g.kernel * g.kernel;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            os[col0 + ky * g.kernel + kx] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im_kernel<E: Elem>(cols: &ArrayD<E>, g: ConvGeom) -> ArrayD<E> {
    let (oh, ow) = g.out_hw();
    let ckk = g.chans * g.kernel * g.kernel;
    let mut out = ArrayD::<E>::zeros(IxDyn(&[g.batch, g.chans, g.height, g.width]));
    let cs = cols.as_slice().expect("col2im: input must be contiguous");
    let os = out.as_slice_mut().unwrap();
    let plane = g.height * g.width;
    for b in 0..g.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * ckk;
                for c in 0..g.chans {
                    let base = b * g.chans * plane + c * plane;
                    let col0 = row + c * g.kernel * g.kernel;
                    for ky in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            os[base + iy as usize * g.width + ix as usize] +=
                                cs[col0 + ky * g.kernel + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

struct Im2colVjp {
    geom: ConvGeom,
}
impl<E: Elem> Vjp<E> for Im2colVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.col2im(self.geom))]
    }
}

struct Col2imVjp {
    geom: ConvGeom,
}
impl<E: Elem> Vjp<E> for Col2imVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.im2col(self.geom))]
    }
}

struct AvgPoolVjp {
    in_hw: (usize, usize),
}
impl<E: Elem> Vjp<E> for AvgPoolVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.avg_unpool2(self.in_hw))]
    }
}

struct AvgUnpoolVjp;
impl<E: Elem> Vjp<E> for AvgUnpoolVjp {
    fn backward(&self, _p: &[Var<E>], grad: &Var<E>) -> Vec<Option<Var<E>>> {
        vec![Some(grad.avg_pool2())]
    }
}

impl<E: Elem> Var<E> {
    pub(crate) fn im2col(&self, geom: ConvGeom) -> Var<E> {
        debug_assert_eq!(
            self.shape(),
            &[geom.batch, geom.chans, geom.height, geom.width]
        );
        let value = im2col_kernel(self.value(), geom);
        Var::from_op(value, vec![self.clone()], Box::new(Im2colVjp { geom }))
    }

    pub(crate) fn col2im(&self, geom: ConvGeom) -> Var<E> {
        let value = col2im_kernel(self.value(), geom);
        Var::from_op(value, vec![self.clone()], Box::new(Col2imVjp { geom }))
    }

    /// `[B, C, H, W]` convolution with weight `[OC, C*k*k]` and bias `[OC]`.
    pub fn conv2d(&self, weight: &Var<E>, bias: Option<&Var<E>>, kernel: usize, pad: usize) -> Var<E> {
        let s = self.shape();
        assert_eq!(s.len(), 4, "conv2d expects NCHW input");
        let geom = ConvGeom {
            batch: s[0],
            chans: s[1],
            height: s[2],
            width: s[3],
            kernel,
            pad,
            stride: 1,
        };
        let (oh, ow) = geom.out_hw();
        let oc = weight.shape()[0];
        let cols = self.im2col(geom); // [B*OH*OW, C*k*k]
        let mut y = cols.matmul(&weight.permute(&[1, 0])); // [B*OH*OW, OC]
        if let Some(b) = bias {
            y = y.add(&b.reshape(&[1, oc]));
        }
        y.reshape(&[s[0], oh, ow, oc]).permute(&[0, 3, 1, 2])
    }

    /// 2x2 average pooling with stride 2 (trailing row/column dropped when odd).
    pub fn avg_pool2(&self) -> Var<E> {
        let s = self.shape();
        assert_eq!(s.len(), 4);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = ArrayD::<E>::zeros(IxDyn(&[b, c, oh, ow]));
        let xs = self.value().as_slice().expect("avg_pool2: contiguous");
        let os = out.as_slice_mut().unwrap();
        let quarter = E::from_f64(0.25);
        for bc in 0..b * c {
            let xp = &xs[bc * h * w..(bc + 1) * h * w];
            let op = &mut os[bc * oh * ow..(bc + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = 2 * oy * w + 2 * ox;
                    op[oy * ow + ox] =
                        (xp[i] + xp[i + 1] + xp[i + w] + xp[i + w + 1]) * quarter;
                }
            }
        }
        Var::from_op(
            out,
            vec![self.clone()],
            Box::new(AvgPoolVjp { in_hw: (h, w) }),
        )
    }

    pub(crate) fn avg_unpool2(&self, in_hw: (usize, usize)) -> Var<E> {
        let s = self.shape();
        let (b, c, oh, ow) = (s[0], s[1], s[2], s[3]);
        let (h, w) = in_hw;
        let mut out = ArrayD::<E>::zeros(IxDyn(&[b, c, h, w]));
        let gs = self.value().as_slice().expect("avg_unpool2: contiguous");
        let os = out.as_slice_mut().unwrap();
        let quarter = E::from_f64(0.25);
        for bc in 0..b * c {
            let gp = &gs[bc * oh * ow..(bc + 1) * oh * ow];
            let op = &mut os[bc * h * w..(bc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let v = gp[oy * ow + ox] * quarter;
                    let i = 2 * oy * w + 2 * ox;
                    op[i] = v;
                    op[i + 1] = v;
                    op[i + w] = v;
                    op[i + w + 1] = v;
                }
            }
        }
        Var::from_op(out, vec![self.clone()], Box::new(AvgUnpoolVjp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;
    use ndarray::Array4;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 "identity" via 3x3 kernel with center weight 1.
        let x = Var::param(
            Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64).into_dyn(),
        );
        let mut w = ndarray::Array2::<f64>::zeros((1, 9));
        w[[0, 4]] = 1.0;
        let w = Var::param(w.into_dyn());
        let y = x.conv2d(&w, None, 3, 1);
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert_eq!(y.value().as_slice().unwrap(), x.value().as_slice().unwrap());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let geom = ConvGeom {
            batch: 2,
            chans: 3,
            height: 5,
            width: 4,
            kernel: 3,
            pad: 1,
            stride: 1,
        };
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 5, 4]), |_| rng.random_range(-1.0..1.0));
        let (oh, ow) = geom.out_hw();
        let y = ArrayD::from_shape_fn(IxDyn(&[2 * oh * ow, 27]), |_| rng.random_range(-1.0..1.0));
        let xv = Var::constant(x.clone());
        let yv = Var::constant(y.clone());
        let lhs: f64 = (&*xv.im2col(geom).value() * &y).sum();
        let rhs: f64 = (&*yv.col2im(geom).value() * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn avg_pool_drops_odd_edge() {
        let x = Var::param(Array4::from_elem((1, 1, 5, 5), 1.0f64).into_dyn());
        let y = x.avg_pool2();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        let g = backward(&y.sum_all(), &[&x], false);
        // Cells outside the pooled 4x4 region get zero gradient.
        let gv = g[0].value();
        assert_eq!(gv[[0, 0, 0, 0]], 0.25);
        assert_eq!(gv[[0, 0, 4, 4]], 0.0);
        assert_eq!(gv[[0, 0, 0, 4]], 0.0);
    }
}
