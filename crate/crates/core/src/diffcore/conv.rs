//! 2D convolution over `[H, W, C]` maps (im2col + gemm).

use super::graph::{Graph, Var};
use super::real::{matmul_into, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

struct Geom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn cols(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Input pixel feeding output `(oy, ox)` through kernel tap `(ky, kx)`.
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w).then_some((y as usize, x as usize))
    }
}

fn im2col<T: Real>(x: &[T], g: &Geom) -> Vec<T> {
    let mut cols = vec![T::zero(); g.ho * g.wo * g.cols()];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = (oy * g.wo + ox) * g.cols();
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                        let dst = row + (ky * g.kw + kx) * g.cin;
                        let src = (y * g.w + xx) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geom) -> Vec<T> {
    let mut x = vec![T::zero(); g.h * g.w * g.cin];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = (oy * g.wo + ox) * g.cols();
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                        let s = row + (ky * g.kw + kx) * g.cin;
                        let d = (y * g.w + xx) * g.cin;
                        for c in 0..g.cin {
                            x[d + c] += cols[s + c];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Real> Graph<T> {
    /// `x:[H, W, Cin]`, `w:[kh, kw, Cin, Cout]`, optional `b:[Cout]` -> `[Ho, Wo, Cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        if xv.ndim() != 3 || wv.ndim() != 4 || wv.shape()[2] != xv.shape()[2] || spec.stride == 0 {
            return Err(Error::shape("conv2d", format!("x {:?} w {:?}", xv.shape(), wv.shape())));
        }
        let (h, wd, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (kh, kw, cout) = (wv.shape()[0], wv.shape()[1], wv.shape()[3]);
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than input {h}x{wd}")));
        }
        let geom = Geom {
            h,
            w: wd,
            cin,
            kh,
            kw,
            cout,
            ho: (h + 2 * spec.padding - kh) / spec.stride + 1,
            wo: (wd + 2 * spec.padding - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        };
        let cols = im2col(xv.data(), &geom);
        let pix = geom.ho * geom.wo;
        let mut out = vec![T::zero(); pix * cout];
        matmul_into(pix, geom.cols(), cout, &cols, false, wv.data(), false, &mut out, false);
        let y = Tensor::new(&[geom.ho, geom.wo, cout], out)?;
        let y = self.push_op(
            y,
            &[x, w],
            Box::new(move |g, s| {
                if s.wants(w) {
                    let mut gw = vec![T::zero(); geom.cols() * geom.cout];
                    matmul_into(geom.cols(), pix, geom.cout, &cols, true, g.data(), false, &mut gw, false);
                    s.add(w, Tensor::new(wv.shape(), gw).unwrap());
                }
                if s.wants(x) {
                    let mut gc = vec![T::zero(); pix * geom.cols()];
                    matmul_into(pix, geom.cout, geom.cols(), g.data(), false, wv.data(), true, &mut gc, false);
                    s.add(x, Tensor::new(xv.shape(), col2im(&gc, &geom)).unwrap());
                }
            }),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }
}
