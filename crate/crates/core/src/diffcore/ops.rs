//! Elementwise, reduction, normalization and dense-layer primitives.

use super::graph::{Graph, Var};
use super::real::{lit, matmul_into, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const RMSNORM_EPS: f64 = 1e-6;

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

#[inline]
fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |g, s| {
                s.add(a, g.clone());
                s.add(b, g.clone());
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = {
            let (x, y) = (self.value(a), self.value(b));
            let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p - q).collect();
            Tensor::new(x.shape(), data)?
        };
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |g, s| {
                s.add(a, g.clone());
                s.add(b, g.map(|x| -x));
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push_op(
            out,
            &[a, b],
            Box::new(move |g, s| {
                if s.wants(a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    s.add(a, Tensor::new(g.shape(), d).unwrap());
                }
                if s.wants(b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    s.add(b, Tensor::new(g.shape(), d).unwrap());
                }
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push_op(out, &[x], Box::new(move |g, s| s.add(x, g.map(|v| v * k))))
    }

    pub fn add_scalar(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v + k);
        self.push_op(out, &[x], Box::new(move |g, s| s.add(x, g.clone())))
    }

    /// Adds `b[C]` to every row of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(b) != [c] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(b))));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o += bb;
            }
        }
        Ok(self.push_op(
            out,
            &[x, b],
            Box::new(move |g, s| {
                s.add(x, g.clone());
                if s.wants(b) {
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    s.add(b, Tensor::new(&[c], gb).unwrap());
                }
            }),
        ))
    }

    /// Scales each row of `x[R, ...]` by `m[R]`.
    pub fn mul_rows(&mut self, x: Var, m: Var) -> Result<Var> {
        let xv = self.value_arc(x);
        let mv = self.value_arc(m);
        let r = xv.shape().first().copied().unwrap_or(0);
        if mv.numel() != r {
            return Err(Error::shape("mul_rows", format!("{:?} * {:?}", xv.shape(), mv.shape())));
        }
        let width = if r == 0 { 0 } else { xv.numel() / r };
        let mut out = (*xv).clone();
        for (row, &k) in out.data_mut().chunks_mut(width.max(1)).zip(mv.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        Ok(self.push_op(
            out,
            &[x, m],
            Box::new(move |g, s| {
                if s.wants(x) {
                    let mut gx = g.clone();
                    for (row, &k) in gx.data_mut().chunks_mut(width.max(1)).zip(mv.data()) {
                        row.iter_mut().for_each(|v| *v *= k);
                    }
                    s.add(x, gx);
                }
                if s.wants(m) {
                    let gm = g
                        .data()
                        .chunks(width.max(1))
                        .zip(xv.data().chunks(width.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&a, &b)| a * b).sum())
                        .collect();
                    s.add(m, Tensor::new(mv.shape(), gm).unwrap());
                }
            }),
        ))
    }

    /// `y = x W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value_arc(x);
        let wv = self.value_arc(w);
        let (cin, rows) = (xv.last_dim(), xv.rows());
        if wv.ndim() != 2 || wv.shape()[0] != cin {
            return Err(Error::shape("linear", format!("x {:?} @ W {:?}", xv.shape(), wv.shape())));
        }
        let cout = wv.shape()[1];
        let mut out_shape = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = cout;
        let mut out = vec![T::zero(); rows * cout];
        matmul_into(rows, cin, cout, xv.data(), false, wv.data(), false, &mut out, false);
        let y = self.push_op(
            Tensor::new(&out_shape, out)?,
            &[x, w],
            Box::new(move |g, s| {
                if s.wants(x) {
                    let mut gx = vec![T::zero(); rows * cin];
                    matmul_into(rows, cout, cin, g.data(), false, wv.data(), true, &mut gx, false);
                    s.add(x, Tensor::new(xv.shape(), gx).unwrap());
                }
                if s.wants(w) {
                    let mut gw = vec![T::zero(); cin * cout];
                    matmul_into(cin, rows, cout, xv.data(), true, g.data(), false, &mut gw, false);
                    s.add(w, Tensor::new(wv.shape(), gw).unwrap());
                }
            }),
        );
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid_scalar);
        let yc = y.clone();
        self.push_op(
            y,
            &[x],
            Box::new(move |g, s| {
                let d = g.data().iter().zip(yc.data()).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
                s.add(x, Tensor::new(g.shape(), d).unwrap());
            }),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value_arc(x);
        let y = xv.map(|v| v * sigmoid_scalar(v));
        self.push_op(
            y,
            &[x],
            Box::new(move |g, s| {
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| {
                        let sg = sigmoid_scalar(v);
                        gv * sg * (T::one() + v * (T::one() - sg))
                    })
                    .collect();
                s.add(x, Tensor::new(g.shape(), d).unwrap());
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut y = self.value(x).clone();
        {
            let d = y.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
                    let mut z = T::zero();
                    for k in 0..n {
                        let e = (d[idx(k)] - m).exp();
                        d[idx(k)] = e;
                        z += e;
                    }
                    for k in 0..n {
                        d[idx(k)] /= z;
                    }
                }
            }
        }
        let yc = y.clone();
        Ok(self.push_op(
            y,
            &[x],
            Box::new(move |g, s| {
                let mut gx = g.clone();
                let (gd, yd) = (g.data(), yc.data());
                let out = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
                        for k in 0..n {
                            out[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                s.add(x, gx);
            }),
        ))
    }

    /// `x / sqrt(mean(x^2) + eps) * g` over the last axis.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value_arc(x);
        let gv = self.value_arc(gain);
        let c = xv.last_dim();
        if gv.shape() != [c] {
            return Err(Error::shape("rmsnorm", format!("x {:?} gain {:?}", xv.shape(), gv.shape())));
        }
        let eps: T = lit(RMSNORM_EPS);
        let cf: T = lit(c as f64);
        let inv: Vec<T> = xv
            .data()
            .chunks(c)
            .map(|r| {
                let ms = r.iter().map(|&v| v * v).sum::<T>() / cf;
                T::one() / (ms + eps).sqrt()
            })
            .collect();
        let mut y = (*xv).clone();
        for (row, &ir) in y.data_mut().chunks_mut(c).zip(&inv) {
            for (v, &gg) in row.iter_mut().zip(gv.data()) {
                *v = *v * ir * gg;
            }
        }
        Ok(self.push_op(
            y,
            &[x, gain],
            Box::new(move |g, s| {
                let mut gg = vec![T::zero(); c];
                let mut gx = vec![T::zero(); xv.numel()];
                for (r, ((grow, xrow), &ir)) in g.data().chunks(c).zip(xv.data().chunks(c)).zip(&inv).enumerate() {
                    let mut dot = T::zero();
                    for j in 0..c {
                        let xh = xrow[j] * ir;
                        gg[j] += grow[j] * xh;
                        dot += grow[j] * gv.data()[j] * xh;
                    }
                    let mean_dot = dot / cf;
                    for j in 0..c {
                        let xh = xrow[j] * ir;
                        gx[r * c + j] = (grow[j] * gv.data()[j] - xh * mean_dot) * ir;
                    }
                }
                s.add(x, Tensor::new(xv.shape(), gx).unwrap());
                s.add(gain, Tensor::new(&[c], gg).unwrap());
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let old = self.shape(x).to_vec();
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(
            y,
            &[x],
            Box::new(move |g, s| {
                s.add(x, g.clone().reshape(&old).unwrap());
            }),
        ))
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let sh = self.shape(v);
            if &sh[..sh.len() - 1] != lead {
                return Err(Error::shape("concat_last", format!("{first:?} vs {sh:?}")));
            }
            widths.push(*sh.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let parts: Vec<Var> = xs.to_vec();
        Ok(self.push_op(
            Tensor::new(&shape, out)?,
            xs,
            Box::new(move |g, s| {
                let mut off = 0;
                for (&v, &w) in parts.iter().zip(&widths) {
                    if s.wants(v) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        let mut sh = g.shape().to_vec();
                        *sh.last_mut().unwrap() = w;
                        s.add(v, Tensor::new(&sh, d).unwrap());
                    }
                    off += w;
                }
            }),
        ))
    }

    /// Columns `[start, start+len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if start + len > c {
            return Err(Error::shape("slice_last", format!("[{start}, {}) of {shape:?}", start + len)));
        }
        let rows = self.value(x).rows();
        let mut out = Vec::with_capacity(rows * len);
        for row in self.value(x).data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = len;
        Ok(self.push_op(
            Tensor::new(&oshape, out)?,
            &[x],
            Box::new(move |g, s| {
                s.add_with(x, &shape, |d| {
                    for (r, grow) in g.data().chunks(len.max(1)).enumerate().take(rows) {
                        for (j, &v) in grow.iter().enumerate() {
                            d[r * c + start + j] += v;
                        }
                    }
                });
            }),
        ))
    }

    /// Concatenates along the first axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Invalid("concat of nothing".into()))?).to_vec();
        let mut counts = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &v in xs {
            let sh = self.shape(v);
            if sh[1..] != first[1..] {
                return Err(Error::shape("concat_rows", format!("{first:?} vs {sh:?}")));
            }
            counts.push(self.value(v).numel());
            data.extend_from_slice(self.value(v).data());
        }
        let rows: usize = xs.iter().map(|&v| self.shape(v)[0]).sum();
        let mut shape = first.clone();
        shape[0] = rows;
        let parts: Vec<(Var, Vec<usize>)> = xs.iter().map(|&v| (v, self.shape(v).to_vec())).collect();
        Ok(self.push_op(
            Tensor::new(&shape, data)?,
            xs,
            Box::new(move |g, s| {
                let mut off = 0;
                for ((v, sh), n) in parts.iter().zip(&counts) {
                    if s.wants(*v) {
                        s.add(*v, Tensor::new(sh, g.data()[off..off + n].to_vec()).unwrap());
                    }
                    off += n;
                }
            }),
        ))
    }

    /// Repeats a vector `[C]` into `[n, C]`.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Var {
        let c = self.value(v).numel();
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(self.value(v).data());
        }
        let vshape = self.shape(v).to_vec();
        self.push_op(
            Tensor::new(&[n, c], out).unwrap(),
            &[v],
            Box::new(move |g, s| {
                s.add_with(v, &vshape, |d| {
                    for row in g.data().chunks(c.max(1)) {
                        for (a, &b) in d.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            }),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let total = self.value(x).sum();
        self.push_op(
            Tensor::scalar(total),
            &[x],
            Box::new(move |g, s| {
                s.add(x, Tensor::full(&shape, g.data()[0]));
            }),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / lit(n as f64))
    }

    /// Sum of several scalars.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let mut total = T::zero();
        for &v in xs {
            if self.value(v).numel() != 1 {
                return Err(Error::shape("add_n", format!("non-scalar {:?}", self.shape(v))));
            }
            total += self.value(v).data()[0];
        }
        let parts = xs.to_vec();
        Ok(self.push_op(
            Tensor::scalar(total),
            xs,
            Box::new(move |g, s| {
                for &v in &parts {
                    s.add(v, g.clone());
                }
            }),
        ))
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mse", a, b)?;
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        let n: T = lit(va.numel().max(1) as f64);
        let loss = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[a, b],
            Box::new(move |g, s| {
                let k = g.data()[0] * lit::<T>(2.0) / n;
                let d: Vec<T> = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * k).collect();
                if s.wants(b) {
                    s.add(b, Tensor::new(vb.shape(), d.iter().map(|&v| -v).collect()).unwrap());
                }
                s.add(a, Tensor::new(va.shape(), d).unwrap());
            }),
        ))
    }

    /// Normalizes consecutive groups of `group` values to unit length. A zero group
    /// maps to the first basis vector (identity quaternion for `group == 4`).
    pub fn normalize_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value_arc(x);
        if group == 0 || xv.last_dim() % group != 0 {
            return Err(Error::shape("normalize_groups", format!("{:?} by {group}", xv.shape())));
        }
        let tiny: T = lit(1e-12);
        let mut y = (*xv).clone();
        for chunk in y.data_mut().chunks_mut(group) {
            let n = chunk.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n < tiny {
                chunk.iter_mut().for_each(|v| *v = T::zero());
                chunk[0] = T::one();
            } else {
                chunk.iter_mut().for_each(|v| *v /= n);
            }
        }
        let yc = y.clone();
        Ok(self.push_op(
            y,
            &[x],
            Box::new(move |g, s| {
                let mut gx = vec![T::zero(); xv.numel()];
                for (i, ((gc, xc), yc)) in g.data().chunks(group).zip(xv.data().chunks(group)).zip(yc.data().chunks(group)).enumerate() {
                    let n = xc.iter().map(|&v| v * v).sum::<T>().sqrt();
                    if n < tiny {
                        continue;
                    }
                    let dot: T = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum();
                    for j in 0..group {
                        gx[i * group + j] = (gc[j] - yc[j] * dot) / n;
                    }
                }
                s.add(x, Tensor::new(xv.shape(), gx).unwrap());
            }),
        ))
    }
}
