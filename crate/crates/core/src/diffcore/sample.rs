//! Bilinear feature sampling and the fused multi-view deformable sampler.
//!
//! Coordinates are continuous pixel positions `(x, y)` = (column, row) with texel
//! `(i, j)` centred at integer `(j, i)`. Out-of-range taps are clamped to the border.

use super::graph::{Graph, Var};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// The four taps of one bilinear lookup and their derivatives w.r.t. `x` and `y`.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTaps<T> {
    pub index: [usize; 4],
    pub weight: [T; 4],
    pub dx: [T; 4],
    pub dy: [T; 4],
}

/// Tap indices (into a row-major `h x w` grid) and weights for position `(x, y)`.
pub fn bilinear_taps<T: Real>(h: usize, w: usize, x: T, y: T) -> BilinearTaps<T> {
    let (xf, yf) = (x.floor(), y.floor());
    let (fx, fy) = (x - xf, y - yf);
    let clamp = |v: T, hi: usize| -> usize {
        let v = v.to_f64().unwrap_or(0.0);
        if v <= 0.0 {
            0
        } else if v >= (hi - 1) as f64 {
            hi - 1
        } else {
            v as usize
        }
    };
    let one = T::one();
    let (x0, x1) = (clamp(xf, w), clamp(xf + one, w));
    let (y0, y1) = (clamp(yf, h), clamp(yf + one, h));
    BilinearTaps {
        index: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        weight: [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy],
        dx: [-(one - fy), one - fy, -fy, fy],
        dy: [-(one - fx), -fx, one - fx, fx],
    }
}

/// Samples all channels of `map:[H, W, C]` at `(x, y)` into `out[C]`.
pub fn bilinear_sample_into<T: Real>(map: &Tensor<T>, x: T, y: T, out: &mut [T]) {
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let taps = bilinear_taps(h, w, x, y);
    out.iter_mut().for_each(|o| *o = T::zero());
    for t in 0..4 {
        let base = taps.index[t] * c;
        let wt = taps.weight[t];
        for (o, &v) in out.iter_mut().zip(&map.data()[base..base + c]) {
            *o += wt * v;
        }
    }
}

/// Inputs of [`Graph::deform_sample`] that are not graph nodes.
#[derive(Clone, Debug)]
pub struct DeformLayout {
    pub tokens: usize,
    pub views: usize,
    pub levels: usize,
    pub heads: usize,
    pub points: usize,
    /// Projected reference points in feature-map pixels, `[tokens, views, levels, 2]`.
    pub reference: Vec<f64>,
    /// `[tokens, views]`.
    pub visible: Vec<bool>,
}

impl<T: Real> Graph<T> {
    /// Bilinear lookup of `map:[H, W, C]` at `p:[2] = (x, y)`; differentiable w.r.t. both.
    pub fn bilinear_sample(&mut self, map: Var, p: Var) -> Result<Var> {
        let mv = self.value_arc(map);
        let pv = self.value_arc(p);
        if mv.ndim() != 3 || pv.numel() != 2 {
            return Err(Error::shape("bilinear_sample", format!("map {:?} p {:?}", mv.shape(), pv.shape())));
        }
        let (h, w, c) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
        let (x, y) = (pv.data()[0], pv.data()[1]);
        let mut out = vec![T::zero(); c];
        bilinear_sample_into(&mv, x, y, &mut out);
        Ok(self.push_op(
            Tensor::new(&[c], out)?,
            &[map, p],
            Box::new(move |g, s| {
                let taps = bilinear_taps(h, w, x, y);
                if s.wants(map) {
                    s.add_with(map, mv.shape(), |d| {
                        for t in 0..4 {
                            for ch in 0..c {
                                d[taps.index[t] * c + ch] += taps.weight[t] * g.data()[ch];
                            }
                        }
                    });
                }
                if s.wants(p) {
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for t in 0..4 {
                        let dot: T = (0..c).map(|ch| mv.data()[taps.index[t] * c + ch] * g.data()[ch]).sum();
                        gx += taps.dx[t] * dot;
                        gy += taps.dy[t] * dot;
                    }
                    s.add(p, Tensor::new(pv.shape(), vec![gx, gy]).unwrap());
                }
            }),
        ))
    }

    /// Multi-view, multi-level deformable sampling.
    ///
    /// `maps[v * levels + l]` is `[h_l, w_l, C]`; `offsets` is `[N, heads*levels*points*2]`
    /// in feature-map pixels (or `None` for zero offsets); `attn` is `[N, heads*levels*points]`.
    /// Output `[N, views, C]`: per view, head `h` fills channels `h*dh..(h+1)*dh` with
    /// `sum_{l,k} attn[h,l,k] * sample(maps[v,l], ref[n,v,l] + offset[h,l,k])`.
    /// Invisible (token, view) pairs produce zeros.
    pub fn deform_sample(&mut self, maps: &[Var], offsets: Option<Var>, attn: Var, layout: DeformLayout) -> Result<Var> {
        let DeformLayout { tokens: n, views, levels, heads, points, .. } = layout;
        if maps.len() != views * levels || views == 0 || levels == 0 || heads == 0 || points == 0 {
            return Err(Error::shape("deform_sample", format!("{} maps for {views} views x {levels} levels", maps.len())));
        }
        let c = self.value(maps[0]).last_dim();
        if c % heads != 0 || maps.iter().any(|&m| self.value(m).ndim() != 3 || self.value(m).last_dim() != c) {
            return Err(Error::shape("deform_sample", "feature maps must be [h, w, C] with C divisible by heads"));
        }
        let dh = c / heads;
        let slots = heads * levels * points;
        if self.shape(attn) != [n, slots] {
            return Err(Error::shape("deform_sample", format!("attn {:?}, expected [{n}, {slots}]", self.shape(attn))));
        }
        if let Some(o) = offsets {
            if self.shape(o) != [n, slots * 2] {
                return Err(Error::shape("deform_sample", format!("offsets {:?}", self.shape(o))));
            }
        }
        if layout.reference.len() != n * views * levels * 2 || layout.visible.len() != n * views {
            return Err(Error::shape("deform_sample", "reference/visibility layout"));
        }
        let map_vals: Vec<_> = maps.iter().map(|&m| self.value_arc(m)).collect();
        let off_val = offsets.map(|o| self.value_arc(o));
        let attn_val = self.value_arc(attn);
        let mut out = vec![T::zero(); n * views * c];
        let position = move |tok: usize, v: usize, l: usize, h: usize, k: usize| -> (T, T) {
            let r = ((tok * views + v) * levels + l) * 2;
            let (mut x, mut y): (T, T) = (super::real::lit(layout.reference[r]), super::real::lit(layout.reference[r + 1]));
            if let Some(ov) = &off_val {
                let o = tok * slots * 2 + ((h * levels + l) * points + k) * 2;
                x += ov.data()[o];
                y += ov.data()[o + 1];
            }
            (x, y)
        };
        for tok in 0..n {
            for v in 0..views {
                if !layout.visible[tok * views + v] {
                    continue;
                }
                let dst = (tok * views + v) * c;
                for l in 0..levels {
                    let map = &map_vals[v * levels + l];
                    for h in 0..heads {
                        for k in 0..points {
                            let a = attn_val.data()[tok * slots + (h * levels + l) * points + k];
                            let (x, y) = position(tok, v, l, h, k);
                            let (mh, mw) = (map.shape()[0], map.shape()[1]);
                            let taps = bilinear_taps(mh, mw, x, y);
                            for t in 0..4 {
                                let wt = a * taps.weight[t];
                                let src = taps.index[t] * c + h * dh;
                                for ch in 0..dh {
                                    out[dst + h * dh + ch] += wt * map.data()[src + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut parents: Vec<Var> = maps.to_vec();
        parents.push(attn);
        if let Some(o) = offsets {
            parents.push(o);
        }
        let maps_owned = maps.to_vec();
        let result = Tensor::new(&[n, views, c], out)?;
        Ok(self.push_op(
            result,
            &parents,
            Box::new(move |g, s| {
                let want_maps: Vec<bool> = maps_owned.iter().map(|&m| s.wants(m)).collect();
                let mut g_maps: Vec<Vec<T>> =
                    map_vals.iter().zip(&want_maps).map(|(m, &w)| if w { vec![T::zero(); m.numel()] } else { Vec::new() }).collect();
                let mut g_attn = vec![T::zero(); n * slots];
                let want_off = offsets.map(|o| s.wants(o)).unwrap_or(false);
                let mut g_off = if want_off { vec![T::zero(); n * slots * 2] } else { Vec::new() };
                for tok in 0..n {
                    for v in 0..views {
                        if !layout.visible[tok * views + v] {
                            continue;
                        }
                        let gsrc = (tok * views + v) * c;
                        for l in 0..levels {
                            let mi = v * levels + l;
                            let map = &map_vals[mi];
                            let (mh, mw) = (map.shape()[0], map.shape()[1]);
                            for h in 0..heads {
                                let gv = &g.data()[gsrc + h * dh..gsrc + (h + 1) * dh];
                                for k in 0..points {
                                    let slot = (h * levels + l) * points + k;
                                    let a = attn_val.data()[tok * slots + slot];
                                    let (x, y) = position(tok, v, l, h, k);
                                    let taps = bilinear_taps(mh, mw, x, y);
                                    let (mut ga, mut gx, mut gy) = (T::zero(), T::zero(), T::zero());
                                    for t in 0..4 {
                                        let src = taps.index[t] * c + h * dh;
                                        let dot: T = (0..dh).map(|ch| map.data()[src + ch] * gv[ch]).sum();
                                        ga += taps.weight[t] * dot;
                                        gx += taps.dx[t] * dot;
                                        gy += taps.dy[t] * dot;
                                        if want_maps[mi] {
                                            let wt = a * taps.weight[t];
                                            for ch in 0..dh {
                                                g_maps[mi][src + ch] += wt * gv[ch];
                                            }
                                        }
                                    }
                                    g_attn[tok * slots + slot] += ga;
                                    if want_off {
                                        g_off[tok * slots * 2 + slot * 2] += a * gx;
                                        g_off[tok * slots * 2 + slot * 2 + 1] += a * gy;
                                    }
                                }
                            }
                        }
                    }
                }
                for ((m, gm), mv) in maps_owned.iter().zip(g_maps).zip(&map_vals) {
                    if !gm.is_empty() {
                        s.add(*m, Tensor::new(mv.shape(), gm).unwrap());
                    }
                }
                s.add(attn, Tensor::new(&[n, slots], g_attn).unwrap());
                if let (Some(o), true) = (offsets, want_off) {
                    s.add(o, Tensor::new(&[n, slots * 2], g_off).unwrap());
                }
            }),
        ))
    }

    /// Softmax over the views of each token restricted to visible views; a token with
    /// no visible view gets all-zero weights. `logits:[N, V]`.
    pub fn masked_view_softmax(&mut self, logits: Var, visible: &[bool]) -> Result<Var> {
        let lv = self.value_arc(logits);
        if lv.ndim() != 2 || visible.len() != lv.numel() {
            return Err(Error::shape("masked_view_softmax", format!("{:?}", lv.shape())));
        }
        let (n, v) = (lv.shape()[0], lv.shape()[1]);
        let mut y = vec![T::zero(); n * v];
        for t in 0..n {
            let row = &lv.data()[t * v..(t + 1) * v];
            let vis = &visible[t * v..(t + 1) * v];
            let mx = row.iter().zip(vis).filter(|(_, &m)| m).fold(T::neg_infinity(), |a, (&x, _)| a.max(x));
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for j in 0..v {
                if vis[j] {
                    y[t * v + j] = (row[j] - mx).exp();
                    z += y[t * v + j];
                }
            }
            y[t * v..(t + 1) * v].iter_mut().for_each(|e| *e /= z);
        }
        let yt = Tensor::new(&[n, v], y)?;
        let yc = yt.clone();
        Ok(self.push_op(
            yt,
            &[logits],
            Box::new(move |g, s| {
                let mut gx = vec![T::zero(); n * v];
                for t in 0..n {
                    let (gr, yr) = (&g.data()[t * v..(t + 1) * v], &yc.data()[t * v..(t + 1) * v]);
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..v {
                        gx[t * v + j] = yr[j] * (gr[j] - dot);
                    }
                }
                s.add(logits, Tensor::new(&[n, v], gx).unwrap());
            }),
        ))
    }

    /// `out[n] = sum_v w[n, v] * x[n, v, :]`.
    pub fn weighted_view_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value_arc(x), self.value_arc(w));
        if xv.ndim() != 3 || wv.shape() != &xv.shape()[..2] {
            return Err(Error::shape("weighted_view_sum", format!("x {:?} w {:?}", xv.shape(), wv.shape())));
        }
        let (n, v, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![T::zero(); n * c];
        for t in 0..n {
            for j in 0..v {
                let wt = wv.data()[t * v + j];
                for ch in 0..c {
                    out[t * c + ch] += wt * xv.data()[(t * v + j) * c + ch];
                }
            }
        }
        Ok(self.push_op(
            Tensor::new(&[n, c], out)?,
            &[x, w],
            Box::new(move |g, s| {
                if s.wants(x) {
                    let mut gx = vec![T::zero(); n * v * c];
                    for t in 0..n {
                        for j in 0..v {
                            let wt = wv.data()[t * v + j];
                            for ch in 0..c {
                                gx[(t * v + j) * c + ch] = wt * g.data()[t * c + ch];
                            }
                        }
                    }
                    s.add(x, Tensor::new(xv.shape(), gx).unwrap());
                }
                if s.wants(w) {
                    let mut gw = vec![T::zero(); n * v];
                    for t in 0..n {
                        for j in 0..v {
                            gw[t * v + j] = (0..c).map(|ch| g.data()[t * c + ch] * xv.data()[(t * v + j) * c + ch]).sum();
                        }
                    }
                    s.add(w, Tensor::new(wv.shape(), gw).unwrap());
                }
            }),
        ))
    }
}
