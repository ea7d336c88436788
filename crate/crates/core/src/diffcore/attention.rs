//! Multi-head scaled dot-product attention and 3D rotary position embedding.

use super::graph::{Graph, Var};
use super::real::{lit, matmul_into, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Continuous coordinates in `[-0.5, 0.5]` are scaled to voxel units of a 128 grid.
pub const ROPE_POSITION_SCALE: f64 = 128.0;
pub const ROPE_BASE: f64 = 10_000.0;

const QUERY_BLOCK: usize = 128;

/// Rotation angles for one head: `[N, dh/2]`, pair `i` of axis group `a` at column
/// `a * (dh/6) + i`.
fn rope_angles(coords: &[f64], n: usize, head_dim: usize) -> Vec<f64> {
    let group = head_dim / 3;
    let pairs = group / 2;
    let mut out = vec![0.0; n * 3 * pairs];
    for t in 0..n {
        for axis in 0..3 {
            let pos = coords[t * 3 + axis] * ROPE_POSITION_SCALE;
            for i in 0..pairs {
                let freq = ROPE_BASE.powf(-(2.0 * i as f64) / group as f64);
                out[t * 3 * pairs + axis * pairs + i] = pos * freq;
            }
        }
    }
    out
}

fn rotate<T: Real>(data: &mut [T], angles: &[f64], n: usize, heads: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    let width = heads * head_dim;
    for t in 0..n {
        for p in 0..half {
            let a = angles[t * half + p];
            let (sin, cos) = a.sin_cos();
            let (sin, cos): (T, T) = (lit(if inverse { -sin } else { sin }), lit(cos));
            for h in 0..heads {
                let i = t * width + h * head_dim + 2 * p;
                let (x0, x1) = (data[i], data[i + 1]);
                data[i] = x0 * cos - x1 * sin;
                data[i + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn check_rope(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || width % heads != 0 {
        return Err(Error::shape("rope3d", format!("width {width} not divisible by {heads} heads")));
    }
    let dh = width / heads;
    if dh % 6 != 0 {
        return Err(Error::shape("rope3d", format!("head dim {dh} not divisible by 6")));
    }
    Ok(dh)
}

/// Applies 3D RoPE in place on a plain tensor `[N, heads * dh]`.
pub fn rope3d_tensor<T: Real>(x: &Tensor<T>, coords: &[f64], heads: usize) -> Result<Tensor<T>> {
    let (n, width) = (x.rows(), x.last_dim());
    let dh = check_rope(width, heads)?;
    if coords.len() != n * 3 {
        return Err(Error::shape("rope3d", format!("{} coords for {n} tokens", coords.len() / 3)));
    }
    let angles = rope_angles(coords, n, dh);
    let mut y = x.clone();
    rotate(y.data_mut(), &angles, n, heads, dh, false);
    Ok(y)
}

/// Raw attention logits `q_i . k_j / sqrt(dh)` per head: `[heads, N, M]`.
pub fn attention_logits<T: Real>(q: &Tensor<T>, k: &Tensor<T>, heads: usize) -> Tensor<T> {
    let (n, m, width) = (q.rows(), k.rows(), q.last_dim());
    let dh = width / heads;
    let scale = T::one() / lit::<T>(dh as f64).sqrt();
    let mut out = vec![T::zero(); heads * n * m];
    for h in 0..heads {
        for i in 0..n {
            for j in 0..m {
                let mut acc = T::zero();
                for c in 0..dh {
                    acc += q.data()[i * width + h * dh + c] * k.data()[j * width + h * dh + c];
                }
                out[(h * n + i) * m + j] = acc * scale;
            }
        }
    }
    Tensor::new(&[heads, n, m], out).unwrap()
}

fn split_head<T: Real>(x: &[T], rows: usize, width: usize, h: usize, dh: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * width + h * dh..r * width + (h + 1) * dh]);
    }
    out
}

fn merge_head<T: Real>(dst: &mut [T], src: &[T], rows: usize, width: usize, h: usize, dh: usize) {
    for r in 0..rows {
        for c in 0..dh {
            dst[r * width + h * dh + c] += src[r * dh + c];
        }
    }
}

impl<T: Real> Graph<T> {
    /// 3D rotary embedding: each head's channels are split into x/y/z thirds and
    /// rotated by the scaled coordinate of that axis.
    pub fn rope3d(&mut self, x: Var, coords: &[f64], heads: usize) -> Result<Var> {
        let (n, width) = (self.value(x).rows(), self.value(x).last_dim());
        let dh = check_rope(width, heads)?;
        if coords.len() != n * 3 {
            return Err(Error::shape("rope3d", format!("{} coords for {n} tokens", coords.len() / 3)));
        }
        let angles = rope_angles(coords, n, dh);
        let mut y = self.value(x).clone();
        rotate(y.data_mut(), &angles, n, heads, dh, false);
        Ok(self.push_op(
            y,
            &[x],
            Box::new(move |g, s| {
                let mut gx = g.clone();
                rotate(gx.data_mut(), &angles, n, heads, dh, true);
                s.add(x, gx);
            }),
        ))
    }

    /// Multi-head softmax attention over all key tokens. `q:[N, H*dh]`, `k, v: [M, H*dh]`.
    ///
    /// Probabilities are never materialized for the whole sequence: queries are
    /// processed in blocks and the backward pass recomputes them from the stored
    /// log-sum-exp, so memory stays linear in the sequence length.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value_arc(q), self.value_arc(k), self.value_arc(v));
        let (n, m, width) = (qv.rows(), kv.rows(), qv.last_dim());
        if kv.last_dim() != width || vv.last_dim() != width || vv.rows() != m || heads == 0 || width % heads != 0 {
            return Err(Error::shape("attention", format!("q {:?} k {:?} v {:?} heads {heads}", qv.shape(), kv.shape(), vv.shape())));
        }
        let dh = width / heads;
        let scale = T::one() / lit::<T>(dh as f64).sqrt();
        let mut out = vec![T::zero(); n * width];
        let mut lse = vec![T::zero(); heads * n];
        let mut probs = vec![T::zero(); QUERY_BLOCK * m];
        let mut o_blk = vec![T::zero(); QUERY_BLOCK * dh];
        for h in 0..heads {
            let (qh, kh, vh) =
                (split_head(qv.data(), n, width, h, dh), split_head(kv.data(), m, width, h, dh), split_head(vv.data(), m, width, h, dh));
            for b0 in (0..n).step_by(QUERY_BLOCK) {
                let bl = QUERY_BLOCK.min(n - b0);
                let p = &mut probs[..bl * m];
                matmul_into(bl, dh, m, &qh[b0 * dh..], false, &kh, true, p, false);
                for r in 0..bl {
                    let row = &mut p[r * m..(r + 1) * m];
                    let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x * scale));
                    T::exp_affine(row, scale, mx);
                    let z: T = row.iter().copied().sum();
                    let inv = T::one() / z;
                    row.iter_mut().for_each(|x| *x *= inv);
                    lse[h * n + b0 + r] = mx + z.ln();
                }
                matmul_into(bl, m, dh, p, false, &vh, false, &mut o_blk[..bl * dh], false);
                for r in 0..bl {
                    out[(b0 + r) * width + h * dh..(b0 + r) * width + (h + 1) * dh].copy_from_slice(&o_blk[r * dh..(r + 1) * dh]);
                }
            }
        }
        let out_t = Tensor::new(qv.shape(), out)?;
        let out_saved = out_t.clone();
        Ok(self.push_op(
            out_t,
            &[q, k, v],
            Box::new(move |g, s| {
                let mut gq = vec![T::zero(); n * width];
                let mut gk = vec![T::zero(); m * width];
                let mut gv = vec![T::zero(); m * width];
                let mut p = vec![T::zero(); QUERY_BLOCK * m];
                let mut dp = vec![T::zero(); QUERY_BLOCK * m];
                for h in 0..heads {
                    let (qh, kh, vh) = (
                        split_head(qv.data(), n, width, h, dh),
                        split_head(kv.data(), m, width, h, dh),
                        split_head(vv.data(), m, width, h, dh),
                    );
                    let goh = split_head(g.data(), n, width, h, dh);
                    let oh = split_head(out_saved.data(), n, width, h, dh);
                    let mut gqh = vec![T::zero(); n * dh];
                    let mut gkh = vec![T::zero(); m * dh];
                    let mut gvh = vec![T::zero(); m * dh];
                    for b0 in (0..n).step_by(QUERY_BLOCK) {
                        let bl = QUERY_BLOCK.min(n - b0);
                        let pb = &mut p[..bl * m];
                        let dpb = &mut dp[..bl * m];
                        matmul_into(bl, dh, m, &qh[b0 * dh..], false, &kh, true, pb, false);
                        for r in 0..bl {
                            let l = lse[h * n + b0 + r];
                            T::exp_affine(&mut pb[r * m..(r + 1) * m], scale, l);
                        }
                        let go = &goh[b0 * dh..(b0 + bl) * dh];
                        matmul_into(m, bl, dh, pb, true, go, false, &mut gvh, true);
                        matmul_into(bl, dh, m, go, false, &vh, true, dpb, false);
                        for r in 0..bl {
                            let di: T = (0..dh).map(|c| go[r * dh + c] * oh[(b0 + r) * dh + c]).sum();
                            for j in 0..m {
                                let idx = r * m + j;
                                dpb[idx] = pb[idx] * (dpb[idx] - di) * scale;
                            }
                        }
                        matmul_into(bl, m, dh, dpb, false, &kh, false, &mut gqh[b0 * dh..(b0 + bl) * dh], false);
                        matmul_into(m, bl, dh, dpb, true, &qh[b0 * dh..], false, &mut gkh, true);
                    }
                    merge_head(&mut gq, &gqh, n, width, h, dh);
                    merge_head(&mut gk, &gkh, m, width, h, dh);
                    merge_head(&mut gv, &gvh, m, width, h, dh);
                }
                s.add(q, Tensor::new(qv.shape(), gq).unwrap());
                s.add(k, Tensor::new(kv.shape(), gk).unwrap());
                s.add(v, Tensor::new(vv.shape(), gv).unwrap());
            }),
        ))
    }
}
