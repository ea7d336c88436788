//! Front-to-back EWA splatting with an analytic backward pass.
//!
//! Pixel `(col, row)` samples the image plane at integer coordinates, matching the
//! projection convention of [`crate::geometry`]. All per-pixel arithmetic runs in f64
//! whatever the graph precision.

use crate::diffcore::{lit, to_f64, Graph, Real, Tensor, Var};
use crate::formats::GAUSS_RECORD;
use crate::geometry::{CameraPose, Mat3, Z_NEAR};
use crate::{Error, Result};

/// Isotropic dilation added to every projected covariance (pixels squared).
pub const LOW_PASS: f64 = 0.3;
/// Per-pixel weights below this are treated as zero.
pub const WEIGHT_CUTOFF: f64 = 1e-4;
/// Compositing stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Projected covariances with a larger eigenvalue ratio are skipped.
pub const MAX_CONDITION: f64 = 1e6;
pub const BACKGROUND: f64 = 1.0;
/// Channels of the packed render output: rgb, alpha, depth.
pub const RENDER_CHANNELS: usize = 5;
const TILE: usize = 8;

/// Projected Gaussian plus what the backward pass needs to re-enter the chain.
#[derive(Clone, Debug)]
struct Splat {
    id: usize,
    u: f64,
    v: f64,
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    t: [f64; 3],
    cov_cam: Mat3,
    rot: Mat3,
    q_hat: [f64; 4],
    q_norm: f64,
    scale: [f64; 3],
    jac: [[f64; 3]; 2],
    bbox: [usize; 4],
}

fn quat_to_rot(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// `d R / d q_k` for the unnormalised rotation formula above.
fn quat_rot_partials(q: [f64; 4]) -> [Mat3; 4] {
    let [w, x, y, z] = q;
    [
        [[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]],
        [[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]],
        [[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]],
        [[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]],
    ]
}

fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose3(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

fn project_one(id: usize, rec: &[f64], pose: &CameraPose) -> Option<Splat> {
    if rec.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let k = &pose.intrinsics;
    let rc = &pose.extrinsics.rotation;
    let t = pose.extrinsics.world_to_camera([rec[0], rec[1], rec[2]]);
    if t[2] <= Z_NEAR {
        return None;
    }
    let opacity = rec[13];
    if opacity <= WEIGHT_CUTOFF {
        return None;
    }
    let q = [rec[9], rec[10], rec[11], rec[12]];
    let q_norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if q_norm < 1e-12 {
        return None;
    }
    let q_hat = q.map(|x| x / q_norm);
    let rot = quat_to_rot(q_hat);
    let scale = [rec[6], rec[7], rec[8]];
    let mut rs = rot;
    for row in rs.iter_mut() {
        for (c, s) in row.iter_mut().zip(scale) {
            *c *= s * s;
        }
    }
    let cov_world = matmul3(&rs, &transpose3(&rot));
    // world -> camera rotation is rc^T
    let cov_cam = matmul3(&matmul3(&transpose3(rc), &cov_world), rc);
    let (x, y, z) = (t[0], t[1], t[2]);
    let jac = [[k.fx / z, 0.0, -k.fx * x / (z * z)], [0.0, k.fy / z, -k.fy * y / (z * z)]];
    let mut cov2 = [0.0; 3];
    let jm = |r: usize, c: usize| -> f64 { (0..3).map(|i| jac[r][i] * cov_cam[i][c]).sum() };
    let jmj = |r: usize, s: usize| -> f64 { (0..3).map(|c| jm(r, c) * jac[s][c]).sum() };
    cov2[0] = jmj(0, 0) + LOW_PASS;
    cov2[1] = jmj(0, 1);
    cov2[2] = jmj(1, 1) + LOW_PASS;
    let det = cov2[0] * cov2[2] - cov2[1] * cov2[1];
    if !(det > 0.0) {
        return None;
    }
    let mid = 0.5 * (cov2[0] + cov2[2]);
    let disc = (mid * mid - det).max(0.0).sqrt();
    let (l_max, l_min) = (mid + disc, mid - disc);
    if !(l_min > 0.0) || l_max / l_min > MAX_CONDITION {
        return None;
    }
    let conic = [cov2[2] / det, -cov2[1] / det, cov2[0] / det];
    let u = k.fx * x / z + k.cx;
    let v = k.fy * y / z + k.cy;
    // pixels with weight >= cutoff lie inside this Mahalanobis radius
    let m2 = 2.0 * (opacity / WEIGHT_CUTOFF).ln();
    let (ex, ey) = ((cov2[0] * m2).sqrt(), (cov2[2] * m2).sqrt());
    let (w, h) = (k.width as f64, k.height as f64);
    if u + ex < 0.0 || u - ex > w - 1.0 || v + ey < 0.0 || v - ey > h - 1.0 {
        return None;
    }
    let bbox = [
        (u - ex).ceil().max(0.0) as usize,
        ((u + ex).floor().min(w - 1.0)) as usize,
        (v - ey).ceil().max(0.0) as usize,
        ((v + ey).floor().min(h - 1.0)) as usize,
    ];
    if bbox[0] > bbox[1] || bbox[2] > bbox[3] {
        return None;
    }
    Some(Splat { id, u, v, conic, opacity, color: [rec[3], rec[4], rec[5]], t, cov_cam, rot, q_hat, q_norm, scale, jac, bbox })
}

/// Sorted splats and the per-tile lists indexing into them.
struct Prepared {
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    width: usize,
    height: usize,
    pose: CameraPose,
}

fn prepare(records: &[f64], pose: &CameraPose) -> Prepared {
    let (width, height) = (pose.width(), pose.height());
    let mut splats: Vec<Splat> = records.chunks_exact(GAUSS_RECORD).enumerate().filter_map(|(i, r)| project_one(i, r, pose)).collect();
    splats.sort_by(|a, b| a.t[2].total_cmp(&b.t[2]).then(a.id.cmp(&b.id)));
    let tiles_x = width.div_ceil(TILE);
    let tiles_y = height.div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (si, s) in splats.iter().enumerate() {
        for ty in s.bbox[2] / TILE..=s.bbox[3] / TILE {
            for tx in s.bbox[0] / TILE..=s.bbox[1] / TILE {
                tiles[ty * tiles_x + tx].push(si as u32);
            }
        }
    }
    Prepared { splats, tiles, tiles_x, width, height, pose: *pose }
}

/// One contribution at a pixel: splat index, Gaussian falloff, weight, transmittance
/// before it, and the pixel offset from the splat centre.
#[derive(Clone, Copy)]
struct Hit {
    si: u32,
    falloff: f64,
    w: f64,
    t_before: f64,
    dx: f64,
    dy: f64,
}

impl Prepared {
    /// Front-to-back walk at one pixel. Returns the final transmittance.
    fn walk(&self, col: usize, row: usize, hits: &mut Vec<Hit>) -> f64 {
        hits.clear();
        let tile = &self.tiles[(row / TILE) * self.tiles_x + col / TILE];
        let (px, py) = (col as f64, row as f64);
        let mut tr = 1.0;
        for &si in tile {
            let s = &self.splats[si as usize];
            if col < s.bbox[0] || col > s.bbox[1] || row < s.bbox[2] || row > s.bbox[3] {
                continue;
            }
            let (dx, dy) = (px - s.u, py - s.v);
            let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
            let falloff = power.exp();
            let w = s.opacity * falloff;
            if w < WEIGHT_CUTOFF {
                continue;
            }
            hits.push(Hit { si, falloff, w, t_before: tr, dx, dy });
            tr *= 1.0 - w;
            if tr < MIN_TRANSMITTANCE {
                break;
            }
        }
        tr
    }

    /// Packed `[H, W, 5]` output.
    fn forward(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.width * self.height * RENDER_CHANNELS];
        let mut hits = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                let tr = self.walk(col, row, &mut hits);
                let mut rgb = [0.0; 3];
                let mut dn = 0.0;
                for h in &hits {
                    let s = &self.splats[h.si as usize];
                    let k = h.t_before * h.w;
                    for c in 0..3 {
                        rgb[c] += k * s.color[c];
                    }
                    dn += k * s.t[2];
                }
                let alpha = 1.0 - tr;
                let o = &mut out[(row * self.width + col) * RENDER_CHANNELS..][..RENDER_CHANNELS];
                for c in 0..3 {
                    o[c] = rgb[c] + tr * BACKGROUND;
                }
                o[3] = alpha;
                o[4] = dn / alpha.max(1e-6);
            }
        }
        out
    }

    /// Vector-Jacobian product with the packed output cotangent; returns `[G, 14]` grads.
    fn backward(&self, grad_out: &[f64], n_records: usize) -> Vec<f64> {
        let ns = self.splats.len();
        // per splat: u, v, conic a b c, opacity, color 3, depth
        const NG: usize = 10;
        let mut gs = vec![0.0; ns * NG];
        let mut hits = Vec::new();
        for row in 0..self.height {
            for col in 0..self.width {
                let go = &grad_out[(row * self.width + col) * RENDER_CHANNELS..][..RENDER_CHANNELS];
                if go.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let tr = self.walk(col, row, &mut hits);
                let alpha = 1.0 - tr;
                let dn: f64 = hits.iter().map(|h| h.t_before * h.w * self.splats[h.si as usize].t[2]).sum();
                let (g_dn, g_alpha) =
                    if alpha > 1e-6 { (go[4] / alpha, go[3] - go[4] * dn / (alpha * alpha)) } else { (go[4] / 1e-6, go[3]) };
                let mut rc = [BACKGROUND; 3];
                let mut rz = 0.0;
                let mut behind = 1.0;
                for h in hits.iter().rev() {
                    let s = &self.splats[h.si as usize];
                    let z = s.t[2];
                    let mut g_w = 0.0;
                    for c in 0..3 {
                        g_w += go[c] * h.t_before * (s.color[c] - rc[c]);
                    }
                    g_w += g_dn * h.t_before * (z - rz) + g_alpha * h.t_before * behind;
                    let g = &mut gs[h.si as usize * NG..][..NG];
                    let tw = h.t_before * h.w;
                    for c in 0..3 {
                        g[6 + c] += go[c] * tw;
                    }
                    g[9] += g_dn * tw;
                    g[5] += g_w * h.falloff;
                    let g_pow = g_w * h.w;
                    let (a, b, cc) = (s.conic[0], s.conic[1], s.conic[2]);
                    g[0] += g_pow * (a * h.dx + b * h.dy);
                    g[1] += g_pow * (b * h.dx + cc * h.dy);
                    g[2] += g_pow * (-0.5 * h.dx * h.dx);
                    g[3] += g_pow * (-h.dx * h.dy);
                    g[4] += g_pow * (-0.5 * h.dy * h.dy);
                    for c in 0..3 {
                        rc[c] = h.w * s.color[c] + (1.0 - h.w) * rc[c];
                    }
                    rz = h.w * z + (1.0 - h.w) * rz;
                    behind *= 1.0 - h.w;
                }
            }
        }
        let mut grad = vec![0.0; n_records * GAUSS_RECORD];
        for (s, g) in self.splats.iter().zip(gs.chunks_exact(NG)) {
            splat_backward(s, g, &self.pose, &mut grad[s.id * GAUSS_RECORD..][..GAUSS_RECORD]);
        }
        grad
    }
}

/// Chains per-splat screen-space gradients `[u, v, a, b, c, opacity, rgb, z]` back to
/// the record fields.
fn splat_backward(s: &Splat, g: &[f64], pose: &CameraPose, out: &mut [f64]) {
    let k = &pose.intrinsics;
    let rc = &pose.extrinsics.rotation;
    let [a, b, c] = s.conic;
    let kk = [[a, b], [b, c]];
    let gk = [[g[2], 0.5 * g[3]], [0.5 * g[3], g[4]]];
    // inverse: G_cov2 = -K G_K K
    let mut g2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for p in 0..2 {
                for q in 0..2 {
                    acc += kk[i][p] * gk[p][q] * kk[q][j];
                }
            }
            g2[i][j] = -acc;
        }
    }
    let jac = &s.jac;
    let m = &s.cov_cam;
    let mut gm = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            gm[i][j] = (0..2).map(|p| (0..2).map(|q| jac[p][i] * g2[p][q] * jac[q][j]).sum::<f64>()).sum();
        }
    }
    let mut gj = [[0.0; 3]; 2];
    for p in 0..2 {
        for i in 0..3 {
            gj[p][i] = 2.0 * (0..2).map(|q| g2[p][q] * (0..3).map(|l| jac[q][l] * m[l][i]).sum::<f64>()).sum::<f64>();
        }
    }
    let g_world = matmul3(&matmul3(rc, &gm), &transpose3(rc));
    let r = &s.rot;
    let d = s.scale.map(|x| x * x);
    let gr_full = matmul3(&g_world, r);
    let mut g_rot = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            g_rot[i][j] = 2.0 * gr_full[i][j] * d[j];
        }
    }
    let rt_g_r = matmul3(&transpose3(r), &gr_full);
    for kx in 0..3 {
        out[6 + kx] += 2.0 * s.scale[kx] * rt_g_r[kx][kx];
    }
    let partials = quat_rot_partials(s.q_hat);
    let gq_hat: Vec<f64> = partials.iter().map(|p| (0..3).map(|i| (0..3).map(|j| g_rot[i][j] * p[i][j]).sum::<f64>()).sum()).collect();
    let proj: f64 = (0..4).map(|i| gq_hat[i] * s.q_hat[i]).sum();
    for i in 0..4 {
        out[9 + i] += (gq_hat[i] - s.q_hat[i] * proj) / s.q_norm;
    }
    let [x, y, z] = s.t;
    let (fx, fy) = (k.fx, k.fy);
    let (z2, z3) = (z * z, z * z * z);
    let gt = [
        g[0] * fx / z - gj[0][2] * fx / z2,
        g[1] * fy / z - gj[1][2] * fy / z2,
        -g[0] * fx * x / z2 - g[1] * fy * y / z2 + g[9] - gj[0][0] * fx / z2 + gj[0][2] * 2.0 * fx * x / z3 - gj[1][1] * fy / z2
            + gj[1][2] * 2.0 * fy * y / z3,
    ];
    for i in 0..3 {
        out[i] += (0..3).map(|j| rc[i][j] * gt[j]).sum::<f64>();
        out[3 + i] += g[6 + i];
    }
    out[13] += g[5];
}

/// Rendered image `[H, W, 3]`, alpha `[H, W]` and depth `[H, W]`.
#[derive(Clone, Debug)]
pub struct RenderOut<T: Real> {
    pub image: Tensor<T>,
    pub alpha: Tensor<T>,
    pub depth: Tensor<T>,
}

impl<T: Real> RenderOut<T> {
    fn from_packed(packed: &[f64], h: usize, w: usize) -> Self {
        let n = h * w;
        let mut image = Vec::with_capacity(n * 3);
        let mut alpha = Vec::with_capacity(n);
        let mut depth = Vec::with_capacity(n);
        for px in packed.chunks_exact(RENDER_CHANNELS) {
            image.extend(px[..3].iter().map(|&x| lit::<T>(x)));
            alpha.push(lit(px[3]));
            depth.push(lit(px[4]));
        }
        Self {
            image: Tensor::new(&[h, w, 3], image).expect("shape"),
            alpha: Tensor::new(&[h, w], alpha).expect("shape"),
            depth: Tensor::new(&[h, w], depth).expect("shape"),
        }
    }
}

fn check_records(shape: &[usize]) -> Result<()> {
    if shape.len() != 2 || shape[1] != GAUSS_RECORD {
        return Err(Error::shape("render", format!("expected [G, {GAUSS_RECORD}] records, got {shape:?}")));
    }
    Ok(())
}

/// Renders flat `[G * 14]` records without building a graph.
pub fn render_records(records: &[f64], pose: &CameraPose) -> Result<RenderOut<f32>> {
    if records.len() % GAUSS_RECORD != 0 {
        return Err(Error::shape("render", format!("{} values is not a whole number of records", records.len())));
    }
    let prep = prepare(records, pose);
    Ok(RenderOut::from_packed(&prep.forward(), pose.height(), pose.width()))
}

impl<T: Real> Graph<T> {
    /// Differentiable render of `[G, 14]` records; returns the packed `[H, W, 5]`
    /// output (rgb, alpha, depth). See [`Graph::split_render`].
    pub fn render_gaussians(&mut self, records: Var, pose: &CameraPose) -> Result<Var> {
        let rv = self.value_arc(records);
        check_records(rv.shape())?;
        let n_records = rv.shape()[0];
        let rec64: Vec<f64> = rv.data().iter().map(|&x| to_f64(x)).collect();
        let prep = prepare(&rec64, pose);
        let packed = prep.forward();
        let (h, w) = (pose.height(), pose.width());
        let out = Tensor::new(&[h, w, RENDER_CHANNELS], packed.iter().map(|&x| lit::<T>(x)).collect())?;
        Ok(self.push_op(
            out,
            &[records],
            Box::new(move |g, s| {
                let go: Vec<f64> = g.data().iter().map(|&x| to_f64(x)).collect();
                let grad = prep.backward(&go, n_records);
                s.add(records, Tensor::new(&[n_records, GAUSS_RECORD], grad.into_iter().map(lit::<T>).collect()).unwrap());
            }),
        ))
    }

    /// Splits a packed render into image `[H, W, 3]`, alpha `[H, W]`, depth `[H, W]`.
    pub fn split_render(&mut self, packed: Var) -> Result<(Var, Var, Var)> {
        let sh = self.shape(packed).to_vec();
        if sh.len() != 3 || sh[2] != RENDER_CHANNELS {
            return Err(Error::shape("split_render", format!("{sh:?}")));
        }
        let image = self.slice_last(packed, 0, 3)?;
        let alpha = self.slice_last(packed, 3, 1)?;
        let alpha = self.reshape(alpha, &sh[..2])?;
        let depth = self.slice_last(packed, 4, 1)?;
        let depth = self.reshape(depth, &sh[..2])?;
        Ok((image, alpha, depth))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions};
    use crate::geometry::{Extrinsics, Intrinsics};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn front_pose(res: usize) -> CameraPose {
        let e = Extrinsics::look_at([0.0, -2.0, 0.0], [0.0; 3], [0.0, 0.0, 1.0]);
        CameraPose::new(Intrinsics::from_fov(60.0, res, res), e).unwrap()
    }

    fn record(center: [f64; 3], color: [f64; 3], scale: f64, opacity: f64) -> [f64; GAUSS_RECORD] {
        let mut r = [0.0; GAUSS_RECORD];
        r[..3].copy_from_slice(&center);
        r[3..6].copy_from_slice(&color);
        r[6..9].copy_from_slice(&[scale; 3]);
        r[9] = 1.0;
        r[13] = opacity;
        r
    }

    #[test]
    fn empty_set_is_background() {
        let out = render_records(&[], &front_pose(8)).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a == 0.0));
        assert!(out.image.data().iter().all(|&c| c == 1.0));
    }

    #[test]
    fn single_opaque_splat_recovers_depth() {
        let pose = front_pose(16);
        let r = record([0.0; 3], [0.2, 0.4, 0.6], 0.5, 1.0 - 1e-9);
        let out = render_records(&r, &pose).unwrap();
        let (cx, cy) = (pose.intrinsics.cx as usize, pose.intrinsics.cy as usize);
        let i = cy * 16 + cx;
        assert!(out.alpha.data()[i] > 1.0 - 1e-3);
        assert!((out.depth.data()[i] - 2.0).abs() < 1e-3, "{}", out.depth.data()[i]);
        assert!((out.image.data()[i * 3] - 0.2).abs() < 1e-3);
    }

    #[test]
    fn behind_camera_is_culled() {
        let r = record([0.0, -3.0, 0.0], [0.0; 3], 0.2, 0.9);
        let out = render_records(&r, &front_pose(8)).unwrap();
        assert!(out.alpha.data().iter().all(|&a| a == 0.0));
    }

    fn random_records(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for _ in 0..n {
            v.extend([rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)]);
            v.extend([rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]);
            v.extend([rng.random_range(0.08..0.2), rng.random_range(0.08..0.2), rng.random_range(0.08..0.2)]);
            v.extend([rng.random_range(0.5..1.0), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)]);
            v.push(rng.random_range(0.3..0.9));
        }
        v
    }

    #[test]
    fn render_gradients_match_finite_differences() {
        let pose = front_pose(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let recs = random_records(&mut rng, 4);
        let input = Tensor::new(&[4, GAUSS_RECORD], recs).unwrap();
        let opts = GradCheckOptions { eps: 1e-6, max_entries_per_input: 56, seed: 1 };
        let rep = grad_check("render", &[input], opts, |g, v| g.render_gaussians(v[0], &pose)).unwrap();
        assert!(rep.passes(1e-3), "{rep:?}");
    }
}
