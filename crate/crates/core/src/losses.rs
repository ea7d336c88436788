//! Stage-2 objective and evaluation metrics.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{lit, to_f64, Conv2dSpec, Graph, Real, Tensor, Var};
use crate::geometry::Vec3;
use crate::{Error, Result};

/// Weight of the depth term in the per-view objective.
pub const DEPTH_WEIGHT: f64 = 0.2;
/// Weight of the perceptual term inside the image loss.
pub const PERC_WEIGHT: f64 = 2.0;
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_FSCORE_TAU: f64 = 0.2;
pub const DEFAULT_PROXY_SEED: u64 = 0x5eed;

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: &Tensor<T>) -> Result<()> {
    if g.shape(a) != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", g.shape(a), b.shape())));
    }
    Ok(())
}

/// Fixed random convolution stack standing in for a learned perceptual metric.
/// Weights come from a seed and are never trained.
#[derive(Clone, Debug)]
pub struct PerceptualProxy {
    pub seed: u64,
    levels: Vec<Tensor<f64>>,
}

const PROXY_CHANNELS: [usize; 4] = [3, 8, 16, 32];

impl PerceptualProxy {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels =
            PROXY_CHANNELS.windows(2).map(|c| Tensor::randn(&[3, 3, c[0], c[1]], 1.0 / ((9 * c[0]) as f64).sqrt(), &mut rng)).collect();
        Self { seed, levels }
    }

    fn features<T: Real>(&self, g: &mut Graph<T>, img: Var) -> Result<Vec<Var>> {
        let spec = Conv2dSpec { stride: 2, padding: 1 };
        let mut x = g.scale(img, lit(2.0));
        x = g.add_scalar(x, lit(-1.0));
        let mut out = Vec::with_capacity(self.levels.len());
        for w in &self.levels {
            let wv = g.constant(w.cast());
            x = g.conv2d(x, wv, None, spec)?;
            x = g.silu(x);
            let c = g.shape(x)[2];
            out.push(g.normalize_groups(x, c)?);
        }
        Ok(out)
    }

    /// Sum over levels of the mean squared distance between unit-normalised features.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
        same_shape(g, "perceptual_proxy", pred, target)?;
        let t = g.constant(target.clone());
        let fp = self.features(g, pred)?;
        let ft = self.features(g, t)?;
        let terms = fp.into_iter().zip(ft).map(|(a, b)| g.mse(a, b)).collect::<Result<Vec<_>>>()?;
        g.add_n(&terms)
    }

    /// Plain evaluation of the proxy between two images `[H, W, 3]`.
    pub fn eval(&self, a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(a.cast());
        let v = self.loss(&mut g, x, &b.cast())?;
        Ok(g.value(v).data()[0])
    }
}

/// `(l2, perc)` with `l2` the mean squared error and `perc = 2 * proxy`.
pub fn image_loss<T: Real>(g: &mut Graph<T>, proxy: &PerceptualProxy, pred: Var, target: &Tensor<T>) -> Result<(Var, Var)> {
    same_shape(g, "image_loss", pred, target)?;
    let t = g.constant(target.clone());
    let l2 = g.mse(pred, t)?;
    let p = proxy.loss(g, pred, target)?;
    let perc = g.scale(p, lit(PERC_WEIGHT));
    Ok((l2, perc))
}

pub fn mask_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    same_shape(g, "mask_loss", pred, target)?;
    let t = g.constant(target.clone());
    g.mse(pred, t)
}

/// Per-pixel edge strength of an `[H, W, 3]` image: channel mean of absolute forward
/// differences along u and v (zero past the last column/row).
pub fn image_gradient<T: Real>(img: &Tensor<T>) -> Result<Vec<f64>> {
    let sh = img.shape();
    if sh.len() != 3 || sh[2] != 3 {
        return Err(Error::shape("image_gradient", format!("{sh:?}")));
    }
    let (h, w) = (sh[0], sh[1]);
    let d = img.data();
    let at = |r: usize, c: usize, k: usize| to_f64(d[(r * w + c) * 3 + k]);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for k in 0..3 {
                if c + 1 < w {
                    acc += (at(r, c + 1, k) - at(r, c, k)).abs();
                }
                if r + 1 < h {
                    acc += (at(r + 1, c, k) - at(r, c, k)).abs();
                }
            }
            out[r * w + c] = acc / 3.0;
        }
    }
    Ok(out)
}

/// `(1 / |D|) * sum exp(-dI) * log(1 + |pred - gt|)` over pixels with `gt > 0`.
pub fn depth_loss<T: Real>(g: &mut Graph<T>, pred: Var, gt: &Tensor<T>, image: &Tensor<T>) -> Result<Var> {
    same_shape(g, "depth_loss", pred, gt)?;
    if image.ndim() != 3 || image.shape()[..2] != gt.shape()[..] {
        return Err(Error::shape("depth_loss", format!("image {:?} vs depth {:?}", image.shape(), gt.shape())));
    }
    let weights: Vec<f64> = image_gradient(image)?.into_iter().map(|d| (-d).exp()).collect();
    let pv = g.value_arc(pred);
    let n = pv.numel().max(1) as f64;
    let mut loss = 0.0;
    for ((&p, &d), &w) in pv.data().iter().zip(gt.data()).zip(&weights) {
        if to_f64(d) > 0.0 {
            loss += w * (1.0 + (to_f64(p) - to_f64(d)).abs()).ln();
        }
    }
    let gt = gt.clone();
    Ok(g.push_op(
        Tensor::scalar(lit(loss / n)),
        &[pred],
        Box::new(move |go, s| {
            let k = to_f64(go.data()[0]) / n;
            let grad: Vec<T> = pv
                .data()
                .iter()
                .zip(gt.data())
                .zip(&weights)
                .map(|((&p, &d), &w)| {
                    let e = to_f64(p) - to_f64(d);
                    if to_f64(d) > 0.0 && e != 0.0 {
                        lit(k * w * e.signum() / (1.0 + e.abs()))
                    } else {
                        T::zero()
                    }
                })
                .collect();
            s.add(pred, Tensor::new(pv.shape(), grad).unwrap());
        }),
    ))
}

/// Supervision for one target view.
pub struct ViewTarget<'a, T: Real> {
    pub image: &'a Tensor<T>,
    pub mask: &'a Tensor<T>,
    pub depth: &'a Tensor<T>,
}

/// Scalar loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub img_l2: f64,
    pub img_perc: f64,
    pub mask: f64,
    pub depth: f64,
}

impl LossBreakdown {
    /// `total == img_l2 + img_perc + mask + 0.2 * depth` up to rounding.
    pub fn is_consistent(&self) -> bool {
        let expect = self.img_l2 + self.img_perc + self.mask + DEPTH_WEIGHT * self.depth;
        (self.total - expect).abs() <= 1e-5 * expect.abs().max(1.0)
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.img_l2 += other.img_l2;
        self.img_perc += other.img_perc;
        self.mask += other.mask;
        self.depth += other.depth;
    }
}

/// Sum over target views of `l2 + perc + mask + 0.2 * depth`. `renders` are the
/// `(image, alpha, depth)` vars of each view.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    proxy: &PerceptualProxy,
    renders: &[(Var, Var, Var)],
    targets: &[ViewTarget<'_, T>],
) -> Result<(Var, LossBreakdown)> {
    if renders.len() != targets.len() || renders.is_empty() {
        return Err(Error::Invalid(format!("{} renders for {} targets", renders.len(), targets.len())));
    }
    let mut terms = Vec::new();
    let mut br = LossBreakdown::default();
    for (&(img, alpha, depth), t) in renders.iter().zip(targets) {
        let (l2, perc) = image_loss(g, proxy, img, t.image)?;
        let m = mask_loss(g, alpha, t.mask)?;
        let d = depth_loss(g, depth, t.depth, t.image)?;
        let val = |g: &Graph<T>, v: Var| to_f64(g.value(v).data()[0]);
        br.img_l2 += val(g, l2);
        br.img_perc += val(g, perc);
        br.mask += val(g, m);
        br.depth += val(g, d);
        let dw = g.scale(d, lit(DEPTH_WEIGHT));
        terms.extend([l2, perc, m, dw]);
    }
    let total = g.add_n(&terms)?;
    br.total = to_f64(g.value(total).data()[0]);
    Ok((total, br))
}

fn check_images(a: &Tensor<f32>, b: &Tensor<f32>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() || a.numel() == 0 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at 99 dB.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_images(a, b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum::<f64>() / a.numel() as f64;
    Ok(if mse <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) })
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, x) in w.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *x = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|x| x / s)
}

/// Mean SSIM over channels and valid window positions (11x11 Gaussian, sigma 1.5,
/// K1 = 0.01, K2 = 0.03), floored at 0. Images smaller than the window use one
/// window clipped to the image.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    check_images(a, b, "ssim")?;
    let sh = a.shape();
    let (h, w, ch) = match sh.len() {
        3 => (sh[0], sh[1], sh[2]),
        2 => (sh[0], sh[1], 1),
        _ => return Err(Error::shape("ssim", format!("{sh:?}"))),
    };
    let win = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (rh, rw) = (h.min(11), w.min(11));
    let (oh, ow) = (h - rh + 1, w - rw + 1);
    let (wy, wx) = (&win[(11 - rh) / 2..][..rh], &win[(11 - rw) / 2..][..rw]);
    let norm: f64 = wy.iter().sum::<f64>() * wx.iter().sum::<f64>();
    let px = |t: &Tensor<f32>, r: usize, c: usize, k: usize| t.data()[(r * w + c) * ch + k] as f64;
    let mut total = 0.0;
    for k in 0..ch {
        for r0 in 0..oh {
            for c0 in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, &wi) in wy.iter().enumerate() {
                    for (j, &wj) in wx.iter().enumerate() {
                        let q = wi * wj / norm;
                        let (x, y) = (px(a, r0 + i, c0 + j, k), px(b, r0 + i, c0 + j, k));
                        ma += q * x;
                        mb += q * y;
                        saa += q * x * x;
                        sbb += q * y * y;
                        sab += q * x * y;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok((total / (ch * oh * ow) as f64).clamp(0.0, 1.0))
}

fn nn_distances(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    let (tx, ty, tz): (Vec<f64>, Vec<f64>, Vec<f64>) =
        (to.iter().map(|p| p[0]).collect(), to.iter().map(|p| p[1]).collect(), to.iter().map(|p| p[2]).collect());
    from.iter()
        .map(|p| {
            let mut best = f64::INFINITY;
            for i in 0..tx.len() {
                let d = (tx[i] - p[0]).powi(2) + (ty[i] - p[1]).powi(2) + (tz[i] - p[2]).powi(2);
                best = best.min(d);
            }
            best.sqrt()
        })
        .collect()
}

fn check_points(p: &[Vec3], q: &[Vec3]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Invalid("empty point set".into()));
    }
    Ok(())
}

/// Average of the two directed mean nearest-neighbour distances.
pub fn chamfer(p: &[Vec3], q: &[Vec3]) -> Result<f64> {
    check_points(p, q)?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(nn_distances(p, q)) + mean(nn_distances(q, p))))
}

/// Harmonic mean of precision (of `p` against `q`) and recall at distance `tau`.
pub fn fscore(p: &[Vec3], q: &[Vec3], tau: f64) -> Result<f64> {
    check_points(p, q)?;
    let frac = |v: Vec<f64>| v.iter().filter(|&&d| d < tau).count() as f64 / v.len() as f64;
    let (prec, rec) = (frac(nn_distances(p, q)), frac(nn_distances(q, p)));
    Ok(if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 })
}

/// One row of the metrics report. `perc_proxy` is the fixed-seed proxy, not a learned
/// perceptual metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene: String,
    pub n_input_views: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub perc_proxy: f64,
    pub chamfer: f64,
    pub fscore: f64,
}

pub fn write_report(mut w: impl Write, rows: &[MetricsRow]) -> std::io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_report(r: impl BufRead) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("metrics report", e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::format("metrics report", format!("line {}: {e}", i + 1)))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions};
    use rand::Rng;

    fn noisy(img: &Tensor<f64>, sigma: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Tensor::<f64>::randn(img.shape(), sigma, &mut rng);
        Tensor::new(img.shape(), img.data().iter().zip(n.data()).map(|(a, b)| a + b).collect()).unwrap()
    }

    fn test_image(h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = (0..h * w * 3)
            .map(|i| {
                let (r, c) = ((i / 3) / w, (i / 3) % w);
                0.5 + 0.3 * ((r as f64 * 0.4).sin() * (c as f64 * 0.3).cos()) + rng.random_range(-0.05..0.05)
            })
            .collect();
        Tensor::new(&[h, w, 3], data).unwrap()
    }

    fn proxy_value(p: &PerceptualProxy, a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let mut g = Graph::<f64>::new();
        let x = g.constant(a.clone());
        let v = p.loss(&mut g, x, b).unwrap();
        g.value(v).data()[0]
    }

    #[test]
    fn image_loss_closed_forms() {
        let p = PerceptualProxy::new(DEFAULT_PROXY_SEED);
        let img = test_image(16, 16);
        let mut g = Graph::new();
        let x = g.input(img.clone());
        let (l2, perc) = image_loss(&mut g, &p, x, &img).unwrap();
        assert_eq!(g.value(l2).data()[0], 0.0);
        assert!(g.value(perc).data()[0].abs() < 1e-12);
        let shifted = img.map(|v| v + 0.1);
        let x = g.input(shifted);
        let (l2, _) = image_loss(&mut g, &p, x, &img).unwrap();
        assert!((g.value(l2).data()[0] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn proxy_symmetric_and_monotone_in_noise() {
        let p = PerceptualProxy::new(DEFAULT_PROXY_SEED);
        let img = test_image(32, 32);
        let other = noisy(&img, 0.1, 1);
        assert!((proxy_value(&p, &img, &other) - proxy_value(&p, &other, &img)).abs() < 1e-7);
        let vals: Vec<f64> = [0.01, 0.05, 0.1].iter().map(|&s| proxy_value(&p, &noisy(&img, s, 2), &img)).collect();
        assert!(vals[0] < vals[1] && vals[1] < vals[2], "{vals:?}");
    }

    #[test]
    fn image_loss_gradient() {
        let p = PerceptualProxy::new(3);
        let target = test_image(8, 8);
        let pred = noisy(&target, 0.1, 5);
        let rep = grad_check("image_loss", &[pred], GradCheckOptions::default(), |g, v| {
            let (a, b) = image_loss(g, &p, v[0], &target)?;
            g.add(a, b)
        })
        .unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }

    #[test]
    fn mask_loss_values_and_gradient() {
        let ones = Tensor::<f64>::full(&[4, 4], 1.0);
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[4, 4]));
        let l = mask_loss(&mut g, z, &ones).unwrap();
        assert_eq!(g.value(l).data()[0], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = Tensor::uniform(&[4, 4], 0.0, 1.0, &mut rng);
        let rep = grad_check("mask_loss", &[pred], GradCheckOptions::default(), |g, v| mask_loss(g, v[0], &ones)).unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    #[test]
    fn depth_loss_closed_forms_and_gradient() {
        let img = Tensor::<f64>::full(&[4, 5, 3], 0.3);
        let gt = Tensor::full(&[4, 5], 1.5);
        let mut g = Graph::new();
        let same = g.input(gt.clone());
        let l = depth_loss(&mut g, same, &gt, &img).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let off = g.input(gt.map(|d| d + std::f64::consts::E - 1.0));
        let l = depth_loss(&mut g, off, &gt, &img).unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-12);
        // background pixels are ignored
        let mut gt_bg = gt.clone();
        gt_bg.data_mut()[0] = 0.0;
        let off = g.input(gt.map(|d| d + 5.0));
        let l = depth_loss(&mut g, off, &gt_bg, &img).unwrap();
        assert!((g.value(l).data()[0] - 19.0 / 20.0 * 6f64.ln()).abs() < 1e-12);

        let timg = test_image(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pred = Tensor::uniform(&[4, 5], 1.0, 2.0, &mut rng);
        let rep = grad_check("depth_loss", &[pred], GradCheckOptions::default(), |g, v| depth_loss(g, v[0], &gt_bg, &timg)).unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }

    #[test]
    fn breakdown_identity() {
        let p = PerceptualProxy::new(1);
        let img = test_image(8, 8);
        let mask = Tensor::full(&[8, 8], 1.0);
        let depth = Tensor::full(&[8, 8], 2.0);
        let mut g = Graph::new();
        let pi = g.input(noisy(&img, 0.05, 1));
        let pa = g.input(Tensor::full(&[8, 8], 0.7));
        let pd = g.input(Tensor::full(&[8, 8], 2.3));
        let t = ViewTarget { image: &img, mask: &mask, depth: &depth };
        let (total, br) =
            reconstruction_loss(&mut g, &p, &[(pi, pa, pd), (pi, pa, pd)], &[t, ViewTarget { image: &img, mask: &mask, depth: &depth }])
                .unwrap();
        assert!(br.is_consistent(), "{br:?}");
        assert_eq!(g.value(total).data()[0], br.total);
        assert!(br.img_l2 > 0.0 && br.img_perc > 0.0 && br.mask > 0.0 && br.depth > 0.0);
    }

    #[test]
    fn image_metrics_identity() {
        let img = test_image(16, 16).cast::<f32>();
        assert_eq!(psnr(&img, &img).unwrap(), 99.0);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
        let other = noisy(&test_image(16, 16), 0.1, 3).cast::<f32>();
        assert!(ssim(&img, &other).unwrap() < 0.95);
        let p = psnr(&img, &other).unwrap();
        assert!((p - 20.0).abs() < 1.0, "{p}");
    }

    #[test]
    fn point_metrics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p: Vec<Vec3> = (0..200).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        assert_eq!(chamfer(&p, &p).unwrap(), 0.0);
        assert_eq!(fscore(&p, &p, 0.2).unwrap(), 1.0);
        // a lattice shifted by less than half its spacing keeps the shift as NN distance
        let grid: Vec<Vec3> = (0..125).map(|i| [(i % 5) as f64, ((i / 5) % 5) as f64, (i / 25) as f64]).collect();
        let shifted: Vec<Vec3> = grid.iter().map(|q| [q[0] + 0.05, q[1], q[2]]).collect();
        assert!((chamfer(&grid, &shifted).unwrap() - 0.05).abs() < 1e-12);
        assert_eq!(fscore(&grid, &shifted, 0.2).unwrap(), 1.0);
        let q: Vec<Vec3> = (0..150).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        assert!((chamfer(&p, &q).unwrap() - chamfer(&q, &p).unwrap()).abs() < 1e-9);
        assert!(chamfer(&[], &q).is_err());
    }

    #[test]
    fn report_round_trip() {
        let rows = vec![MetricsRow {
            scene: "scene_0000".into(),
            n_input_views: 4,
            psnr: 21.5,
            ssim: 0.8,
            perc_proxy: 0.1,
            chamfer: 0.02,
            fscore: 0.9,
        }];
        let mut buf = Vec::new();
        write_report(&mut buf, &rows).unwrap();
        assert_eq!(read_report(&buf[..]).unwrap(), rows);
    }
}
