//! Raw head output to bounded Gaussian records, and the set type they form.

use std::path::Path;

use rand::Rng;

use crate::diffcore::{lit, to_f64, Graph, ParamStore, Real, Tensor, Var};
use crate::formats::{read_gaussian_records, write_gaussian_records, GAUSS_RECORD};
use crate::geometry::{CameraPose, Vec3};
use crate::nn::Linear;
use crate::{Error, Result};

use super::render::{render_records, RenderOut};

/// Raw channels per Gaussian: offset 3, colour 3, scale 3, quaternion 4, opacity 1.
pub const RAW_CHANNELS: usize = GAUSS_RECORD;

/// Upper bounds for the sigmoid-activated offset and scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeRanges {
    pub o_max: f64,
    pub s_max: f64,
}

impl DecodeRanges {
    /// `o_max = 2 eps`, `s_max = 4 eps` for anchor voxel size `eps`.
    pub fn for_voxel(eps: f64) -> Self {
        Self { o_max: 2.0 * eps, s_max: 4.0 * eps }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<T: Real> Graph<T> {
    /// `[N, M * 14]` raw channels to `[N * M, 14]` records. The reachable centre cube
    /// is `anchor ± o_max / 2`; a zero quaternion decodes to the identity.
    pub fn decode_gaussians(&mut self, raw: Var, anchors: &[Vec3], ranges: DecodeRanges) -> Result<Var> {
        let rv = self.value_arc(raw);
        let sh = rv.shape();
        if sh.len() != 2 || sh[0] != anchors.len() || sh[1] % RAW_CHANNELS != 0 || sh[1] == 0 {
            return Err(Error::shape("decode_gaussians", format!("{sh:?} for {} anchors", anchors.len())));
        }
        let m = sh[1] / RAW_CHANNELS;
        let n = anchors.len() * m;
        let (o_max, s_max) = (ranges.o_max, ranges.s_max);
        let mut out = vec![T::zero(); n * RAW_CHANNELS];
        for (gi, (r, o)) in rv.data().chunks_exact(RAW_CHANNELS).zip(out.chunks_exact_mut(RAW_CHANNELS)).enumerate() {
            let r: Vec<f64> = r.iter().map(|&x| to_f64(x)).collect();
            let a = anchors[gi / m];
            for i in 0..3 {
                o[i] = lit(a[i] - 0.5 * o_max + sigmoid(r[i]) * o_max);
                o[3 + i] = lit(sigmoid(r[3 + i]));
                o[6 + i] = lit(sigmoid(r[6 + i]) * s_max);
            }
            let qn = r[9..13].iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..4 {
                o[9 + i] = if qn < 1e-12 { lit(if i == 0 { 1.0 } else { 0.0 }) } else { lit(r[9 + i] / qn) };
            }
            o[13] = lit(sigmoid(r[13]));
        }
        let out = Tensor::new(&[n, RAW_CHANNELS], out)?;
        let y = out.clone();
        Ok(self.push_op(
            out,
            &[raw],
            Box::new(move |g, s| {
                let mut gr = vec![T::zero(); rv.numel()];
                let rows = rv.data().chunks_exact(RAW_CHANNELS).zip(y.data().chunks_exact(RAW_CHANNELS));
                for (gi, (r, yv)) in rows.enumerate() {
                    let gy = &g.data()[gi * RAW_CHANNELS..][..RAW_CHANNELS];
                    let gx = &mut gr[gi * RAW_CHANNELS..][..RAW_CHANNELS];
                    for i in 0..3 {
                        let so = sigmoid(to_f64(r[i]));
                        gx[i] = gy[i] * lit(o_max * so * (1.0 - so));
                        let sc = to_f64(yv[3 + i]);
                        gx[3 + i] = gy[3 + i] * lit(sc * (1.0 - sc));
                        let ss = sigmoid(to_f64(r[6 + i]));
                        gx[6 + i] = gy[6 + i] * lit(s_max * ss * (1.0 - ss));
                    }
                    let qn = r[9..13].iter().map(|&x| to_f64(x) * to_f64(x)).sum::<f64>().sqrt();
                    if qn >= 1e-12 {
                        let dot: f64 = (0..4).map(|i| to_f64(gy[9 + i]) * to_f64(yv[9 + i])).sum();
                        for i in 0..4 {
                            gx[9 + i] = lit((to_f64(gy[9 + i]) - to_f64(yv[9 + i]) * dot) / qn);
                        }
                    }
                    let a = to_f64(yv[13]);
                    gx[13] = gy[13] * lit(a * (1.0 - a));
                }
                s.add(raw, Tensor::new(rv.shape(), gr).unwrap());
            }),
        ))
    }
}

/// Two-hidden-layer SiLU MLP emitting `per_token` Gaussians per anchor token.
#[derive(Clone, Debug)]
pub struct GaussianHead {
    pub fc1: Linear,
    pub fc2: Linear,
    pub out: Linear,
    pub per_token: usize,
    pub ranges: DecodeRanges,
}

impl GaussianHead {
    /// The output bias starts every Gaussian at the anchor with identity rotation and
    /// a scale of a quarter of `o_max`.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        hidden: usize,
        per_token: usize,
        ranges: DecodeRanges,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if per_token == 0 {
            return Err(Error::Config("need at least one Gaussian per token".into()));
        }
        let fc1 = Linear::new(store, &format!("{prefix}.fc1"), width, hidden, true, rng)?;
        let fc2 = Linear::new(store, &format!("{prefix}.fc2"), hidden, hidden, true, rng)?;
        let out = Linear::new(store, &format!("{prefix}.out"), hidden, per_token * RAW_CHANNELS, true, rng)?;
        store.value_mut(out.w).data_mut().iter_mut().for_each(|w| *w *= lit(0.1));
        let target = (0.25 * ranges.o_max / ranges.s_max).clamp(1e-3, 0.999);
        let scale_logit = (target / (1.0 - target)).ln();
        if let Some(b) = out.b {
            for (i, v) in store.value_mut(b).data_mut().iter_mut().enumerate() {
                *v = match i % RAW_CHANNELS {
                    6..=8 => lit(scale_logit),
                    9 => T::one(),
                    _ => T::zero(),
                };
            }
        }
        Ok(Self { fc1, fc2, out, per_token, ranges })
    }

    /// Tokens `[N, width]` at `anchors` to records `[N * per_token, 14]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: Var, anchors: &[Vec3]) -> Result<Var> {
        let h = self.fc1.forward(g, store, tokens)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, store, h)?;
        let h = g.silu(h);
        let raw = self.out.forward(g, store, h)?;
        g.decode_gaussians(raw, anchors, self.ranges)
    }
}

/// Decoded Gaussians in world space.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub centers: Tensor<f32>,
    pub colors: Tensor<f32>,
    pub scales: Tensor<f32>,
    pub rotations: Tensor<f32>,
    pub opacities: Tensor<f32>,
}

impl GaussianSet {
    pub fn empty() -> Self {
        Self::from_records(&[])
    }

    pub fn from_records(records: &[[f32; GAUSS_RECORD]]) -> Self {
        let n = records.len();
        let take = |lo: usize, w: usize| -> Vec<f32> { records.iter().flat_map(|r| r[lo..lo + w].iter().copied()).collect() };
        Self {
            centers: Tensor::new(&[n, 3], take(0, 3)).expect("shape"),
            colors: Tensor::new(&[n, 3], take(3, 3)).expect("shape"),
            scales: Tensor::new(&[n, 3], take(6, 3)).expect("shape"),
            rotations: Tensor::new(&[n, 4], take(9, 4)).expect("shape"),
            opacities: Tensor::new(&[n], take(13, 1)).expect("shape"),
        }
    }

    /// From a `[G, 14]` record tensor of any precision.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.ndim() != 2 || t.last_dim() != GAUSS_RECORD {
            return Err(Error::shape("GaussianSet::from_tensor", format!("{:?}", t.shape())));
        }
        let recs: Vec<[f32; GAUSS_RECORD]> =
            t.data().chunks_exact(GAUSS_RECORD).map(|r| std::array::from_fn(|i| to_f64(r[i]) as f32)).collect();
        Ok(Self::from_records(&recs))
    }

    pub fn len(&self) -> usize {
        self.opacities.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<[f32; GAUSS_RECORD]> {
        (0..self.len())
            .map(|i| {
                let mut r = [0.0; GAUSS_RECORD];
                r[..3].copy_from_slice(&self.centers.data()[i * 3..i * 3 + 3]);
                r[3..6].copy_from_slice(&self.colors.data()[i * 3..i * 3 + 3]);
                r[6..9].copy_from_slice(&self.scales.data()[i * 3..i * 3 + 3]);
                r[9..13].copy_from_slice(&self.rotations.data()[i * 4..i * 4 + 4]);
                r[13] = self.opacities.data()[i];
                r
            })
            .collect()
    }

    /// Checks unit quaternions, positive bounded scales and value ranges.
    pub fn validate(&self, s_max: f64) -> Result<()> {
        for (i, r) in self.records().iter().enumerate() {
            let qn = r[9..13].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let bad = (qn - 1.0).abs() > 1e-5
                || r[6..9].iter().any(|&s| !(s > 0.0 && s as f64 <= s_max * (1.0 + 1e-6)))
                || r[3..6].iter().any(|&c| !(0.0..=1.0).contains(&c))
                || !(r[13] > 0.0 && r[13] < 1.0)
                || r.iter().any(|x| !x.is_finite());
            if bad {
                return Err(Error::Invalid(format!("gaussian {i} violates its ranges: {r:?}")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_gaussian_records(path, &self.records())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_records(&read_gaussian_records(path)?))
    }

    pub fn render(&self, pose: &CameraPose) -> Result<RenderOut<f32>> {
        let flat: Vec<f64> = self.records().iter().flat_map(|r| r.iter().map(|&x| x as f64)).collect();
        render_records(&flat, pose)
    }

    /// `n` centres drawn with probability proportional to opacity.
    pub fn sample_centers(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let w: Vec<f64> = self.opacities.data().iter().map(|&a| a.max(0.0) as f64).collect();
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Vec::new();
        }
        let mut cdf = Vec::with_capacity(w.len());
        let mut acc = 0.0;
        for x in &w {
            acc += x / total;
            cdf.push(acc);
        }
        let c = self.centers.data();
        (0..n)
            .map(|_| {
                let r: f64 = rng.random();
                let i = cdf.partition_point(|&p| p < r).min(w.len() - 1);
                [c[i * 3] as f64, c[i * 3 + 1] as f64, c[i * 3 + 2] as f64]
            })
            .collect()
    }
}
