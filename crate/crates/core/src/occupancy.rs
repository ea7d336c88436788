//! Occupancy grids over `[-0.5, 0.5]^3`: ground truth from posed depth, the coarse-to-fine
//! proposal model, its losses, and anchor selection for the reconstruction stage.

use std::path::Path;

use rand::Rng;

use crate::diffcore::{lit, Graph, ParamStore, Real, Tensor, Var};
use crate::encoder::{Encoder, EncoderConfig, InputView};
use crate::formats::{self, GridPayload};
use crate::geoformer::{Geoformer, GeoformerConfig};
use crate::geometry::{lattice_key, project, unproject, CameraPose, Vec3};
use crate::nn::Linear;
use crate::scenegen::{render_reference, SyntheticScene, ViewBundle};
use crate::{Error, Result};

pub const FINE_RES: usize = 128;
pub const COARSE_RES: usize = 16;
/// Probability clamp used when the loss is evaluated on probabilities.
pub const PROB_CLAMP: f64 = 1e-6;

/// Dense grid of values in `[0, 1]`; cell `(ix, iy, iz)` lives at `(ix * R + iy) * R + iz`
/// and covers `[-0.5 + i / R, -0.5 + (i + 1) / R]` per axis.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub values: Vec<f32>,
}

impl OccupancyGrid {
    pub fn new(resolution: usize, values: Vec<f32>) -> Result<Self> {
        if resolution == 0 || values.len() != resolution.pow(3) {
            return Err(Error::shape("OccupancyGrid", format!("{} values for resolution {resolution}", values.len())));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invalid("occupancy values must lie in [0, 1]".into()));
        }
        Ok(Self { resolution, values })
    }

    pub fn zeros(resolution: usize) -> Self {
        Self { resolution, values: vec![0.0; resolution.pow(3)] }
    }

    pub fn voxel_size(&self) -> f64 {
        1.0 / self.resolution as f64
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.resolution + iy) * self.resolution + iz
    }

    pub fn cell(&self, idx: usize) -> [usize; 3] {
        let r = self.resolution;
        [idx / (r * r), (idx / r) % r, idx % r]
    }

    pub fn center(&self, idx: usize) -> Vec3 {
        cell_center(self.cell(idx), self.resolution)
    }

    /// Cell containing `p`, if inside the cube.
    pub fn locate(&self, p: Vec3) -> Option<usize> {
        let r = self.resolution as i64;
        let mut c = [0usize; 3];
        for a in 0..3 {
            // centers sit on the lattice k*eps + eps/2, so rounding matches voxelization
            let k = lattice_key(p[a] - 0.5 * self.voxel_size(), self.voxel_size()) + r / 2;
            if !(0..r).contains(&k) {
                return None;
            }
            c[a] = k as usize;
        }
        Some(self.index(c[0], c[1], c[2]))
    }

    pub fn occupied(&self, threshold: f32) -> usize {
        self.values.iter().filter(|&&v| v > threshold).count()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied(0.5) as f64 / self.values.len() as f64
    }

    /// Intersection over union of the cells above 0.5.
    pub fn iou(&self, other: &OccupancyGrid) -> Result<f64> {
        if self.resolution != other.resolution {
            return Err(Error::shape("iou", format!("{} vs {}", self.resolution, other.resolution)));
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.values.iter().zip(&other.values) {
            let (a, b) = (a > 0.5, b > 0.5);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Max-pools by `factor` per axis.
    pub fn max_pool(&self, factor: usize) -> Result<OccupancyGrid> {
        if factor == 0 || self.resolution % factor != 0 {
            return Err(Error::shape("max_pool", format!("resolution {} by {factor}", self.resolution)));
        }
        let r = self.resolution / factor;
        let mut out = OccupancyGrid::zeros(r);
        for (i, &v) in self.values.iter().enumerate() {
            let c = self.cell(i);
            let j = out.index(c[0] / factor, c[1] / factor, c[2] / factor);
            out.values[j] = out.values[j].max(v);
        }
        Ok(out)
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Binary grids are stored bit-packed, others as floats.
    pub fn save(&self, path: &Path) -> Result<()> {
        let payload = if self.is_binary() {
            GridPayload::Binary(self.values.iter().map(|&v| v == 1.0).collect())
        } else {
            GridPayload::Probabilities(self.values.clone())
        };
        formats::write_grid(path, self.resolution, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (res, payload) = formats::read_grid(path)?;
        let values = match payload {
            GridPayload::Binary(b) => b.into_iter().map(|x| if x { 1.0 } else { 0.0 }).collect(),
            GridPayload::Probabilities(p) => p,
        };
        OccupancyGrid::new(res, values).map_err(|e| Error::format(path, e.to_string()))
    }
}

pub fn cell_center(c: [usize; 3], resolution: usize) -> Vec3 {
    c.map(|i| (i as f64 + 0.5) / resolution as f64 - 0.5)
}

/// Centers of the uniform coarse partition, in linear order.
pub fn coarse_centers(resolution: usize) -> Vec<Vec3> {
    let g = OccupancyGrid::zeros(resolution);
    (0..g.values.len()).map(|i| g.center(i)).collect()
}

/// Unprojects every foreground pixel and marks the cell it voxelizes to. Points outside
/// the cube are dropped.
pub fn occupancy_gt(bundles: &[ViewBundle], resolution: usize) -> Result<OccupancyGrid> {
    let mut grid = OccupancyGrid::zeros(resolution);
    for b in bundles {
        let w = b.width();
        for (i, (&m, &d)) in b.mask.data().iter().zip(b.depth.data()).enumerate() {
            if m == 0.0 || d <= 0.0 {
                continue;
            }
            let p = unproject((i % w) as f64, (i / w) as f64, d as f64, &b.pose)?;
            if let Some(idx) = grid.locate(p) {
                grid.values[idx] = 1.0;
            }
        }
    }
    Ok(grid)
}

/// Ground truth from depth rendered at `render_res` (the poses' intrinsics rescaled).
/// Fine grids need pixels smaller than a voxel to avoid holes.
pub fn occupancy_from_scene(scene: &SyntheticScene, poses: &[CameraPose], render_res: usize, resolution: usize) -> Result<OccupancyGrid> {
    let mut grid = OccupancyGrid::zeros(resolution);
    for pose in poses {
        let hi = CameraPose::new(pose.intrinsics.resized(render_res, render_res), pose.extrinsics)?;
        let view = render_reference(scene, &hi);
        let part = occupancy_gt(std::slice::from_ref(&view), resolution)?;
        for (a, b) in grid.values.iter_mut().zip(part.values) {
            *a = a.max(b);
        }
    }
    Ok(grid)
}

/// Independent reference: voxelized surface samples that some camera sees unoccluded.
pub fn visible_surface_occupancy(
    scene: &SyntheticScene,
    poses: &[CameraPose],
    samples: usize,
    resolution: usize,
    rng: &mut impl Rng,
) -> OccupancyGrid {
    let mut grid = OccupancyGrid::zeros(resolution);
    for p in scene.sample_surface(samples, rng) {
        let seen = poses.iter().any(|pose| {
            let pr = project(p, pose);
            if !pr.visible {
                return false;
            }
            let o = pose.origin();
            let d = crate::geometry::sub(p, o);
            matches!(scene.intersect(o, d), Some((t, _, _)) if t > 1.0 - 1e-6)
        });
        if seen {
            if let Some(idx) = grid.locate(p) {
                grid.values[idx] = 1.0;
            }
        }
    }
    grid
}

/// Cells above `threshold`, capped at `max_tokens` by probability (ties by index). An empty
/// selection falls back to the 64 most probable cells. Centers are returned in index order.
pub fn select_anchors(grid: &OccupancyGrid, threshold: f32, max_tokens: usize) -> Vec<Vec3> {
    let mut idx: Vec<usize> = (0..grid.values.len()).filter(|&i| grid.values[i] > threshold).collect();
    let by_prob = |a: &usize, b: &usize| grid.values[*b].total_cmp(&grid.values[*a]).then(a.cmp(b));
    if idx.is_empty() {
        idx = (0..grid.values.len()).collect();
        idx.sort_by(by_prob);
        idx.truncate(64.min(max_tokens));
    } else if idx.len() > max_tokens {
        idx.sort_by(by_prob);
        idx.truncate(max_tokens);
    }
    idx.sort_unstable();
    idx.into_iter().map(|i| grid.center(i)).collect()
}

/// Reorders a fine grid into per-coarse-token blocks: row `t` holds the `f^3` sub-cells
/// of coarse cell `t`, ordered `(dx, dy, dz)` with `dx` slowest.
pub fn grid_to_tokens(values: &[f32], fine: usize, coarse: usize) -> Vec<f32> {
    let f = fine / coarse;
    let mut out = vec![0.0; values.len()];
    for (i, &v) in values.iter().enumerate() {
        let (x, y, z) = (i / (fine * fine), (i / fine) % fine, i % fine);
        let t = ((x / f) * coarse + y / f) * coarse + z / f;
        let s = ((x % f) * f + y % f) * f + z % f;
        out[t * f * f * f + s] = v;
    }
    out
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid(tokens: &[f32], fine: usize, coarse: usize) -> Vec<f32> {
    let f = fine / coarse;
    let mut out = vec![0.0; tokens.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let (x, y, z) = (i / (fine * fine), (i / fine) % fine, i % fine);
        let t = ((x / f) * coarse + y / f) * coarse + z / f;
        let s = ((x % f) * f + y % f) * f + z % f;
        *o = tokens[t * f * f * f + s];
    }
    out
}

fn stable_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<T: Real> Graph<T> {
    /// Mean binary cross-entropy of `sigmoid(logits)` against constant targets `y`.
    pub fn bce_logits(&mut self, logits: Var, y: &[T]) -> Result<Var> {
        let lv = self.value_arc(logits);
        if lv.numel() != y.len() {
            return Err(Error::shape("bce_logits", format!("{} logits, {} targets", lv.numel(), y.len())));
        }
        let n = lv.numel().max(1) as f64;
        let mut total = 0.0;
        for (&x, &t) in lv.data().iter().zip(y) {
            let (x, t) = (x.to_f64().unwrap(), t.to_f64().unwrap());
            total -= t * stable_log_sigmoid(x) + (1.0 - t) * stable_log_sigmoid(-x);
        }
        let y = y.to_vec();
        Ok(self.push_op(
            Tensor::scalar(lit(total / n)),
            &[logits],
            Box::new(move |g, s| {
                let k = g.data()[0] / lit::<T>(n);
                let d = lv
                    .data()
                    .iter()
                    .zip(&y)
                    .map(|(&x, &t)| {
                        let p: T = lit(1.0 / (1.0 + (-x.to_f64().unwrap()).exp()));
                        (p - t) * k
                    })
                    .collect();
                s.add(logits, Tensor::new(lv.shape(), d).unwrap());
            }),
        ))
    }

    /// Mean binary cross-entropy on probabilities clamped to `[1e-6, 1 - 1e-6]`.
    pub fn bce_probs(&mut self, p: Var, y: &[T]) -> Result<Var> {
        let pv = self.value_arc(p);
        if pv.numel() != y.len() {
            return Err(Error::shape("bce_probs", format!("{} probabilities, {} targets", pv.numel(), y.len())));
        }
        let n = pv.numel().max(1) as f64;
        let clamp = |v: T| v.to_f64().unwrap().clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let total: f64 = pv
            .data()
            .iter()
            .zip(y)
            .map(|(&v, &t)| {
                let (q, t) = (clamp(v), t.to_f64().unwrap());
                -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
            })
            .sum();
        let y = y.to_vec();
        Ok(self.push_op(
            Tensor::scalar(lit(total / n)),
            &[p],
            Box::new(move |g, s| {
                let k = g.data()[0].to_f64().unwrap() / n;
                let d = pv
                    .data()
                    .iter()
                    .zip(&y)
                    .map(|(&v, &t)| {
                        let raw = v.to_f64().unwrap();
                        if raw < PROB_CLAMP || raw > 1.0 - PROB_CLAMP {
                            return T::zero();
                        }
                        let t = t.to_f64().unwrap();
                        lit(k * (-t / raw + (1.0 - t) / (1.0 - raw)))
                    })
                    .collect();
                s.add(p, Tensor::new(pv.shape(), d).unwrap());
            }),
        ))
    }

    /// Scene-class affinity loss `-(ln P + ln R + ln S)` with soft precision, recall and
    /// specificity of probabilities `p` against binary targets `y`. Terms whose
    /// denominator is zero are left out.
    pub fn affinity_loss(&mut self, p: Var, y: &[T]) -> Result<Var> {
        let pv = self.value_arc(p);
        if pv.numel() != y.len() {
            return Err(Error::shape("affinity_loss", format!("{} probabilities, {} targets", pv.numel(), y.len())));
        }
        let (mut spy, mut sp, mut sy, mut sneg, mut sny) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&pi, &yi) in pv.data().iter().zip(y) {
            let (pi, yi) = (pi.to_f64().unwrap(), yi.to_f64().unwrap());
            spy += pi * yi;
            sp += pi;
            sy += yi;
            sneg += (1.0 - pi) * (1.0 - yi);
            sny += 1.0 - yi;
        }
        const TINY: f64 = 1e-12;
        let mut loss = 0.0;
        // each active term contributes d/dp_i of -ln(num/den)
        let precision = sp > 0.0;
        let recall = sy > 0.0;
        let specificity = sny > 0.0;
        if precision {
            loss -= (spy / sp).max(TINY).ln();
        }
        if recall {
            loss -= (spy / sy).max(TINY).ln();
        }
        if specificity {
            loss -= (sneg / sny).max(TINY).ln();
        }
        let y = y.to_vec();
        Ok(self.push_op(
            Tensor::scalar(lit(loss)),
            &[p],
            Box::new(move |g, s| {
                let k = g.data()[0].to_f64().unwrap();
                let d = y
                    .iter()
                    .map(|&yi| {
                        let yi = yi.to_f64().unwrap();
                        let mut gi = 0.0;
                        if precision && spy / sp > TINY {
                            gi -= yi / spy - 1.0 / sp;
                        }
                        if recall && spy / sy > TINY {
                            gi -= yi / spy;
                        }
                        if specificity && sneg / sny > TINY {
                            gi += (1.0 - yi) / sneg;
                        }
                        lit::<T>(k * gi)
                    })
                    .collect();
                s.add(p, Tensor::new(pv.shape(), d).unwrap());
            }),
        ))
    }
}

/// Binary cross-entropy plus affinity on a probability grid (clamped to `[1e-6, 1 - 1e-6]`).
pub fn stage1_loss(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<f64> {
    if pred.resolution != gt.resolution {
        return Err(Error::shape("stage1_loss", format!("{} vs {}", pred.resolution, gt.resolution)));
    }
    let mut g = Graph::<f64>::new();
    let clamped: Vec<f64> = pred.values.iter().map(|&v| (v as f64).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect();
    let p = g.constant(Tensor::new(&[clamped.len()], clamped)?);
    let y: Vec<f64> = gt.values.iter().map(|&v| v as f64).collect();
    let bce = g.bce_probs(p, &y)?;
    let aff = g.affinity_loss(p, &y)?;
    let total = g.add(bce, aff)?;
    Ok(g.value(total).data()[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProposalConfig {
    pub encoder: EncoderConfig,
    pub transformer: GeoformerConfig,
    pub coarse_res: usize,
    pub fine_res: usize,
}

impl ProposalConfig {
    pub fn sub_cells(&self) -> usize {
        (self.fine_res / self.coarse_res).pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_res == 0 || self.fine_res % self.coarse_res != 0 {
            return Err(Error::Config(format!("fine resolution {} is not a multiple of {}", self.fine_res, self.coarse_res)));
        }
        if self.transformer.levels != self.encoder.strides().len() || self.transformer.width != self.encoder.width {
            return Err(Error::Config("proposal transformer must match the encoder levels and width".into()));
        }
        Ok(())
    }
}

/// Encoder, proposal transformer over the dense coarse grid, and a linear head that
/// expands every coarse token into its fine sub-cells.
#[derive(Clone, Debug)]
pub struct ProposalModel {
    pub cfg: ProposalConfig,
    pub encoder: Encoder,
    pub transformer: Geoformer,
    pub head: Linear,
}

/// Initial head bias: sigmoid(-2) ~ 0.12 prior occupancy.
pub const HEAD_BIAS_INIT: f64 = -2.0;

impl ProposalModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ProposalConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, "s1.enc", cfg.encoder.clone(), rng)?;
        let transformer = Geoformer::new(store, "s1.tf", cfg.transformer.clone(), rng)?;
        let head = Linear::new(store, "s1.head", cfg.transformer.width, cfg.sub_cells(), true, rng)?;
        if let Some(b) = head.b {
            store.value_mut(b).data_mut().iter_mut().for_each(|v| *v = lit(HEAD_BIAS_INIT));
        }
        Ok(Self { cfg, encoder, transformer, head })
    }

    /// Logits `[coarse^3, sub_cells]` in token layout (see [`grid_to_tokens`]).
    pub fn logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, views: &[InputView<T>]) -> Result<Var> {
        let ctx = self.encoder.encode_views(g, store, views)?;
        let coords = coarse_centers(self.cfg.coarse_res);
        let x = self.transformer.run(g, store, &coords, &ctx)?;
        self.head.forward(g, store, x)
    }

    /// Stage-1 objective on token-layout targets.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, views: &[InputView<T>], target_tokens: &[T]) -> Result<Var> {
        let logits = self.logits(g, store, views)?;
        let bce = g.bce_logits(logits, target_tokens)?;
        let p = g.sigmoid(logits);
        let aff = g.affinity_loss(p, target_tokens)?;
        g.add(bce, aff)
    }

    /// Probability grid at the fine resolution.
    pub fn predict(&self, store: &ParamStore<f32>, views: &[InputView<f32>]) -> Result<OccupancyGrid> {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, store, views)?;
        let probs: Vec<f32> = g.value(logits).data().iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("proposal logits".into()));
        }
        OccupancyGrid::new(self.cfg.fine_res, tokens_to_grid(&probs, self.cfg.fine_res, self.cfg.coarse_res))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckOptions};
    use crate::geometry::voxelize_on;
    use crate::scenegen::{default_rig, generate_scene, render_views, Primitive};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_masks_give_empty_grid() {
        let scene = SyntheticScene::new(vec![Primitive::sphere([0.0; 3], 0.1, [0.5; 3])], 0).unwrap();
        let mut views = render_views(&scene, &default_rig(16)[..2]);
        for v in &mut views {
            v.mask.data_mut().iter_mut().for_each(|m| *m = 0.0);
        }
        assert_eq!(occupancy_gt(&views, 32).unwrap().occupied(0.5), 0);
    }

    #[test]
    fn gt_matches_voxelize_on_shifted_lattice() {
        let scene = generate_scene(4, 4).unwrap();
        let views = render_views(&scene, &default_rig(32)[..3]);
        let grid = occupancy_gt(&views, 64).unwrap();
        let mut pts = Vec::new();
        for v in &views {
            for (i, &d) in v.depth.data().iter().enumerate() {
                if d > 0.0 {
                    pts.push(unproject((i % 32) as f64, (i / 32) as f64, d as f64, &v.pose).unwrap());
                }
            }
        }
        let eps = 1.0 / 64.0;
        let centers: Vec<_> = voxelize_on(&pts, eps, eps / 2.0).unwrap().into_iter().filter(|c| c.iter().all(|x| x.abs() < 0.5)).collect();
        assert_eq!(grid.occupied(0.5), centers.len());
        for c in centers {
            assert_eq!(grid.values[grid.locate(c).unwrap()], 1.0);
        }
    }

    #[test]
    fn gt_is_order_invariant_and_idempotent() {
        let scene = generate_scene(5, 3).unwrap();
        let views = render_views(&scene, &default_rig(24)[..4]);
        let a = occupancy_gt(&views, 32).unwrap();
        let rev: Vec<_> = views.iter().rev().cloned().collect();
        assert_eq!(a, occupancy_gt(&rev, 32).unwrap());
        let dup: Vec<_> = views.iter().chain(views.iter()).cloned().collect();
        assert_eq!(a, occupancy_gt(&dup, 32).unwrap());
    }

    #[test]
    fn coarse_centers_partition_the_cube() {
        let c = coarse_centers(16);
        assert_eq!(c.len(), 4096);
        assert_eq!(c[0], [-0.5 + 1.0 / 32.0; 3]);
        assert_eq!(c[4095], [0.5 - 1.0 / 32.0; 3]);
        let g = OccupancyGrid::zeros(16);
        for (i, p) in c.iter().enumerate() {
            assert_eq!(g.locate(*p), Some(i));
        }
    }

    #[test]
    fn token_layout_round_trip() {
        let vals: Vec<f32> = (0..4096).map(|i| (i % 97) as f32 / 97.0).collect();
        let t = grid_to_tokens(&vals, 16, 4);
        assert_eq!(tokens_to_grid(&t, 16, 4), vals);
        // first token row holds the 4^3 block at the origin corner
        let g = OccupancyGrid::zeros(16);
        assert_eq!(t[1], vals[g.index(0, 0, 1)]);
        assert_eq!(t[4], vals[g.index(0, 1, 0)]);
        assert_eq!(t[16], vals[g.index(1, 0, 0)]);
        assert_eq!(t[64], vals[g.index(0, 0, 4)]);
    }

    #[test]
    fn select_thresholds_caps_and_falls_back() {
        let mut g = OccupancyGrid::zeros(8);
        for i in [3usize, 77, 300, 511] {
            g.values[i] = 1.0;
        }
        let sel = select_anchors(&g, 0.5, 100);
        assert_eq!(sel, [3usize, 77, 300, 511].map(|i| g.center(i)).to_vec());

        let c = OccupancyGrid::new(8, vec![0.9; 512]).unwrap();
        let sel = select_anchors(&c, 0.5, 100);
        assert_eq!(sel, (0..100).map(|i| c.center(i)).collect::<Vec<_>>());

        let z = OccupancyGrid::new(8, (0..512).map(|i| i as f32 / 2048.0).collect()).unwrap();
        let sel = select_anchors(&z, 0.5, 1000);
        assert_eq!(sel.len(), 64);
        assert_eq!(sel[0], z.center(448));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let r = OccupancyGrid::new(8, (0..512).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            let cap = rng.random_range(1..300);
            let a = select_anchors(&r, 0.5, cap);
            assert!(a.len() <= cap);
            assert_eq!(a, select_anchors(&r, 0.5, cap));
        }
    }

    #[test]
    fn stage1_loss_perfect_and_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = OccupancyGrid::new(16, (0..4096).map(|_| if rng.random_bool(0.05) { 1.0 } else { 0.0 }).collect()).unwrap();
        assert!(stage1_loss(&gt, &gt).unwrap() < 1e-4);
        let inv = OccupancyGrid::new(16, gt.values.iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(stage1_loss(&inv, &gt).unwrap() > 5.0);
        assert!(stage1_loss(&OccupancyGrid::zeros(8), &gt).is_err());
    }

    #[test]
    fn affinity_and_bce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..512).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
        let p = Tensor::uniform(&[512], 0.05, 0.95, &mut rng);
        let rep = grad_check("affinity", &[p.clone()], GradCheckOptions::default(), |g, v| g.affinity_loss(v[0], &y)).unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
        let rep = grad_check("bce_probs", &[p], GradCheckOptions::default(), |g, v| g.bce_probs(v[0], &y)).unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
        let x = Tensor::randn(&[512], 3.0, &mut rng);
        let rep = grad_check("bce_logits", &[x], GradCheckOptions::default(), |g, v| g.bce_logits(v[0], &y)).unwrap();
        assert!(rep.passes(1e-6), "{rep:?}");
    }

    #[test]
    fn bce_logits_is_stable_for_large_inputs() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(&[2], vec![80.0, -80.0]).unwrap());
        let l = g.bce_logits(x, &[1.0, 0.0]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-6);
        let x = g.input(Tensor::new(&[1], vec![-80.0]).unwrap());
        let l = g.bce_logits(x, &[1.0]).unwrap();
        assert!((g.value(l).data()[0] - 80.0).abs() < 1e-3);
    }

    #[test]
    fn grid_file_round_trip_and_pool() {
        let dir = tempfile::tempdir().unwrap();
        let mut g = OccupancyGrid::zeros(16);
        g.values[100] = 1.0;
        g.values[4000] = 1.0;
        g.save(&dir.path().join("g.occ")).unwrap();
        assert_eq!(OccupancyGrid::load(&dir.path().join("g.occ")).unwrap(), g);
        let pooled = g.max_pool(4).unwrap();
        assert_eq!(pooled.occupied(0.5), 2);
        g.values[5] = 0.25;
        g.save(&dir.path().join("p.occ")).unwrap();
        assert_eq!(OccupancyGrid::load(&dir.path().join("p.occ")).unwrap(), g);
    }

    fn tiny_proposal(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> ProposalModel {
        let cfg = ProposalConfig {
            encoder: EncoderConfig { width: 12, high_layers: 1, high_heads: 2, ..Default::default() },
            transformer: GeoformerConfig {
                width: 12,
                heads: 2,
                layers: 1,
                points: 1,
                levels: 2,
                ffn_mult: 2,
                shared_dim: 4,
                use_rope: true,
            },
            coarse_res: 2,
            fine_res: 8,
        };
        ProposalModel::new(store, cfg, rng).unwrap()
    }

    #[test]
    fn constant_head_gives_constant_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let m = tiny_proposal(&mut store, &mut rng);
        m.head.zero_out(&mut store);
        store.value_mut(m.head.b.unwrap()).data_mut().iter_mut().for_each(|v| *v = 0.7);
        let pose = default_rig(16)[0];
        let f32store = store.cast::<f32>();
        let views32 = vec![InputView::new(Tensor::<f32>::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng), pose)];
        let grid = m.predict(&f32store, &views32).unwrap();
        assert_eq!(grid.resolution, 8);
        let expect = 1.0 / (1.0 + (-0.7f32).exp());
        assert!(grid.values.iter().all(|&v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn loss_reaches_encoder_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let m = tiny_proposal(&mut store, &mut rng);
        let pose = default_rig(16)[3];
        let views = vec![InputView::new(Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng), pose)];
        let y: Vec<f64> = (0..512).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
        let mut g = Graph::new();
        let l = m.loss(&mut g, &store, &views, &y).unwrap();
        let grads = g.backward(l);
        let id = store.id("s1.enc.low.conv1.w").unwrap();
        let gw = grads.param(id).unwrap();
        assert!(gw.is_finite() && gw.norm_sq() > 0.0);
        let id = store.id("s1.enc.high.patch.w").unwrap();
        assert!(grads.param(id).unwrap().norm_sq() > 0.0);
    }

    #[test]
    fn eight_primitive_scenes_have_plausible_fractions() {
        let rig = default_rig(32);
        for seed in 0..3 {
            let scene = generate_scene(seed, 8).unwrap();
            let grid = occupancy_from_scene(&scene, &rig, 192, 64).unwrap();
            let f = grid.occupied_fraction();
            assert!((0.005..0.2).contains(&f), "seed {seed}: {f}");
        }
    }
}
