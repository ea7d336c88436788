//! Two-stage inference and the held-out evaluation protocol.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::ParamStore;
use crate::encoder::InputView;
use crate::geometry::Vec3;
use crate::gsplat::GaussianSet;
use crate::losses::{chamfer, fscore, psnr, ssim, MetricsRow, PerceptualProxy};
use crate::occupancy::{OccupancyGrid, ProposalModel};
use crate::{Error, Result};

use super::checkpoint::Checkpoint;
use super::config::Config;
use super::data::{eval_split, input_views, SceneData};
use super::models::{anchors_from_probabilities, build_proposal, build_recon, ReconModel};

/// Output of one reconstruction.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub gaussians: GaussianSet,
    /// Stage-1 probabilities, when the proposal model ran.
    pub occupancy: Option<OccupancyGrid>,
    pub anchors: Vec<Vec3>,
}

/// Trained models loaded for inference.
pub struct Predictor {
    pub cfg: Config,
    recon: ReconModel,
    recon_store: ParamStore<f32>,
    proposal: Option<(ProposalModel, ParamStore<f32>, Config)>,
}

impl Predictor {
    pub fn from_checkpoints(stage2: &Checkpoint, stage1: Option<&Checkpoint>) -> Result<Self> {
        if stage2.stage != 2 {
            return Err(Error::Invalid(format!("expected a stage-2 checkpoint, got stage {}", stage2.stage)));
        }
        let (mut recon_store, recon) = build_recon(&stage2.config)?;
        stage2.restore_into(&mut recon_store)?;
        let proposal = match stage1 {
            Some(c) if c.stage == 1 => {
                let (mut s, m) = build_proposal(&c.config)?;
                c.restore_into(&mut s)?;
                Some((m, s, c.config.clone()))
            }
            Some(c) => return Err(Error::Invalid(format!("expected a stage-1 checkpoint, got stage {}", c.stage))),
            None => None,
        };
        Ok(Self { cfg: stage2.config.clone(), recon, recon_store, proposal })
    }

    pub fn has_proposal(&self) -> bool {
        self.proposal.is_some()
    }

    /// Anchors come from the proposal model when loaded, else from `gt` (max-pooled).
    pub fn reconstruct(&self, views: &[InputView<f32>], gt: Option<&OccupancyGrid>) -> Result<Reconstruction> {
        let cap = self.cfg.max_tokens_infer;
        let (occupancy, anchors) = match (&self.proposal, gt) {
            (Some((m, s, pc)), _) => {
                let grid = m.predict(s, views)?;
                let a = anchors_from_probabilities(&grid, self.cfg.anchor_res, pc.occ_threshold, cap)?;
                (Some(grid), a)
            }
            (None, Some(g)) => (None, anchors_from_probabilities(g, self.cfg.anchor_res, 0.5, cap)?),
            (None, None) => return Err(Error::Config("no stage-1 checkpoint and no ground-truth occupancy for anchors".into())),
        };
        if anchors.is_empty() {
            return Err(Error::Invalid("no occupied anchor cells".into()));
        }
        let gaussians = self.recon.predict(&self.recon_store, views, &anchors)?;
        Ok(Reconstruction { gaussians, occupancy, anchors })
    }
}

/// Metrics for every scene at every input-view count, using the fixed split from
/// [`eval_split`]. Held-out views are rendered and compared; geometry compares
/// opacity-weighted Gaussian centers against points on the true surfaces.
pub fn evaluate(pred: &Predictor, scenes: &[SceneData], counts: &[usize]) -> Result<Vec<MetricsRow>> {
    let cfg = &pred.cfg;
    let proxy = PerceptualProxy::new(cfg.proxy_seed);
    let mut rows = Vec::new();
    for (si, scene) in scenes.iter().enumerate() {
        let (pool, held) = eval_split(scene.bundle.views.len())?;
        let surface = match &scene.bundle.scene {
            Some(s) => s.sample_surface(cfg.eval_points, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ si as u64)),
            None => return Err(Error::Invalid(format!("{} has no scene description for geometry metrics", scene.name))),
        };
        for &n in counts {
            if n == 0 || n > pool.len() {
                return Err(Error::Config(format!("cannot use {n} input views out of {}", pool.len())));
            }
            let views: Vec<_> = pool[..n].iter().map(|&i| &scene.bundle.views[i]).collect();
            let rec = pred.reconstruct(&input_views(&views), Some(&scene.occupancy))?;
            let (mut p, mut s, mut q) = (0.0, 0.0, 0.0);
            for &h in &held {
                let gt = &scene.bundle.views[h];
                let out = rec.gaussians.render(&gt.pose)?;
                p += psnr(&out.image, &gt.rgb)?;
                s += ssim(&out.image, &gt.rgb)?;
                q += proxy.eval(&out.image, &gt.rgb)?;
            }
            let k = held.len() as f64;
            let pts = rec.gaussians.sample_centers(cfg.eval_points, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (si as u64) << 8 ^ n as u64));
            let (c, f) =
                if pts.is_empty() { (f64::INFINITY, 0.0) } else { (chamfer(&pts, &surface)?, fscore(&pts, &surface, cfg.fscore_tau)?) };
            rows.push(MetricsRow {
                scene: scene.name.clone(),
                n_input_views: n,
                psnr: p / k,
                ssim: s / k,
                perc_proxy: q / k,
                chamfer: c,
                fscore: f,
            });
        }
    }
    Ok(rows)
}

/// Mean of each metric per view count, in ascending count order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    let mut counts: Vec<usize> = rows.iter().map(|r| r.n_input_views).collect();
    counts.sort_unstable();
    counts.dedup();
    counts
        .into_iter()
        .map(|n| {
            let sel: Vec<_> = rows.iter().filter(|r| r.n_input_views == n).collect();
            let m = |f: fn(&MetricsRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64;
            MetricsRow {
                scene: "mean".into(),
                n_input_views: n,
                psnr: m(|r| r.psnr),
                ssim: m(|r| r.ssim),
                perc_proxy: m(|r| r.perc_proxy),
                chamfer: m(|r| r.chamfer),
                fscore: m(|r| r.fscore),
            }
        })
        .collect()
}
