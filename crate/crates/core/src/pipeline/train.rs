//! Serial training loop shared by both stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamStore};
use crate::geometry::Vec3;
use crate::gsplat::GaussianSet;
use crate::losses::{reconstruction_loss, LossBreakdown, PerceptualProxy, ViewTarget};
use crate::occupancy::{grid_to_tokens, ProposalModel};
use crate::{Error, Result};

use super::checkpoint::Checkpoint;
use super::config::{AnchorSource, Config};
use super::data::{input_views, sample_views, SceneData, ViewSample};
use super::models::{anchors_from_probabilities, build_proposal, build_recon, ReconModel};
use super::optim::{adamw_step, clip_grad_norm, lr_at, AdamState, AdamW};

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    /// Mean loss over the accumulated micro-batches.
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    /// Stage 2 only, summed over micro-batches then averaged.
    pub breakdown: Option<LossBreakdown>,
    pub n_inputs: usize,
    pub n_anchors: usize,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {:>6} lr {:.3e} loss {:.6} |g| {:.3} inputs {}", self.step, self.lr, self.loss, self.grad_norm, self.n_inputs)?;
        if let Some(b) = &self.breakdown {
            write!(f, " l2 {:.5} perc {:.5} mask {:.5} depth {:.5} anchors {}", b.img_l2, b.img_perc, b.mask, b.depth, self.n_anchors)?;
        }
        Ok(())
    }
}

enum StageModel {
    Proposal(ProposalModel),
    Recon { model: ReconModel, proposal: Option<(ProposalModel, ParamStore<f32>, Config)> },
}

/// Optimizer state plus model; snapshot with [`Trainer::checkpoint`], continue with
/// [`Trainer::resume`].
pub struct Trainer {
    pub cfg: Config,
    pub stage: u8,
    pub store: ParamStore<f32>,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub total_steps: usize,
    model: StageModel,
    proxy: PerceptualProxy,
    anchor_cache: Vec<Option<Vec<Vec3>>>,
}

fn data_rng(cfg: &Config, stage: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xda7a_0000 + stage as u64))
}

fn proposal_from(ckpt: &Checkpoint) -> Result<(ProposalModel, ParamStore<f32>, Config)> {
    if ckpt.stage != 1 {
        return Err(Error::Invalid(format!("expected a stage-1 checkpoint, got stage {}", ckpt.stage)));
    }
    let (mut store, model) = build_proposal(&ckpt.config)?;
    ckpt.restore_into(&mut store)?;
    Ok((model, store, ckpt.config.clone()))
}

impl Trainer {
    /// Fresh model. Stage 2 with predicted anchors needs the stage-1 checkpoint.
    pub fn new(stage: u8, cfg: Config, n_scenes: usize, stage1: Option<&Checkpoint>) -> Result<Self> {
        cfg.validate()?;
        let (store, model) = match stage {
            1 => {
                let (s, m) = build_proposal(&cfg)?;
                (s, StageModel::Proposal(m))
            }
            2 => {
                let (s, m) = build_recon(&cfg)?;
                let proposal = match (cfg.anchor_source, stage1) {
                    (AnchorSource::Pred, Some(c)) => Some(proposal_from(c)?),
                    (AnchorSource::Pred, None) => return Err(Error::Config("anchor_source = pred needs a stage-1 checkpoint".into())),
                    (AnchorSource::Gt, _) => None,
                };
                (s, StageModel::Recon { model: m, proposal })
            }
            s => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        };
        let adam = AdamState::new(&store);
        Ok(Self {
            rng: data_rng(&cfg, stage),
            total_steps: cfg.total_steps(n_scenes),
            proxy: PerceptualProxy::new(cfg.proxy_seed),
            anchor_cache: vec![None; n_scenes],
            cfg,
            stage,
            store,
            adam,
            step: 0,
            model,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, n_scenes: usize, stage1: Option<&Checkpoint>) -> Result<Self> {
        let mut t = Self::new(ckpt.stage, ckpt.config.clone(), n_scenes, stage1)?;
        ckpt.restore_into(&mut t.store)?;
        if ckpt.adam.m.len() != t.store.len() {
            return Err(Error::Invalid("optimizer state does not match the model".into()));
        }
        t.adam = ckpt.adam.clone();
        t.rng = ckpt.rng.clone();
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            stage: self.stage,
            step: self.step,
            config: self.cfg.clone(),
            params: self.store.clone(),
            adam: self.adam.clone(),
            rng: self.rng.clone(),
        }
    }

    /// One optimizer step over `grad_accum` sampled micro-batches.
    pub fn step(&mut self, scenes: &[SceneData]) -> Result<StepLog> {
        if self.anchor_cache.len() != scenes.len() {
            self.anchor_cache = vec![None; scenes.len()];
        }
        let k = self.cfg.grad_accum;
        let inv = 1.0 / k as f32;
        let (mut loss_sum, mut br_sum, mut n_inputs, mut n_anchors) = (0.0, None::<LossBreakdown>, 0, 0);
        self.store.zero_grads();
        for _ in 0..k {
            let sample = sample_views(&self.cfg, scenes, &mut self.rng)?;
            n_inputs = sample.inputs.len();
            let (loss, br, na) = self.micro_step(scenes, &sample, inv)?;
            loss_sum += loss;
            n_anchors = na;
            if let Some(b) = br {
                br_sum.get_or_insert_with(LossBreakdown::default).accumulate(&b);
            }
        }
        let grad_norm = clip_grad_norm(&mut self.store, self.cfg.grad_clip);
        let clipped_norm = self.store.iter().map(|(_, p)| p.grad.norm_sq() as f64).sum::<f64>().sqrt();
        let lr = lr_at(self.step as usize, self.total_steps, self.cfg.lr, self.cfg.warmup_steps, self.cfg.min_lr_ratio);
        adamw_step(&mut self.store, &mut self.adam, &AdamW::from_config(&self.cfg), lr);
        self.step += 1;
        let breakdown = br_sum.map(|mut b| {
            let s = 1.0 / k as f64;
            b = LossBreakdown { total: b.total * s, img_l2: b.img_l2 * s, img_perc: b.img_perc * s, mask: b.mask * s, depth: b.depth * s };
            b
        });
        Ok(StepLog { step: self.step, lr, loss: loss_sum / k as f64, grad_norm, clipped_norm, breakdown, n_inputs, n_anchors })
    }

    fn micro_step(&mut self, scenes: &[SceneData], sample: &ViewSample, scale: f32) -> Result<(f64, Option<LossBreakdown>, usize)> {
        let scene = &scenes[sample.scene];
        let views: Vec<_> = sample.inputs.iter().map(|&i| &scene.bundle.views[i]).collect();
        let inputs = input_views(&views);
        let mut g = Graph::new();
        let (loss, br, n_anchors) = match &self.model {
            StageModel::Proposal(m) => {
                let target = grid_to_tokens(&scene.occupancy.values, m.cfg.fine_res, m.cfg.coarse_res);
                let l = m.loss(&mut g, &self.store, &inputs, &target)?;
                (l, None, m.cfg.coarse_res.pow(3))
            }
            StageModel::Recon { model, proposal } => {
                let anchors = match proposal {
                    None => {
                        let slot = &mut self.anchor_cache[sample.scene];
                        if slot.is_none() {
                            *slot = Some(scene.gt_anchors(self.cfg.anchor_res, self.cfg.max_tokens_train)?);
                        }
                        slot.clone().unwrap()
                    }
                    Some((pm, ps, pc)) => {
                        let grid = pm.predict(ps, &inputs)?;
                        anchors_from_probabilities(&grid, self.cfg.anchor_res, pc.occ_threshold, self.cfg.max_tokens_train)?
                    }
                };
                debug_assert!(anchors.len() <= self.cfg.max_tokens_train);
                let recs = model.records(&mut g, &self.store, &inputs, &anchors)?;
                let mut renders = Vec::with_capacity(sample.targets.len());
                for &t in &sample.targets {
                    let packed = g.render_gaussians(recs, &scene.bundle.views[t].pose)?;
                    renders.push(g.split_render(packed)?);
                }
                let targets: Vec<ViewTarget<'_, f32>> = sample
                    .targets
                    .iter()
                    .map(|&t| {
                        let v = &scene.bundle.views[t];
                        ViewTarget { image: &v.rgb, mask: &v.mask, depth: &v.depth }
                    })
                    .collect();
                let (l, br) = reconstruction_loss(&mut g, &self.proxy, &renders, &targets)?;
                if !br.is_consistent() {
                    return Err(Error::Invalid(format!("loss breakdown does not add up: {br:?}")));
                }
                (l, Some(br), anchors.len())
            }
        };
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "stage-{} loss at step {} (scene {}, {} inputs)",
                self.stage,
                self.step,
                scene.name,
                sample.inputs.len()
            )));
        }
        let grads = g.backward(loss);
        grads.accumulate_into(&mut self.store, scale);
        if !self.store.iter().all(|(_, p)| p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("stage-{} gradients at step {}", self.stage, self.step)));
        }
        Ok((value, br, n_anchors))
    }

    /// Runs until `total_steps`, calling `log` after every step.
    pub fn run(&mut self, scenes: &[SceneData], mut log: impl FnMut(&StepLog)) -> Result<()> {
        while (self.step as usize) < self.total_steps {
            let s = self.step(scenes)?;
            log(&s);
        }
        Ok(())
    }

    /// Stage-2 prediction with the current weights (GT anchors).
    pub fn predict_gaussians(&self, scene: &SceneData, inputs: &[usize]) -> Result<GaussianSet> {
        let StageModel::Recon { model, .. } = &self.model else {
            return Err(Error::Invalid("not a stage-2 trainer".into()));
        };
        let views: Vec<_> = inputs.iter().map(|&i| &scene.bundle.views[i]).collect();
        let anchors = scene.gt_anchors(self.cfg.anchor_res, self.cfg.max_tokens_infer)?;
        model.predict(&self.store, &input_views(&views), &anchors)
    }

    /// Stage-1 prediction with the current weights.
    pub fn predict_occupancy(&self, scene: &SceneData, inputs: &[usize]) -> Result<crate::occupancy::OccupancyGrid> {
        let StageModel::Proposal(m) = &self.model else {
            return Err(Error::Invalid("not a stage-1 trainer".into()));
        };
        let views: Vec<_> = inputs.iter().map(|&i| &scene.bundle.views[i]).collect();
        m.predict(&self.store, &input_views(&views))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::data::generate;

    fn tiny() -> Config {
        Config {
            n_views: 10,
            resolution: 16,
            patch_high: 8,
            patch_low: 4,
            gt_render_res: 32,
            fine_res: 32,
            coarse_res: 8,
            anchor_res: 8,
            width: 12,
            heads: 2,
            layers: 1,
            enc_high_heads: 2,
            head_hidden: 16,
            gaussians_per_token: 2,
            views_total: 4,
            views_max: 3,
            steps: 4,
            warmup_steps: 1,
            lr: 1e-3,
            ..Config::default()
        }
    }

    #[test]
    fn both_stages_step_and_resume_identically() {
        let cfg = tiny();
        let scenes = generate(&cfg, 2, false).unwrap();
        for stage in [1u8, 2] {
            let mut a = Trainer::new(stage, cfg.clone(), scenes.len(), None).unwrap();
            let first = a.step(&scenes).unwrap();
            assert!(first.loss.is_finite() && first.grad_norm > 0.0);
            assert_eq!(first.breakdown.is_some(), stage == 2);
            let ck = Checkpoint::from_bytes(&a.checkpoint().to_bytes(), std::path::Path::new("mem")).unwrap();
            let mut b = Trainer::resume(&ck, scenes.len(), None).unwrap();
            let (la, lb) = (a.step(&scenes).unwrap(), b.step(&scenes).unwrap());
            assert_eq!(la, lb);
            assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
        }
    }

    #[test]
    fn pred_anchors_need_stage1() {
        let cfg = Config { anchor_source: AnchorSource::Pred, ..tiny() };
        assert!(Trainer::new(2, cfg.clone(), 1, None).is_err());
        let scenes = generate(&cfg, 1, false).unwrap();
        let s1 = Trainer::new(1, cfg.clone(), 1, None).unwrap().checkpoint();
        let mut t = Trainer::new(2, Config { occ_threshold: 0.0, ..cfg }, 1, Some(&s1)).unwrap();
        let log = t.step(&scenes).unwrap();
        assert!(log.n_anchors > 0 && log.loss.is_finite());
    }
}
