//! The two trainable models, built from a config.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, ParamStore, Real, Var};
use crate::encoder::{Encoder, InputView};
use crate::geoformer::Geoformer;
use crate::geometry::Vec3;
use crate::gsplat::{DecodeRanges, GaussianHead, GaussianSet};
use crate::occupancy::{select_anchors, OccupancyGrid, ProposalModel};
use crate::{Error, Result};

use super::config::Config;

/// Seed stream for parameter initialisation, separate from data sampling.
pub(crate) fn init_rng(cfg: &Config, stage: u8) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(stage as u64))
}

pub fn build_proposal(cfg: &Config) -> Result<(ParamStore<f32>, ProposalModel)> {
    let mut store = ParamStore::new();
    let model = ProposalModel::new(&mut store, cfg.proposal(), &mut init_rng(cfg, 1))?;
    Ok((store, model))
}

/// Stage-2 encoder, reconstruction transformer over anchor tokens and Gaussian head.
#[derive(Clone, Debug)]
pub struct ReconModel {
    pub encoder: Encoder,
    pub transformer: Geoformer,
    pub head: GaussianHead,
    pub anchor_res: usize,
}

impl ReconModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &Config, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::new(store, "s2.enc", cfg.encoder(), rng)?;
        let transformer = Geoformer::new(store, "s2.tf", cfg.transformer(), rng)?;
        let ranges = DecodeRanges::for_voxel(1.0 / cfg.anchor_res as f64);
        let head = GaussianHead::new(store, "s2.head", cfg.width, cfg.head_hidden, cfg.gaussians_per_token, ranges, rng)?;
        Ok(Self { encoder, transformer, head, anchor_res: cfg.anchor_res })
    }

    /// Gaussian records `[anchors * per_token, 14]`.
    pub fn records<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, views: &[InputView<T>], anchors: &[Vec3]) -> Result<Var> {
        if anchors.is_empty() {
            return Err(Error::Invalid("no anchors to reconstruct".into()));
        }
        let ctx = self.encoder.encode_views(g, store, views)?;
        let tokens = self.transformer.run(g, store, anchors, &ctx)?;
        self.head.forward(g, store, tokens, anchors)
    }

    pub fn predict(&self, store: &ParamStore<f32>, views: &[InputView<f32>], anchors: &[Vec3]) -> Result<GaussianSet> {
        let mut g = Graph::new();
        let r = self.records(&mut g, store, views, anchors)?;
        let v = g.value(r);
        if !v.is_finite() {
            return Err(Error::NonFinite("decoded Gaussians".into()));
        }
        GaussianSet::from_tensor(v)
    }
}

pub fn build_recon(cfg: &Config) -> Result<(ParamStore<f32>, ReconModel)> {
    let mut store = ParamStore::new();
    let model = ReconModel::new(&mut store, cfg, &mut init_rng(cfg, 2))?;
    Ok((store, model))
}

/// Anchors from a fine probability grid: max-pooled to `anchor_res`, thresholded, capped.
pub fn anchors_from_probabilities(grid: &OccupancyGrid, anchor_res: usize, threshold: f64, max_tokens: usize) -> Result<Vec<Vec3>> {
    let pooled = grid.max_pool(grid.resolution / anchor_res)?;
    Ok(select_anchors(&pooled, threshold as f32, max_tokens))
}
