//! Scene bundles on disk plus their occupancy ground truth, and per-step view sampling.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;

use crate::encoder::InputView;
use crate::geometry::Vec3;
use crate::occupancy::{occupancy_from_scene, occupancy_gt, select_anchors, OccupancyGrid};
use crate::scenegen::{generate_scene, list_scenes, rig, scene_dir, scene_seed, SceneBundle, ViewBundle};
use crate::{Error, Result};

use super::config::Config;

/// Ground-truth occupancy file inside a scene directory.
pub const OCC_FILE: &str = "occupancy.occg";
/// Added to the base seed for the held-out split so it never repeats training scenes.
pub const EVAL_SEED_OFFSET: u64 = 0x9e37_79b9;

#[derive(Clone, Debug)]
pub struct SceneData {
    pub name: String,
    pub bundle: SceneBundle,
    /// Fine-resolution ground truth.
    pub occupancy: OccupancyGrid,
}

impl SceneData {
    /// Ground truth from analytic high-resolution depth when the scene description is
    /// available, otherwise from the stored depth maps.
    pub fn from_bundle(name: String, bundle: SceneBundle, cfg: &Config) -> Result<Self> {
        let occupancy = match &bundle.scene {
            Some(scene) => occupancy_from_scene(scene, &bundle.poses(), cfg.gt_render_res, cfg.fine_res)?,
            None => occupancy_gt(&bundle.views, cfg.fine_res)?,
        };
        Ok(Self { name, bundle, occupancy })
    }

    pub fn load(dir: &Path, cfg: &Config) -> Result<Self> {
        let bundle = SceneBundle::load(dir)?;
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let occ_path = dir.join(OCC_FILE);
        if occ_path.is_file() {
            let occupancy = OccupancyGrid::load(&occ_path)?;
            if occupancy.resolution != cfg.fine_res {
                return Err(Error::format(&occ_path, format!("resolution {} but config wants {}", occupancy.resolution, cfg.fine_res)));
            }
            return Ok(Self { name, bundle, occupancy });
        }
        Self::from_bundle(name, bundle, cfg)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.bundle.save(dir)?;
        self.occupancy.save(&dir.join(OCC_FILE))
    }

    /// Ground-truth anchors: occupancy max-pooled to `anchor_res`, capped at `max_tokens`.
    pub fn gt_anchors(&self, anchor_res: usize, max_tokens: usize) -> Result<Vec<Vec3>> {
        let pooled = self.occupancy.max_pool(self.occupancy.resolution / anchor_res)?;
        Ok(select_anchors(&pooled, 0.5, max_tokens))
    }
}

/// Generates `n` scenes with the configured rig. `eval` selects the held-out seed range.
pub fn generate(cfg: &Config, n: usize, eval: bool) -> Result<Vec<SceneData>> {
    let base = if eval { cfg.seed.wrapping_add(EVAL_SEED_OFFSET) } else { cfg.seed };
    let poses = rig(cfg.n_views, cfg.resolution)?;
    (0..n)
        .map(|i| {
            let scene = generate_scene(scene_seed(base, i), cfg.n_prims)?;
            SceneData::from_bundle(format!("scene_{i:04}"), SceneBundle::render(scene, &poses), cfg)
        })
        .collect()
}

/// Writes generated scenes under `root/scene_XXXX`.
pub fn write_scenes(root: &Path, scenes: &[SceneData]) -> Result<Vec<PathBuf>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dir = scene_dir(root, i);
            s.save(&dir)?;
            Ok(dir)
        })
        .collect()
}

pub fn load_dataset(root: &Path, cfg: &Config) -> Result<Vec<SceneData>> {
    list_scenes(root)?.iter().map(|d| SceneData::load(d, cfg)).collect()
}

pub fn input_views(views: &[&ViewBundle]) -> Vec<InputView<f32>> {
    views.iter().map(|v| InputView::new(v.rgb.clone(), v.pose)).collect()
}

/// One training sample: a scene and its input/target view indices.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSample {
    pub scene: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Draws a scene, `views_total` of its views, and an input count from the configured
/// range (or `fixed_views`). The remaining drawn views are the targets. With
/// `fixed_view_set` the views are the first `views_total` of the evaluation input order.
pub fn sample_views(cfg: &Config, scenes: &[SceneData], rng: &mut impl Rng) -> Result<ViewSample> {
    if scenes.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let scene = rng.random_range(0..scenes.len());
    let n_avail = scenes[scene].bundle.views.len();
    if n_avail < cfg.views_total {
        return Err(Error::Invalid(format!("{} has {n_avail} views, need {}", scenes[scene].name, cfg.views_total)));
    }
    let chosen: Vec<usize> = if cfg.fixed_view_set {
        let (pool, _) = eval_split(n_avail)?;
        pool[..cfg.views_total].to_vec()
    } else {
        sample(rng, n_avail, cfg.views_total).into_vec()
    };
    let n_in = if cfg.fixed_views > 0 { cfg.fixed_views } else { rng.random_range(cfg.views_min..=cfg.views_max) };
    Ok(ViewSample { scene, inputs: chosen[..n_in].to_vec(), targets: chosen[n_in..].to_vec() })
}

/// Fixed evaluation protocol over `n` views: four held-out views spread over the rig,
/// and the rest ordered so that every prefix is spread as evenly as possible (nested
/// input sets).
pub fn eval_split(n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 5 {
        return Err(Error::Invalid(format!("evaluation needs at least 5 views, scene has {n}")));
    }
    let held: Vec<usize> = (0..4).map(|k| (k * n / 4 + n / 8 + 1).min(n - 1)).collect();
    let rest: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
    let bits = usize::BITS - rest.len().leading_zeros();
    let order: Vec<usize> = (0..(1usize << bits)).map(|i| i.reverse_bits() >> (usize::BITS - bits)).filter(|&i| i < rest.len()).collect();
    Ok((order.into_iter().map(|i| rest[i]).collect(), held))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_split_is_a_partition_with_spread_prefix() {
        let (pool, held) = eval_split(36).unwrap();
        assert_eq!(held.len(), 4);
        let mut all: Vec<usize> = pool.iter().chain(&held).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..36).collect::<Vec<_>>());
        // first four inputs cover all quarters of the view list
        let mut q: Vec<usize> = pool[..4].iter().map(|&i| i * 4 / 36).collect();
        q.sort_unstable();
        assert_eq!(q, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sampling_respects_ranges() {
        let mut cfg = Config {
            n_views: 10,
            resolution: 16,
            patch_high: 8,
            gt_render_res: 32,
            fine_res: 32,
            coarse_res: 16,
            anchor_res: 16,
            ..Config::default()
        };
        let scenes = generate(&cfg, 2, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = sample_views(&cfg, &scenes, &mut rng).unwrap();
            assert!((1..=7).contains(&s.inputs.len()));
            assert_eq!(s.inputs.len() + s.targets.len(), 8);
        }
        cfg.fixed_views = 6;
        let s = sample_views(&cfg, &scenes, &mut rng).unwrap();
        assert_eq!((s.inputs.len(), s.targets.len()), (6, 2));
        let a = scenes[0].gt_anchors(16, 4096).unwrap();
        assert!(!a.is_empty());
        assert!(scenes[0].gt_anchors(16, 10).unwrap().len() <= 10);
    }
}
