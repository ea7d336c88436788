//! Run configuration as line-delimited `key = value` text.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::EncoderConfig;
use crate::geoformer::GeoformerConfig;
use crate::occupancy::ProposalConfig;
use crate::{Error, Result};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "GEO_RECON_SEED";

/// Where stage-2 anchors come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorSource {
    /// Ground-truth occupancy, max-pooled to the anchor resolution.
    Gt,
    /// Thresholded stage-1 predictions.
    Pred,
}

impl FromStr for AnchorSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gt" => Ok(Self::Gt),
            "pred" => Ok(Self::Pred),
            _ => Err(format!("expected gt or pred, got {s}")),
        }
    }
}

impl std::fmt::Display for AnchorSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gt => "gt",
            Self::Pred => "pred",
        })
    }
}

macro_rules! config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every tunable of data generation, both training stages, inference and evaluation.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl Config {
            /// Every key with its default, in declaration order.
            pub const KEYS: &'static [&'static str] = &[$( stringify!($field) ),*];

            fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => {
                        self.$field = value.parse::<$ty>().map_err(|e| {
                            Error::Config(format!("bad value {value:?} for {key}: {e}"))
                        })?;
                    } )*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Canonical text form; parsing it back yields the same config.
            pub fn to_text(&self) -> String {
                let mut s = String::new();
                $( let _ = writeln!(s, "{} = {}", stringify!($field), self.$field); )*
                s
            }
        }
    };
}

config! {
    seed: u64 = 0,
    /// Optimizer steps; when 0, `epochs` passes over the training scenes.
    steps: usize = 0,
    epochs: usize = 10,
    lr: f64 = 1e-4,
    /// Final learning rate of the cosine schedule as a fraction of `lr`.
    min_lr_ratio: f64 = 0.1,
    warmup_steps: usize = 20,
    beta1: f64 = 0.9,
    beta2: f64 = 0.95,
    weight_decay: f64 = 0.05,
    grad_clip: f64 = 4.0,
    /// Micro-batches averaged per optimizer step.
    grad_accum: usize = 1,
    max_tokens_train: usize = 4096,
    max_tokens_infer: usize = 16384,
    views_total: usize = 8,
    views_min: usize = 1,
    views_max: usize = 7,
    /// When nonzero every step uses exactly this many input views.
    fixed_views: usize = 0,
    /// Always use the same, evenly spread `views_total` views of each scene.
    fixed_view_set: bool = false,
    resolution: usize = 64,
    n_scenes: usize = 100,
    n_eval_scenes: usize = 20,
    n_prims: usize = 8,
    n_views: usize = 36,
    /// Resolution of the depth renders used to build occupancy ground truth.
    gt_render_res: usize = 512,
    width: usize = 48,
    heads: usize = 2,
    layers: usize = 2,
    points: usize = 4,
    ffn_mult: usize = 2,
    shared_dim: usize = 16,
    use_rope: bool = true,
    patch_high: usize = 8,
    patch_low: usize = 4,
    enc_high_layers: usize = 1,
    enc_high_heads: usize = 4,
    use_high: bool = true,
    use_low: bool = true,
    use_rays: bool = true,
    coarse_res: usize = 16,
    fine_res: usize = 128,
    occ_threshold: f64 = 0.5,
    anchor_res: usize = 32,
    anchor_source: AnchorSource = AnchorSource::Gt,
    gaussians_per_token: usize = 8,
    head_hidden: usize = 64,
    proxy_seed: u64 = crate::losses::DEFAULT_PROXY_SEED,
    fscore_tau: f64 = crate::losses::DEFAULT_FSCORE_TAU,
    eval_points: usize = 16_000,
    eval_views: String = "4,8,12".to_string(),
    log_every: usize = 10,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Applies `key=value` overrides (as given on the command line).
    pub fn with_overrides<S: AsRef<str>>(mut self, overrides: &[S]) -> Result<Self> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Replaces the seed with `GEO_RECON_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.views_total < 2 {
            return bad(format!("views_total {} leaves no target view", self.views_total));
        }
        if self.views_min < 1 || self.views_min > self.views_max || self.views_max > self.views_total - 1 {
            return bad(format!("input view range [{}, {}] must lie in [1, {}]", self.views_min, self.views_max, self.views_total - 1));
        }
        if self.fixed_views > self.views_total - 1 {
            return bad(format!("fixed_views {} exceeds views_total - 1", self.fixed_views));
        }
        if self.max_tokens_infer < self.max_tokens_train || self.max_tokens_train == 0 {
            return bad("max_tokens_infer must be >= max_tokens_train > 0".into());
        }
        if self.fine_res % self.coarse_res != 0 || self.fine_res % self.anchor_res != 0 {
            return bad(format!(
                "fine_res {} must be a multiple of coarse_res {} and anchor_res {}",
                self.fine_res, self.coarse_res, self.anchor_res
            ));
        }
        if self.grad_accum == 0 || self.lr <= 0.0 || self.grad_clip <= 0.0 {
            return bad("grad_accum, lr and grad_clip must be positive".into());
        }
        if self.resolution % (self.patch_high.max(self.patch_low)) != 0 {
            return bad(format!("resolution {} must be a multiple of the patch sizes", self.resolution));
        }
        self.eval_view_counts()?;
        self.encoder().validate()?;
        self.transformer().validate()
    }

    pub fn eval_view_counts(&self) -> Result<Vec<usize>> {
        self.eval_views
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad eval_views {:?}", self.eval_views))))
            .collect()
    }

    /// Total optimizer steps for a dataset of `n_scenes` training scenes.
    pub fn total_steps(&self, n_scenes: usize) -> usize {
        if self.steps > 0 {
            self.steps
        } else {
            self.epochs * n_scenes.max(1)
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            width: self.width,
            patch_high: self.patch_high,
            patch_low: self.patch_low,
            high_layers: self.enc_high_layers,
            high_heads: self.enc_high_heads,
            use_high: self.use_high,
            use_low: self.use_low,
            use_rays: self.use_rays,
            external_dim: None,
        }
    }

    pub fn transformer(&self) -> GeoformerConfig {
        GeoformerConfig {
            width: self.width,
            heads: self.heads,
            layers: self.layers,
            points: self.points,
            levels: self.encoder().strides().len(),
            ffn_mult: self.ffn_mult,
            shared_dim: self.shared_dim,
            use_rope: self.use_rope,
        }
    }

    pub fn proposal(&self) -> ProposalConfig {
        ProposalConfig { encoder: self.encoder(), transformer: self.transformer(), coarse_res: self.coarse_res, fine_res: self.fine_res }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.lr = 3.5e-4;
        c.anchor_source = AnchorSource::Pred;
        c.use_rope = false;
        let back = Config::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(Config::KEYS.len(), c.to_text().lines().count());
    }

    #[test]
    fn comments_overrides_and_errors() {
        let c = Config::parse("# desk run\nseed = 7  # trailing\n\nlayers=1\n").unwrap();
        assert_eq!((c.seed, c.layers), (7, 1));
        let c = c.with_overrides(&["heads=4", "width = 48"]).unwrap();
        assert_eq!(c.heads, 4);
        assert!(Config::parse("nonsense = 1").is_err());
        assert!(Config::parse("views_max = 8").is_err());
        assert!(Config::parse("seed = x").is_err());
        assert!(Config::parse("max_tokens_infer = 100").is_err());
        assert!(Config::parse("heads = 5").is_err());
    }
}
