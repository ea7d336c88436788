//! Per-view image encoder producing a coarse semantic map and a finer texture/ray map,
//! both at the model width so cross-attention can treat them as two scale levels.

use rand::Rng;

use crate::diffcore::{lit, Conv2dSpec, Graph, ParamStore, Real, Tensor, Var};
use crate::geometry::{plucker_rays, CameraPose};
use crate::nn::{sincos_2d, Conv, Linear, Mlp, RmsNorm};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub width: usize,
    pub patch_high: usize,
    pub patch_low: usize,
    pub high_layers: usize,
    pub high_heads: usize,
    pub use_high: bool,
    pub use_low: bool,
    pub use_rays: bool,
    /// When set, the high-level map comes from precomputed features of this channel
    /// count (projected to `width`) instead of the built-in backbone.
    pub external_dim: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            width: 96,
            patch_high: 8,
            patch_low: 4,
            high_layers: 4,
            high_heads: 4,
            use_high: true,
            use_low: true,
            use_rays: true,
            external_dim: None,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_high && !self.use_low {
            return Err(Error::Config("encoder needs at least one feature level".into()));
        }
        if self.width == 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!("encoder width {} must be a positive multiple of 4", self.width)));
        }
        if self.patch_low < 2 || self.patch_low % 2 != 0 {
            return Err(Error::Config(format!("low-level patch {} must be even", self.patch_low)));
        }
        if self.patch_high == 0 || self.high_heads == 0 || self.width % self.high_heads != 0 {
            return Err(Error::Config("high-level patch and heads must divide the width".into()));
        }
        Ok(())
    }

    /// Strides of the emitted levels, in order.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = Vec::new();
        if self.use_high {
            s.push(self.patch_high);
        }
        if self.use_low {
            s.push(self.patch_low);
        }
        s
    }
}

/// One feature level of one view as a graph node `[h, w, C]`.
#[derive(Clone, Copy, Debug)]
pub struct Level {
    pub map: Var,
    pub stride: usize,
}

/// Levels of one view, high-level first.
#[derive(Clone, Debug)]
pub struct ViewFeatures {
    pub levels: Vec<Level>,
}

/// Detached per-view feature maps.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Real> {
    pub high: Option<Tensor<T>>,
    pub low: Option<Tensor<T>>,
    pub view_index: usize,
}

#[derive(Clone, Debug)]
struct TfLayer {
    norm1: RmsNorm,
    qkv: Linear,
    out: Linear,
    norm2: RmsNorm,
    ffn: Mlp,
}

#[derive(Clone, Debug)]
enum HighBranch {
    Backbone { patch: Conv, layers: Vec<TfLayer>, norm: RmsNorm },
    External { proj: Linear },
}

#[derive(Clone, Debug)]
struct LowBranch {
    conv1: Conv,
    conv2: Conv,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    high: Option<HighBranch>,
    low: Option<LowBranch>,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let high = if !cfg.use_high {
            None
        } else if let Some(ext) = cfg.external_dim {
            Some(HighBranch::External { proj: Linear::new(store, &format!("{prefix}.high.proj"), ext, c, true, rng)? })
        } else {
            let p = cfg.patch_high;
            let patch = Conv::new(store, &format!("{prefix}.high.patch"), p, 3, c, Conv2dSpec { stride: p, padding: 0 }, rng)?;
            let layers = (0..cfg.high_layers)
                .map(|i| {
                    let n = format!("{prefix}.high.layer{i}");
                    Ok(TfLayer {
                        norm1: RmsNorm::new(store, &format!("{n}.norm1"), c)?,
                        qkv: Linear::new(store, &format!("{n}.qkv"), c, 3 * c, true, rng)?,
                        out: Linear::new(store, &format!("{n}.out"), c, c, true, rng)?,
                        norm2: RmsNorm::new(store, &format!("{n}.norm2"), c)?,
                        ffn: Mlp::new(store, &format!("{n}.ffn"), c, 4 * c, c, rng)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = RmsNorm::new(store, &format!("{prefix}.high.norm"), c)?;
            Some(HighBranch::Backbone { patch, layers, norm })
        };
        let low = if cfg.use_low {
            let cin = if cfg.use_rays { 9 } else { 3 };
            let k2 = cfg.patch_low / 2;
            Some(LowBranch {
                conv1: Conv::new(store, &format!("{prefix}.low.conv1"), 2, cin, c / 2, Conv2dSpec { stride: 2, padding: 0 }, rng)?,
                conv2: Conv::new(store, &format!("{prefix}.low.conv2"), k2, c / 2, c, Conv2dSpec { stride: k2, padding: 0 }, rng)?,
            })
        } else {
            None
        };
        Ok(Self { cfg, high, low })
    }

    fn check_image<T: Real>(&self, image: &Tensor<T>) -> Result<(usize, usize)> {
        let s = image.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::shape("encoder", format!("image must be [H, W, 3], got {s:?}")));
        }
        for p in self.cfg.strides() {
            if s[0] % p != 0 || s[1] % p != 0 {
                return Err(Error::shape("encoder", format!("{}x{} not divisible by patch {p}", s[1], s[0])));
            }
        }
        Ok((s[0], s[1]))
    }

    /// Low-level map from the image and (optionally) its Plücker rays.
    pub fn encode_low<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: &Tensor<T>, pose: &CameraPose) -> Result<Var> {
        let low = self.low.as_ref().ok_or_else(|| Error::Config("low-level branch disabled".into()))?;
        let (h, w) = self.check_image(image)?;
        if pose.height() != h || pose.width() != w {
            return Err(Error::shape("encode_low", format!("image {w}x{h} vs pose {}x{}", pose.width(), pose.height())));
        }
        let x = if self.cfg.use_rays {
            let rays = plucker_rays(pose);
            let mut data = Vec::with_capacity(h * w * 9);
            for (px, ray) in image.data().chunks(3).zip(rays.rays.chunks(6)) {
                data.extend_from_slice(px);
                data.extend(ray.iter().map(|&r| lit::<T>(r)));
            }
            g.constant(Tensor::new(&[h, w, 9], data)?)
        } else {
            g.constant(image.clone())
        };
        let y = low.conv1.forward(g, store, x)?;
        let y = g.silu(y);
        low.conv2.forward(g, store, y)
    }

    /// High-level map from the built-in backbone, or from `external` features `[h, w, c_ext]`.
    pub fn encode_high<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        external: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let (h, w) = self.check_image(image)?;
        let p = self.cfg.patch_high;
        let (hh, ww) = (h / p, w / p);
        match self.high.as_ref().ok_or_else(|| Error::Config("high-level branch disabled".into()))? {
            HighBranch::External { proj } => {
                let f = external.ok_or_else(|| Error::Config("encoder expects external features".into()))?;
                let ext = self.cfg.external_dim.unwrap_or(0);
                if f.shape() != [hh, ww, ext] {
                    return Err(Error::shape("encode_high", format!("external features {:?}, expected [{hh}, {ww}, {ext}]", f.shape())));
                }
                let x = g.constant(f.clone());
                proj.forward(g, store, x)
            }
            HighBranch::Backbone { patch, layers, norm } => {
                let c = self.cfg.width;
                let img = g.constant(image.clone());
                let x = patch.forward(g, store, img)?;
                let pos = g.constant(sincos_2d(hh, ww, c).cast::<T>());
                let x = g.add(x, pos)?;
                let mut x = g.reshape(x, &[hh * ww, c])?;
                for layer in layers {
                    x = tf_layer(g, store, layer, x, self.cfg.high_heads)?;
                }
                let x = norm.forward(g, store, x)?;
                g.reshape(x, &[hh, ww, c])
            }
        }
    }

    /// All enabled levels of one view, high-level first.
    pub fn encode_view<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        pose: &CameraPose,
        external: Option<&Tensor<T>>,
    ) -> Result<ViewFeatures> {
        let mut levels = Vec::with_capacity(2);
        if self.cfg.use_high {
            levels.push(Level { map: self.encode_high(g, store, image, external)?, stride: self.cfg.patch_high });
        }
        if self.cfg.use_low {
            levels.push(Level { map: self.encode_low(g, store, image, pose)?, stride: self.cfg.patch_low });
        }
        Ok(ViewFeatures { levels })
    }

    /// Detached feature maps of one view.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        pose: &CameraPose,
        external: Option<&Tensor<T>>,
        view_index: usize,
    ) -> Result<FeaturePyramid<T>> {
        let mut g = Graph::new();
        let vf = self.encode_view(&mut g, store, image, pose, external)?;
        let mut it = vf.levels.iter();
        let high = if self.cfg.use_high { it.next().map(|l| g.value(l.map).clone()) } else { None };
        let low = if self.cfg.use_low { it.next().map(|l| g.value(l.map).clone()) } else { None };
        Ok(FeaturePyramid { high, low, view_index })
    }
}

/// A posed input image, optionally with precomputed high-level features `[h, w, c]`.
#[derive(Clone, Debug)]
pub struct InputView<T: Real> {
    pub image: Tensor<T>,
    pub pose: CameraPose,
    pub external: Option<Tensor<T>>,
}

impl<T: Real> InputView<T> {
    pub fn new(image: Tensor<T>, pose: CameraPose) -> Self {
        Self { image, pose, external: None }
    }
}

impl Encoder {
    /// Encodes every view and bundles the maps with their cameras for cross-attention.
    pub fn encode_views<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        views: &[InputView<T>],
    ) -> Result<crate::geoformer::CrossContext> {
        if views.is_empty() {
            return Err(Error::Invalid("at least one input view is required".into()));
        }
        let feats = views.iter().map(|v| self.encode_view(g, store, &v.image, &v.pose, v.external.as_ref())).collect::<Result<Vec<_>>>()?;
        crate::geoformer::CrossContext::new(feats, views.iter().map(|v| v.pose).collect())
    }
}

fn tf_layer<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, l: &TfLayer, x: Var, heads: usize) -> Result<Var> {
    let c = g.value(x).last_dim();
    let h = l.norm1.forward(g, store, x)?;
    let qkv = l.qkv.forward(g, store, h)?;
    let q = g.slice_last(qkv, 0, c)?;
    let k = g.slice_last(qkv, c, c)?;
    let v = g.slice_last(qkv, 2 * c, c)?;
    let a = g.attention(q, k, v, heads)?;
    let a = l.out.forward(g, store, a)?;
    let x = g.add(x, a)?;
    let h = l.norm2.forward(g, store, x)?;
    let f = l.ffn.forward(g, store, h)?;
    g.add(x, f)
}
