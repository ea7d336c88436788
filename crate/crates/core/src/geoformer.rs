//! Transformer over 3D anchor tokens: rotary self-attention on anchor coordinates and
//! deformable cross-attention into multi-view feature maps.

use rand::Rng;

use crate::diffcore::{DeformLayout, Graph, ParamStore, Real, Tensor, Var};
use crate::encoder::ViewFeatures;
use crate::geometry::{project, CameraPose, Vec3};
use crate::nn::{Linear, Mlp, RmsNorm};
use crate::{Error, Result};

/// Frequencies per axis of the anchor coordinate embedding.
pub const FOURIER_FREQS: usize = 6;
pub const FOURIER_DIM: usize = 3 * 2 * FOURIER_FREQS;

#[derive(Clone, Debug, PartialEq)]
pub struct GeoformerConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Sampling points per head and level.
    pub points: usize,
    pub levels: usize,
    pub ffn_mult: usize,
    pub shared_dim: usize,
    pub use_rope: bool,
}

impl GeoformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {}", self.heads, self.width)));
        }
        if self.use_rope && (self.width / self.heads) % 6 != 0 {
            return Err(Error::Config(format!("head dim {} must be divisible by 6 for 3D rotary embedding", self.width / self.heads)));
        }
        if self.points == 0 || self.levels == 0 {
            return Err(Error::Config("need at least one sampling point and one level".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Anchor coordinates with their current features.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet<T: Real> {
    pub coords: Vec<Vec3>,
    pub feats: Tensor<T>,
}

impl<T: Real> AnchorSet<T> {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Sinusoidal coordinate features `sin/cos(2^k pi x)` per axis, `[N, 36]`.
pub fn fourier_embed(coords: &[Vec3]) -> Tensor<f64> {
    let mut out = Vec::with_capacity(coords.len() * FOURIER_DIM);
    for c in coords {
        for &x in c {
            for k in 0..FOURIER_FREQS {
                let a = (1u32 << k) as f64 * std::f64::consts::PI * x;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
    }
    Tensor::new(&[coords.len(), FOURIER_DIM], out).expect("shape")
}

/// Per-view feature maps and cameras seen by cross-attention.
#[derive(Clone, Debug)]
pub struct CrossContext {
    pub views: Vec<ViewFeatures>,
    pub poses: Vec<CameraPose>,
}

impl CrossContext {
    pub fn new(views: Vec<ViewFeatures>, poses: Vec<CameraPose>) -> Result<Self> {
        if views.is_empty() || views.len() != poses.len() {
            return Err(Error::Invalid(format!("{} feature sets for {} poses", views.len(), poses.len())));
        }
        let levels = views[0].levels.len();
        if views.iter().any(|v| v.levels.len() != levels) {
            return Err(Error::Invalid("views disagree on the number of feature levels".into()));
        }
        Ok(Self { views, poses })
    }

    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn n_levels(&self) -> usize {
        self.views[0].levels.len()
    }
}

/// Projected reference points `[N, V, L, 2]` in feature-map pixels and visibility `[N, V]`.
#[derive(Clone, Debug)]
pub struct Projected {
    pub reference: Vec<f64>,
    pub visible: Vec<bool>,
}

/// Image pixel `u` maps to feature coordinate `(u - (s - 1) / 2) / s` on a stride-`s` map,
/// so feature cell `j` sits at the centre of the pixels it pools.
pub fn to_feature_coord(u: f64, stride: usize) -> f64 {
    let s = stride as f64;
    (u - (s - 1.0) / 2.0) / s
}

pub fn project_anchors(coords: &[Vec3], poses: &[CameraPose], strides: &[usize]) -> Projected {
    let (v, l) = (poses.len(), strides.len());
    let mut reference = Vec::with_capacity(coords.len() * v * l * 2);
    let mut visible = Vec::with_capacity(coords.len() * v);
    for c in coords {
        for pose in poses {
            let p = project(*c, pose);
            visible.push(p.visible);
            for &s in strides {
                let (x, y) = if p.visible { (to_feature_coord(p.u, s), to_feature_coord(p.v, s)) } else { (0.0, 0.0) };
                reference.push(x);
                reference.push(y);
            }
        }
    }
    Projected { reference, visible }
}

#[derive(Clone, Debug)]
pub struct SelfAttn {
    pub qkv: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct DeformCrossAttn {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub view_logit: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: RmsNorm,
    pub self_attn: SelfAttn,
    pub norm2: RmsNorm,
    pub cross: DeformCrossAttn,
    pub norm3: RmsNorm,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub struct Geoformer {
    pub cfg: GeoformerConfig,
    pub shared: crate::diffcore::ParamId,
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub norm: RmsNorm,
}

impl Geoformer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: GeoformerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let slots = cfg.heads * cfg.levels * cfg.points;
        let shared = store.add(format!("{prefix}.shared"), Tensor::randn(&[cfg.shared_dim], 1.0, rng))?;
        let embed = Linear::new(store, &format!("{prefix}.embed"), FOURIER_DIM + cfg.shared_dim, c, true, rng)?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                let n = format!("{prefix}.block{i}");
                Ok(Block {
                    norm1: RmsNorm::new(store, &format!("{n}.norm1"), c)?,
                    self_attn: SelfAttn {
                        qkv: Linear::new(store, &format!("{n}.sa.qkv"), c, 3 * c, true, rng)?,
                        out: Linear::new(store, &format!("{n}.sa.out"), c, c, true, rng)?,
                    },
                    norm2: RmsNorm::new(store, &format!("{n}.norm2"), c)?,
                    cross: DeformCrossAttn {
                        offsets: Linear::zeros(store, &format!("{n}.ca.offsets"), c, slots * 2, true)?,
                        weights: Linear::new(store, &format!("{n}.ca.weights"), c, slots, true, rng)?,
                        value: Linear::new(store, &format!("{n}.ca.value"), c, c, true, rng)?,
                        view_logit: Linear::new(store, &format!("{n}.ca.view"), c, 1, true, rng)?,
                        out: Linear::new(store, &format!("{n}.ca.out"), c, c, true, rng)?,
                    },
                    norm3: RmsNorm::new(store, &format!("{n}.norm3"), c)?,
                    ffn: Mlp::new(store, &format!("{n}.ffn"), c, cfg.ffn_mult * c, c, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = RmsNorm::new(store, &format!("{prefix}.norm"), c)?;
        Ok(Self { cfg, shared, embed, blocks, norm })
    }

    /// Initial token features from coordinates and the shared learnable vector.
    pub fn anchor_init<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, coords: &[Vec3]) -> Result<Var> {
        let n = coords.len();
        let fe = g.constant(fourier_embed(coords).cast::<T>());
        let shared = g.param(store, self.shared);
        let sh = g.broadcast_rows(shared, n);
        let x = g.concat_last(&[fe, sh])?;
        self.embed.forward(g, store, x)
    }

    /// Multi-head self-attention with rotary embedding on queries and keys.
    pub fn self_attn<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, sa: &SelfAttn, x: Var, coords: &[f64]) -> Result<Var> {
        let c = self.cfg.width;
        let qkv = sa.qkv.forward(g, store, x)?;
        let mut q = g.slice_last(qkv, 0, c)?;
        let mut k = g.slice_last(qkv, c, c)?;
        let v = g.slice_last(qkv, 2 * c, c)?;
        if self.cfg.use_rope {
            q = g.rope3d(q, coords, self.cfg.heads)?;
            k = g.rope3d(k, coords, self.cfg.heads)?;
        }
        let a = g.attention(q, k, v, self.cfg.heads)?;
        sa.out.forward(g, store, a)
    }

    /// Deformable cross-attention over all views and levels of `ctx`.
    pub fn cross_attn<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ca: &DeformCrossAttn,
        x: Var,
        ctx: &CrossContext,
        proj: &Projected,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let n = g.value(x).rows();
        let (views, levels) = (ctx.n_views(), ctx.n_levels());
        if levels != cfg.levels {
            return Err(Error::Invalid(format!("model expects {} feature levels, got {levels}", cfg.levels)));
        }
        let lk = levels * cfg.points;
        let offsets = ca.offsets.forward(g, store, x)?;
        let logits = ca.weights.forward(g, store, x)?;
        let logits = g.reshape(logits, &[n * cfg.heads, lk])?;
        let attn = g.softmax(logits, 1)?;
        let attn = g.reshape(attn, &[n, cfg.heads * lk])?;
        let mut maps = Vec::with_capacity(views * levels);
        for vf in &ctx.views {
            for lvl in &vf.levels {
                maps.push(ca.value.forward(g, store, lvl.map)?);
            }
        }
        let layout = DeformLayout {
            tokens: n,
            views,
            levels,
            heads: cfg.heads,
            points: cfg.points,
            reference: proj.reference.clone(),
            visible: proj.visible.clone(),
        };
        let per_view = g.deform_sample(&maps, Some(offsets), attn, layout)?;
        let vl = ca.view_logit.forward(g, store, per_view)?;
        let vl = g.reshape(vl, &[n, views])?;
        let w = g.masked_view_softmax(vl, &proj.visible)?;
        let agg = g.weighted_view_sum(per_view, w)?;
        let y = ca.out.forward(g, store, agg)?;
        let seen: Vec<T> = proj.visible.chunks(views).map(|r| if r.iter().any(|&b| b) { T::one() } else { T::zero() }).collect();
        if seen.iter().all(|&s| s == T::one()) {
            return Ok(y);
        }
        let mask = g.constant(Tensor::new(&[n], seen)?);
        g.mul_rows(y, mask)
    }

    pub fn block<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        b: &Block,
        x: Var,
        coords: &[f64],
        ctx: &CrossContext,
        proj: &Projected,
    ) -> Result<Var> {
        let h = b.norm1.forward(g, store, x)?;
        let h = self.self_attn(g, store, &b.self_attn, h, coords)?;
        let x = g.add(x, h)?;
        let h = b.norm2.forward(g, store, x)?;
        let h = self.cross_attn(g, store, &b.cross, h, ctx, proj)?;
        let x = g.add(x, h)?;
        let h = b.norm3.forward(g, store, x)?;
        let h = b.ffn.forward(g, store, h)?;
        g.add(x, h)
    }

    /// All blocks and the final norm applied to token features `x:[N, C]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, coords: &[Vec3], x: Var, ctx: &CrossContext) -> Result<Var> {
        let strides: Vec<usize> = ctx.views[0].levels.iter().map(|l| l.stride).collect();
        let proj = project_anchors(coords, &ctx.poses, &strides);
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        let mut x = x;
        for b in &self.blocks {
            x = self.block(g, store, b, x, &flat, ctx, &proj)?;
        }
        self.norm.forward(g, store, x)
    }

    /// `anchor_init` followed by [`Geoformer::forward`].
    pub fn run<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, coords: &[Vec3], ctx: &CrossContext) -> Result<Var> {
        let x = self.anchor_init(g, store, coords)?;
        self.forward(g, store, coords, x, ctx)
    }

    /// Zeroes the output projections of all three sub-layers of every block.
    pub fn zero_residual_branches<T: Real>(&self, store: &mut ParamStore<T>) {
        for b in &self.blocks {
            b.self_attn.out.zero_out(store);
            b.cross.out.zero_out(store);
            b.ffn.fc2.zero_out(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{attention_logits, grad_check, param_grad_check, rope3d_tensor, GradCheckOptions};
    use crate::encoder::Level;
    use crate::geometry::{Extrinsics, Intrinsics};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> GeoformerConfig {
        GeoformerConfig { width: 12, heads: 2, layers: 1, points: 2, levels: 2, ffn_mult: 4, shared_dim: 4, use_rope: true }
    }

    fn pose_at(eye: Vec3, res: usize) -> CameraPose {
        CameraPose::new(Intrinsics::from_fov(60.0, res, res), Extrinsics::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0])).unwrap()
    }

    fn random_coords(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
        (0..n).map(|_| [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)]).collect()
    }

    /// Two views with a stride-4 and a stride-2 level on a 16x16 image.
    fn context(g: &mut Graph<f64>, c: usize, rng: &mut ChaCha8Rng) -> CrossContext {
        let poses = vec![pose_at([2.0, 0.2, 0.4], 16), pose_at([-0.3, 2.0, 0.6], 16)];
        let views = poses
            .iter()
            .map(|_| ViewFeatures {
                levels: vec![
                    Level { map: g.input(Tensor::randn(&[4, 4, c], 1.0, rng)), stride: 4 },
                    Level { map: g.input(Tensor::randn(&[8, 8, c], 1.0, rng)), stride: 2 },
                ],
            })
            .collect();
        CrossContext::new(views, poses).unwrap()
    }

    #[test]
    fn anchor_init_determinism_and_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let m = Geoformer::new(&mut store, "p", cfg(), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = m.anchor_init(&mut g, &store, &[[0.1, 0.2, 0.3], [0.1, 0.2, 0.3]]).unwrap();
        let v = g.value(x).data();
        assert_eq!(v[..12], v[12..]);
        let e = m.anchor_init(&mut g, &store, &[]).unwrap();
        assert_eq!(g.shape(e), &[0, 12]);
    }

    #[test]
    fn fourier_embedding_has_no_collisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let coords: Vec<Vec3> = (0..1000).map(|_| [0, 0, 0].map(|_: i32| (rng.random_range(0..128) as f64 + 0.5) / 128.0 - 0.5)).collect();
        let e = fourier_embed(&coords);
        for i in 0..coords.len() {
            for j in 0..i {
                if coords[i] != coords[j] {
                    let d: f64 = (0..FOURIER_DIM).map(|k| (e.data()[i * 36 + k] - e.data()[j * 36 + k]).abs()).sum();
                    assert!(d > 1e-6);
                }
            }
        }
    }

    #[test]
    fn rope_logits_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (n, heads) = (5, 2);
            let q = Tensor::<f64>::randn(&[n, 24], 1.0, &mut rng);
            let k = Tensor::<f64>::randn(&[n, 24], 1.0, &mut rng);
            let c: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let delta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let c2: Vec<f64> = c.iter().enumerate().map(|(i, &x)| x + delta[i % 3]).collect();
            let a = attention_logits(&rope3d_tensor(&q, &c, heads).unwrap(), &rope3d_tensor(&k, &c, heads).unwrap(), heads);
            let b = attention_logits(&rope3d_tensor(&q, &c2, heads).unwrap(), &rope3d_tensor(&k, &c2, heads).unwrap(), heads);
            assert!(a.max_abs_diff(&b) < 1e-5);
        }
    }

    #[test]
    fn self_attention_single_token_and_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let m = Geoformer::new(&mut store, "p", cfg(), &mut rng).unwrap();
        let sa = m.blocks[0].self_attn.clone();
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[1, 12], 1.0, &mut rng));
        let y = m.self_attn(&mut g, &store, &sa, x, &[0.3, -0.2, 0.1]).unwrap();
        let qkv = sa.qkv.forward(&mut g, &store, x).unwrap();
        let v = g.slice_last(qkv, 24, 12).unwrap();
        let expect = sa.out.forward(&mut g, &store, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);

        let xs = Tensor::randn(&[6, 12], 1.0, &mut rng);
        let c: Vec<f64> = (0..18).map(|_| rng.random_range(-0.5..0.5)).collect();
        let c2: Vec<f64> = c.iter().enumerate().map(|(i, &v)| v + [0.31, -0.7, 0.05][i % 3]).collect();
        let run = |coords: &[f64]| {
            let mut g = Graph::new();
            let x = g.input(xs.clone());
            let y = m.self_attn(&mut g, &store, &sa, x, coords).unwrap();
            g.value(y).clone()
        };
        assert!(run(&c).max_abs_diff(&run(&c2)) < 1e-5);
    }

    #[test]
    fn self_attention_layer_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let m = Geoformer::new(&mut store, "p", cfg(), &mut rng).unwrap();
        let sa = m.blocks[0].self_attn.clone();
        let c: Vec<f64> = (0..15).map(|_| rng.random_range(-0.5..0.5)).collect();
        let x = Tensor::randn(&[5, 12], 1.0, &mut rng);
        let rep = grad_check("self_attn", &[x], GradCheckOptions::default(), |g, v| m.self_attn(g, &store, &sa, v[0], &c)).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
        let ids = [sa.qkv.w, sa.out.w];
        let rep = param_grad_check("self_attn.params", &store, &ids, GradCheckOptions::default(), |g, s| {
            let x = g.constant(Tensor::randn(&[5, 12], 1.0, &mut ChaCha8Rng::seed_from_u64(40)));
            m.self_attn(g, s, &sa, x, &c)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn cross_attention_degenerates_to_projected_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let cfg1 = GeoformerConfig { points: 1, levels: 1, ..cfg() };
        let m = Geoformer::new(&mut store, "p", cfg1, &mut rng).unwrap();
        let ca = m.blocks[0].cross.clone();
        let pose = pose_at([0.4, -2.0, 0.7], 16);
        let fmap = Tensor::<f64>::randn(&[8, 8, 12], 1.0, &mut rng);
        let coords = random_coords(7, &mut rng);
        let mut g = Graph::new();
        let map = g.constant(fmap.clone());
        let ctx = CrossContext::new(vec![ViewFeatures { levels: vec![Level { map, stride: 2 }] }], vec![pose]).unwrap();
        let proj = project_anchors(&coords, &ctx.poses, &[2]);
        let x = g.input(Tensor::randn(&[7, 12], 1.0, &mut rng));
        let y = m.cross_attn(&mut g, &store, &ca, x, &ctx, &proj).unwrap();
        for (i, c) in coords.iter().enumerate() {
            let p = project(*c, &pose);
            assert!(p.visible);
            let mut s = vec![0.0; 12];
            crate::diffcore::bilinear_sample_into(&fmap, to_feature_coord(p.u, 2), to_feature_coord(p.v, 2), &mut s);
            let sv = g.constant(Tensor::new(&[1, 12], s).unwrap());
            let sv = ca.value.forward(&mut g, &store, sv).unwrap();
            let e = ca.out.forward(&mut g, &store, sv).unwrap();
            let got = &g.value(y).data()[i * 12..(i + 1) * 12];
            for (a, b) in got.iter().zip(g.value(e).data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn anchor_behind_camera_gets_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let m = Geoformer::new(&mut store, "p", GeoformerConfig { levels: 1, ..cfg() }, &mut rng).unwrap();
        let ca = m.blocks[0].cross.clone();
        let pose = pose_at([0.3, 0.0, 0.0], 16);
        let mut g = Graph::new();
        let map = g.constant(Tensor::randn(&[8, 8, 12], 1.0, &mut rng));
        let ctx = CrossContext::new(vec![ViewFeatures { levels: vec![Level { map, stride: 2 }] }], vec![pose]).unwrap();
        // looking along -x from x=0.3: a point at larger x is behind the camera
        let coords = vec![[0.45, 0.0, 0.0], [0.0, 0.05, 0.0]];
        let proj = project_anchors(&coords, &ctx.poses, &[2]);
        assert_eq!(proj.visible, vec![false, true]);
        let x = g.input(Tensor::randn(&[2, 12], 1.0, &mut rng));
        let y = m.cross_attn(&mut g, &store, &ca, x, &ctx, &proj).unwrap();
        assert!(g.value(y).data()[..12].iter().all(|&v| v == 0.0));
        assert!(g.value(y).data()[12..].iter().any(|&v| v != 0.0));
    }

    fn randomize_offsets(store: &mut ParamStore<f64>, ca: &DeformCrossAttn, rng: &mut ChaCha8Rng) {
        let shape = store.value(ca.offsets.w).shape().to_vec();
        store.set(ca.offsets.w, Tensor::randn(&shape, 0.3, rng)).unwrap();
    }

    #[test]
    fn cross_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let m = Geoformer::new(&mut store, "p", cfg(), &mut rng).unwrap();
        let ca = m.blocks[0].cross.clone();
        randomize_offsets(&mut store, &ca, &mut rng);
        let coords = random_coords(4, &mut rng);
        let x0 = Tensor::randn(&[4, 12], 1.0, &mut rng);
        let maps: Vec<Tensor<f64>> = [4usize, 8, 4, 8].iter().map(|&s| Tensor::randn(&[s, s, 12], 1.0, &mut rng)).collect();
        let poses = vec![pose_at([2.0, 0.2, 0.4], 16), pose_at([-0.3, 2.0, 0.6], 16)];
        let build = |g: &mut Graph<f64>, s: &ParamStore<f64>, x: Var, mv: &[Var]| {
            let views = (0..2)
                .map(|v| ViewFeatures { levels: vec![Level { map: mv[2 * v], stride: 4 }, Level { map: mv[2 * v + 1], stride: 2 }] })
                .collect();
            let ctx = CrossContext::new(views, poses.clone()).unwrap();
            let proj = project_anchors(&coords, &ctx.poses, &[4, 2]);
            m.cross_attn(g, s, &ca, x, &ctx, &proj)
        };
        let mut inputs = vec![x0.clone()];
        inputs.extend(maps.iter().cloned());
        let rep = grad_check("cross_attn", &inputs, GradCheckOptions::default(), |g, v| build(g, &store, v[0], &v[1..])).unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
        let ids = [ca.offsets.w, ca.weights.w, ca.view_logit.w];
        let rep = param_grad_check("cross_attn.params", &store, &ids, GradCheckOptions::default(), |g, s| {
            let x = g.constant(x0.clone());
            let mv: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();
            build(g, s, x, &mv)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn zeroed_blocks_are_identity_and_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let m = Geoformer::new(&mut store, "p", GeoformerConfig { layers: 2, ..cfg() }, &mut rng).unwrap();
        let coords = random_coords(6, &mut rng);
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        let x0 = Tensor::randn(&[6, 12], 1.0, &mut rng);
        let run = |store: &ParamStore<f64>, x0: &Tensor<f64>, coords: &[Vec3], flat: &[f64]| {
            let mut g = Graph::new();
            let ctx = context(&mut g, 12, &mut ChaCha8Rng::seed_from_u64(80));
            let proj = project_anchors(coords, &ctx.poses, &[4, 2]);
            let mut x = g.input(x0.clone());
            for b in &m.blocks {
                x = m.block(&mut g, store, b, x, flat, &ctx, &proj).unwrap();
            }
            g.value(x).clone()
        };
        // permuting tokens permutes outputs
        let perm = [3usize, 0, 5, 1, 4, 2];
        let xp = Tensor::new(&[6, 12], perm.iter().flat_map(|&i| x0.data()[i * 12..(i + 1) * 12].to_vec()).collect()).unwrap();
        let cp: Vec<Vec3> = perm.iter().map(|&i| coords[i]).collect();
        let fp: Vec<f64> = cp.iter().flatten().copied().collect();
        let (y, yp) = (run(&store, &x0, &coords, &flat), run(&store, &xp, &cp, &fp));
        for (r, &i) in perm.iter().enumerate() {
            for k in 0..12 {
                assert!((yp.data()[r * 12 + k] - y.data()[i * 12 + k]).abs() < 1e-9);
            }
        }
        let mut zeroed = store.clone();
        m.zero_residual_branches(&mut zeroed);
        assert!(run(&zeroed, &x0, &coords, &flat).max_abs_diff(&x0) < 1e-15);
    }

    #[test]
    fn two_block_stack_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f64>::new();
        let m = Geoformer::new(&mut store, "p", GeoformerConfig { layers: 2, ..cfg() }, &mut rng).unwrap();
        for b in &m.blocks {
            randomize_offsets(&mut store, &b.cross, &mut rng);
        }
        let coords = random_coords(5, &mut rng);
        let ids: Vec<_> = [m.embed.w, m.blocks[0].self_attn.qkv.w, m.blocks[0].cross.offsets.w, m.blocks[1].ffn.fc1.w, m.shared].to_vec();
        let rep = param_grad_check("geoformer", &store, &ids, GradCheckOptions::default(), |g, s| {
            let ctx = context(g, 12, &mut ChaCha8Rng::seed_from_u64(90));
            m.run(g, s, &coords, &ctx)
        })
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }

    #[test]
    fn config_rejects_bad_head_dim() {
        assert!(GeoformerConfig { width: 16, heads: 2, ..cfg() }.validate().is_err());
        assert!(GeoformerConfig { width: 16, heads: 2, use_rope: false, ..cfg() }.validate().is_ok());
    }
}
