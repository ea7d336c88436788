//! Finite-difference checks over every differentiable operation of the stack, at
//! 64-bit. Used by the `gradcheck` command and the acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{
    grad_check, param_grad_check, Conv2dSpec, DeformLayout, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tensor, Var,
};
use crate::encoder::{Encoder, EncoderConfig, InputView, Level, ViewFeatures};
use crate::geoformer::{project_anchors, CrossContext, Geoformer, GeoformerConfig};
use crate::geometry::{CameraPose, Extrinsics, Intrinsics, Vec3};
use crate::gsplat::{DecodeRanges, GaussianHead, RAW_CHANNELS};
use crate::losses::{depth_loss, image_loss, mask_loss, PerceptualProxy};
use crate::Result;

/// Tolerance on the relative error for everything except the renderer.
pub const TOLERANCE: f64 = 1e-4;
pub const RENDER_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub group: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance) && self.report.checked > 0
    }
}

impl std::fmt::Display for SuiteEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<4} {:<10} {:<28} rel_err {:.2e} (tol {:.0e}, {} checked, {} kinks)",
            if self.passes() { "ok" } else { "FAIL" },
            self.group,
            self.report.op_name,
            self.report.max_rel_err,
            self.tolerance,
            self.report.checked,
            self.report.skipped_kinks
        )
    }
}

fn pose_at(eye: Vec3, res: usize) -> CameraPose {
    CameraPose::new(Intrinsics::from_fov(60.0, res, res), Extrinsics::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0])).expect("valid pose")
}

fn coords(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    (0..n).map(|_| [0, 0, 0].map(|_: i32| rng.random_range(-0.4..0.4))).collect()
}

fn test_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(&[h, w, 3], 0.05, 0.95, rng)
}

struct Suite {
    out: Vec<SuiteEntry>,
    opts: GradCheckOptions,
    rng: ChaCha8Rng,
}

impl Suite {
    fn push(&mut self, group: &'static str, report: GradCheckReport, tolerance: f64) {
        self.out.push(SuiteEntry { group, report, tolerance });
    }

    fn check<F>(&mut self, group: &'static str, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let r = grad_check(name, inputs, self.opts, f)?;
        self.push(group, r, TOLERANCE);
        Ok(())
    }

    fn randn(&mut self, shape: &[usize]) -> Tensor<f64> {
        Tensor::randn(shape, 1.0, &mut self.rng)
    }
}

fn primitives(s: &mut Suite) -> Result<()> {
    let (x, w, b) = (s.randn(&[4, 6]), s.randn(&[6, 5]), s.randn(&[5]));
    s.check("diffcore", "linear", &[x.clone(), w, b], |g, v| g.linear(v[0], v[1], Some(v[2])))?;
    s.check("diffcore", "silu", &[x.clone()], |g, v| Ok(g.silu(v[0])))?;
    s.check("diffcore", "sigmoid", &[x.clone()], |g, v| Ok(g.sigmoid(v[0])))?;
    s.check("diffcore", "softmax", &[x.clone()], |g, v| g.softmax(v[0], 1))?;
    let gain = s.randn(&[6]);
    s.check("diffcore", "rmsnorm", &[x.clone(), gain], |g, v| g.rmsnorm(v[0], v[1]))?;
    s.check("diffcore", "normalize_groups", &[x.clone()], |g, v| g.normalize_groups(v[0], 3))?;
    let (y, m) = (s.randn(&[4, 6]), s.randn(&[4]));
    s.check("diffcore", "add/sub/mul/mse", &[x.clone(), y], |g, v| {
        let p = g.mul(v[0], v[1])?;
        let d = g.sub(p, v[1])?;
        let a = g.add(d, v[0])?;
        g.mse(a, v[1])
    })?;
    s.check("diffcore", "mul_rows", &[x.clone(), m], |g, v| g.mul_rows(v[0], v[1]))?;
    let u = s.randn(&[6]);
    s.check("diffcore", "concat/slice/broadcast", &[x, u], |g, v| {
        let b = g.broadcast_rows(v[1], 4);
        let c = g.concat_last(&[v[0], b])?;
        let sl = g.slice_last(c, 3, 5)?;
        let r = g.concat_rows(&[sl, sl])?;
        let m = g.mean(r);
        let t = g.sum(r);
        let n = g.add_n(&[m, t])?;
        Ok(g.scale(n, 0.5))
    })?;
    let (img, k, kb) = (s.randn(&[7, 6, 3]), s.randn(&[3, 3, 3, 4]), s.randn(&[4]));
    for spec in [Conv2dSpec { stride: 1, padding: 1 }, Conv2dSpec { stride: 2, padding: 1 }] {
        let name = format!("conv2d stride {}", spec.stride);
        s.check("diffcore", &name, &[img.clone(), k.clone(), kb.clone()], |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec))?;
    }
    let (q, kk, vv) = (s.randn(&[5, 12]), s.randn(&[7, 12]), s.randn(&[7, 12]));
    s.check("diffcore", "attention", &[q, kk, vv], |g, v| g.attention(v[0], v[1], v[2], 2))?;
    let x = s.randn(&[3, 24]);
    let c: Vec<f64> = (0..9).map(|_| s.rng.random_range(-0.5..0.5)).collect();
    s.check("diffcore", "rope3d", &[x], |g, v| g.rope3d(v[0], &c, 2))?;
    let map = s.randn(&[5, 5, 3]);
    let p = Tensor::from_f64(&[2], &[1.37, 2.61])?;
    s.check("diffcore", "bilinear_sample", &[map, p], |g, v| g.bilinear_sample(v[0], v[1]))?;
    Ok(())
}

fn deformable(s: &mut Suite) -> Result<()> {
    let (views, levels, heads, points, n, c) = (2, 2, 2, 3, 3, 4);
    let mut inputs: Vec<Tensor<f64>> = (0..views * levels).map(|i| s.randn(&[4 + i % 2 * 2, 5 + i % 2 * 2, c])).collect();
    let slots = heads * levels * points;
    inputs.push(Tensor::randn(&[n, slots * 2], 0.7, &mut s.rng));
    inputs.push(s.randn(&[n, slots]));
    let reference: Vec<f64> = (0..n * views * levels * 2).map(|_| s.rng.random_range(0.3..3.7)).collect();
    let mut visible = vec![true; n * views];
    visible[1] = false;
    let layout = DeformLayout { tokens: n, views, levels, heads, points, reference, visible };
    let m = views * levels;
    // offsets are sampling-coordinate gradients
    s.check("deform", "deform_sample (maps, offsets)", &inputs, |g, v| {
        let a = g.softmax(v[m + 1], 1)?;
        g.deform_sample(&v[..m], Some(v[m]), a, layout.clone())
    })?;
    let (logits, x) = (s.randn(&[3, 4]), s.randn(&[3, 4, 5]));
    let vis = vec![true, false, true, true, false, false, false, true, true, true, true, true];
    s.check("deform", "view softmax/weighted sum", &[logits, x], |g, v| {
        let w = g.masked_view_softmax(v[0], &vis)?;
        g.weighted_view_sum(v[1], w)
    })?;
    Ok(())
}

fn transformer(s: &mut Suite) -> Result<()> {
    let cfg = GeoformerConfig { width: 12, heads: 2, layers: 2, points: 2, levels: 2, ffn_mult: 2, shared_dim: 4, use_rope: true };
    let mut store = ParamStore::<f64>::new();
    let m = Geoformer::new(&mut store, "gf", cfg, &mut s.rng)?;
    for b in &m.blocks {
        let shape = store.value(b.cross.offsets.w).shape().to_vec();
        store.set(b.cross.offsets.w, Tensor::randn(&shape, 0.3, &mut s.rng))?;
    }
    let anchors = coords(4, &mut s.rng);
    let flat: Vec<f64> = anchors.iter().flatten().copied().collect();
    let poses = vec![pose_at([2.0, 0.2, 0.4], 16), pose_at([-0.3, 2.0, 0.6], 16)];
    let maps: Vec<Tensor<f64>> = [4usize, 8, 4, 8].iter().map(|&r| s.randn(&[r, r, 12])).collect();
    let ctx_of = |mv: &[Var]| {
        let views = (0..2)
            .map(|v| ViewFeatures { levels: vec![Level { map: mv[2 * v], stride: 4 }, Level { map: mv[2 * v + 1], stride: 2 }] })
            .collect();
        CrossContext::new(views, poses.clone())
    };
    let x0 = s.randn(&[4, 12]);

    let sa = m.blocks[0].self_attn.clone();
    s.check("geoformer", "self_attn (tokens)", &[x0.clone()], |g, v| m.self_attn(g, &store, &sa, v[0], &flat))?;

    let ca = m.blocks[0].cross.clone();
    let mut inputs = vec![x0.clone()];
    inputs.extend(maps.iter().cloned());
    s.check("geoformer", "deform_cross_attn (tokens, maps)", &inputs, |g, v| {
        let ctx = ctx_of(&v[1..])?;
        let proj = project_anchors(&anchors, &ctx.poses, &[4, 2]);
        m.cross_attn(g, &store, &ca, v[0], &ctx, &proj)
    })?;
    let ids = [ca.offsets.w, ca.offsets.b.expect("offset bias"), ca.weights.w, ca.view_logit.w, ca.value.w];
    let r = param_grad_check("deform_cross_attn (offset/weight params)", &store, &ids, s.opts, |g, st| {
        let x = g.constant(x0.clone());
        let mv: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();
        let ctx = ctx_of(&mv)?;
        let proj = project_anchors(&anchors, &ctx.poses, &[4, 2]);
        m.cross_attn(g, st, &ca, x, &ctx, &proj)
    })?;
    s.push("geoformer", r, TOLERANCE);

    let blk = m.blocks[0].clone();
    let mut inputs = vec![x0.clone()];
    inputs.extend(maps.iter().cloned());
    s.check("geoformer", "full block", &inputs, |g, v| {
        let ctx = ctx_of(&v[1..])?;
        let proj = project_anchors(&anchors, &ctx.poses, &[4, 2]);
        m.block(g, &store, &blk, v[0], &flat, &ctx, &proj)
    })?;
    let ids = [m.embed.w, m.blocks[0].self_attn.qkv.w, m.blocks[1].cross.offsets.w, m.blocks[1].ffn.fc1.w, m.shared];
    let r = param_grad_check("geoformer stack (params)", &store, &ids, s.opts, |g, st| {
        let mv: Vec<Var> = maps.iter().map(|t| g.constant(t.clone())).collect();
        m.run(g, st, &anchors, &ctx_of(&mv)?)
    })?;
    s.push("geoformer", r, TOLERANCE);

    let mut store = ParamStore::<f64>::new();
    let enc =
        Encoder::new(&mut store, "enc", EncoderConfig { width: 12, high_layers: 1, high_heads: 2, ..Default::default() }, &mut s.rng)?;
    let img = test_image(16, 16, &mut s.rng);
    let pose = pose_at([2.0, 0.3, 0.5], 16);
    let names = ["enc.low.conv1.w", "enc.low.conv2.w", "enc.high.patch.w"];
    let ids: Vec<_> = names.iter().filter_map(|n| store.id(n)).collect();
    let views = vec![InputView::new(img, pose)];
    let r = param_grad_check("encoder (conv, patch embed)", &store, &ids, s.opts, |g, st| {
        let ctx = enc.encode_views(g, st, &views)?;
        let parts: Vec<Var> = ctx.views[0].levels.iter().map(|l| l.map).collect();
        let flat: Vec<Var> = parts
            .iter()
            .map(|&p| {
                let n = g.shape(p).iter().product();
                g.reshape(p, &[n])
            })
            .collect::<Result<_>>()?;
        g.concat_last(&flat)
    })?;
    s.push("encoder", r, TOLERANCE);
    Ok(())
}

fn splatting(s: &mut Suite) -> Result<()> {
    let anchors = coords(3, &mut s.rng);
    let ranges = DecodeRanges::for_voxel(1.0 / 64.0);
    let raw = s.randn(&[3, RAW_CHANNELS * 2]);
    s.check("gsplat", "decode", &[raw], |g, v| g.decode_gaussians(v[0], &anchors, ranges))?;

    let mut store = ParamStore::<f64>::new();
    let head = GaussianHead::new(&mut store, "head", 12, 16, 2, ranges, &mut s.rng)?;
    let tok = s.randn(&[3, 12]);
    let ids = [head.fc1.w, head.out.w, head.out.b.expect("head bias")];
    let r = param_grad_check("gaussian head (params)", &store, &ids, s.opts, |g, st| {
        let t = g.constant(tok.clone());
        head.forward(g, st, t, &anchors)
    })?;
    s.push("gsplat", r, TOLERANCE);

    let pose = pose_at([0.0, -2.0, 0.0], 8);
    let mut recs = Vec::new();
    for _ in 0..4 {
        let r = &mut s.rng;
        recs.extend([0, 0, 0].map(|_: i32| r.random_range(-0.3..0.3)));
        recs.extend([0, 0, 0].map(|_: i32| r.random_range(0.1..0.9)));
        recs.extend([0, 0, 0].map(|_: i32| r.random_range(0.08..0.2)));
        recs.extend([r.random_range(0.5..1.0), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5)]);
        recs.push(r.random_range(0.3..0.9));
    }
    let input = Tensor::new(&[4, crate::formats::GAUSS_RECORD], recs)?;
    let opts = GradCheckOptions { eps: 1e-6, max_entries_per_input: 56, seed: s.opts.seed };
    let r = grad_check("render (rgb, alpha, depth)", &[input], opts, |g, v| g.render_gaussians(v[0], &pose))?;
    s.push("gsplat", r, RENDER_TOLERANCE);
    Ok(())
}

fn objectives(s: &mut Suite) -> Result<()> {
    let proxy = PerceptualProxy::new(3);
    let target = test_image(8, 8, &mut s.rng);
    let pred = target.map(|v| v + 0.05);
    s.check("losses", "image l2 + perceptual proxy", &[pred], |g, v| {
        let (a, b) = image_loss(g, &proxy, v[0], &target)?;
        g.add(a, b)
    })?;
    let ones = Tensor::full(&[4, 4], 1.0);
    let m = Tensor::uniform(&[4, 4], 0.0, 1.0, &mut s.rng);
    s.check("losses", "mask", &[m], |g, v| mask_loss(g, v[0], &ones))?;
    let img = test_image(4, 5, &mut s.rng);
    let mut gt = Tensor::full(&[4, 5], 1.5);
    gt.data_mut()[0] = 0.0;
    let d = Tensor::uniform(&[4, 5], 1.0, 2.0, &mut s.rng);
    s.check("losses", "depth", &[d], |g, v| depth_loss(g, v[0], &gt, &img))?;
    let y: Vec<f64> = (0..256).map(|_| if s.rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
    let p = Tensor::uniform(&[256], 0.05, 0.95, &mut s.rng);
    s.check("losses", "occupancy affinity", &[p.clone()], |g, v| g.affinity_loss(v[0], &y))?;
    s.check("losses", "occupancy bce (probs)", &[p], |g, v| g.bce_probs(v[0], &y))?;
    let x = Tensor::randn(&[256], 3.0, &mut s.rng);
    s.check("losses", "occupancy bce (logits)", &[x], |g, v| g.bce_logits(v[0], &y))?;
    Ok(())
}

/// Runs every check with a fixed seed.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut s =
        Suite { out: Vec::new(), opts: GradCheckOptions { seed, ..GradCheckOptions::default() }, rng: ChaCha8Rng::seed_from_u64(seed) };
    primitives(&mut s)?;
    deformable(&mut s)?;
    transformer(&mut s)?;
    splatting(&mut s)?;
    objectives(&mut s)?;
    Ok(s.out)
}
