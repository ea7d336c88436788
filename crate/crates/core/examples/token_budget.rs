//! The same reconstruction weights run at training and inference token caps.

use georecon::pipeline::{eval_split, generate, input_views, Config, Predictor, Trainer};

fn main() -> georecon::Result<()> {
    let base = Config { layers: 1, width: 24, heads: 2, enc_high_heads: 2, anchor_res: 32, ..Config::default() };
    let scene = generate(&base, 1, false)?.remove(0);
    let ckpt = Trainer::new(2, base.clone(), 1, None)?.checkpoint();
    let (pool, _) = eval_split(scene.bundle.views.len())?;
    let views: Vec<_> = pool[..4].iter().map(|&i| &scene.bundle.views[i]).collect();
    for cap in [256, 4096, 16384] {
        let mut c = ckpt.clone();
        c.config = base.clone().with_overrides(&[format!("max_tokens_train={}", cap.min(4096)), format!("max_tokens_infer={cap}")])?;
        let rec = Predictor::from_checkpoints(&c, None)?.reconstruct(&input_views(&views), Some(&scene.occupancy))?;
        println!("cap {cap:>5}: {} anchors, {} Gaussians", rec.anchors.len(), rec.gaussians.len());
    }
    Ok(())
}
