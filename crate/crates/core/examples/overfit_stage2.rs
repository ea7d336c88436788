//! Overfits the Gaussian reconstruction model on one scene with ground-truth anchors.
//!
//! cargo run --release --example overfit_stage2 -- 300

use georecon::losses::psnr;
use georecon::pipeline::{eval_split, generate, Config, Trainer};

fn main() -> georecon::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let cfg =
        Config { layers: 1, anchor_res: 16, fixed_view_set: true, fixed_views: 4, steps, lr: 1e-3, warmup_steps: 50, ..Config::default() }
            .with_env_seed()?;
    let scenes = generate(&cfg, 1, false)?;
    let (pool, _) = eval_split(cfg.n_views)?;
    let (inputs, targets) = (&pool[..4], &pool[4..8]);
    let mut tr = Trainer::new(2, cfg, 1, None)?;
    for i in 1..=steps {
        let log = tr.step(&scenes)?;
        if i % 50 == 0 || i == steps {
            let set = tr.predict_gaussians(&scenes[0], inputs)?;
            let mut p = 0.0;
            for &v in targets {
                let view = &scenes[0].bundle.views[v];
                p += psnr(&set.render(&view.pose)?.image, &view.rgb)?;
            }
            println!("{log}  train-view PSNR {:.2}", p / targets.len() as f64);
        }
    }
    Ok(())
}
