//! Overfits the occupancy proposal model on one scene and reports grid IoU.
//!
//! cargo run --release --example overfit_stage1 -- 400

use georecon::pipeline::{eval_split, generate, Config, Trainer};

fn main() -> georecon::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let cfg = Config {
        layers: 1,
        fixed_view_set: true,
        fixed_views: 4,
        steps,
        lr: 1e-2,
        min_lr_ratio: 1.0,
        weight_decay: 0.0,
        ..Config::default()
    }
    .with_env_seed()?;
    let scenes = generate(&cfg, 1, false)?;
    let (pool, _) = eval_split(cfg.n_views)?;
    let mut tr = Trainer::new(1, cfg, 1, None)?;
    let t = std::time::Instant::now();
    for i in 1..=steps {
        let log = tr.step(&scenes)?;
        if i % 25 == 0 || i == steps {
            let grid = tr.predict_occupancy(&scenes[0], &pool[..4])?;
            println!("{log}  IoU {:.3}  {:.0}s", grid.iou(&scenes[0].occupancy)?, t.elapsed().as_secs_f64());
        }
    }
    Ok(())
}
