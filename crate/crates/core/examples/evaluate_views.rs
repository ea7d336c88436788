//! Trains a toy reconstruction model with dynamic view sampling, then evaluates it
//! on held-out scenes at several input-view counts.

use georecon::losses::write_report;
use georecon::pipeline::{evaluate, generate, summarize, Config, Predictor, Trainer};

fn main() -> georecon::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let cfg =
        Config { layers: 1, anchor_res: 16, steps, lr: 1e-3, warmup_steps: 20, eval_points: 4000, ..Config::default() }.with_env_seed()?;
    let train = generate(&cfg, 8, false)?;
    let eval = generate(&cfg, 3, true)?;
    let mut tr = Trainer::new(2, cfg.clone(), train.len(), None)?;
    tr.run(&train, |l| {
        if l.step % 25 == 0 {
            println!("{l}");
        }
    })?;
    let pred = Predictor::from_checkpoints(&tr.checkpoint(), None)?;
    let rows = evaluate(&pred, &eval, &[4, 8, 12])?;
    write_report(std::io::stdout(), &rows).expect("stdout");
    for m in summarize(&rows) {
        println!("{} views: PSNR {:.2}  SSIM {:.3}  chamfer {:.4}  F {:.3}", m.n_input_views, m.psnr, m.ssim, m.chamfer, m.fscore);
    }
    Ok(())
}
