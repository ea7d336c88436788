//! Saves a stage-2 checkpoint mid-run, resumes, and compares with the unbroken run.

use georecon::pipeline::{generate, Checkpoint, Config, Trainer};

fn main() -> georecon::Result<()> {
    let cfg =
        Config { layers: 1, width: 24, heads: 2, enc_high_heads: 2, anchor_res: 16, steps: 10, ..Config::default() }.with_env_seed()?;
    let scenes = generate(&cfg, 2, false)?;
    let mut a = Trainer::new(2, cfg, scenes.len(), None)?;
    for _ in 0..3 {
        a.step(&scenes)?;
    }
    let dir = std::env::temp_dir().join("georecon_resume_demo");
    let path = dir.join("stage2.ckpt");
    a.checkpoint().save(&path)?;
    let mut b = Trainer::resume(&Checkpoint::load(&path)?, scenes.len(), None)?;
    for _ in 0..5 {
        let (la, lb) = (a.step(&scenes)?, b.step(&scenes)?);
        println!("step {}: {:.8} vs {:.8}", la.step, la.loss, lb.loss);
    }
    println!("identical parameters: {}", a.checkpoint().to_bytes() == b.checkpoint().to_bytes());
    Ok(())
}
