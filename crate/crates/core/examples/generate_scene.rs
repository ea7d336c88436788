//! Generates one synthetic scene, renders the default rig and writes the bundle.
//!
//! cargo run --example generate_scene -- /tmp/scene_demo

use georecon::pipeline::{generate, Config};

fn main() -> georecon::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "scene_demo".into());
    let cfg = Config::default().with_env_seed()?;
    let scene = generate(&cfg, 1, false)?.remove(0);
    let prims = scene.bundle.scene.as_ref().map_or(0, |s| s.primitives.len());
    println!(
        "{prims} primitives, {} views at {}x{}, occupied fraction {:.3} at {}^3",
        scene.bundle.views.len(),
        cfg.resolution,
        cfg.resolution,
        scene.occupancy.occupied_fraction(),
        scene.occupancy.resolution
    );
    scene.save(std::path::Path::new(&out))?;
    println!("wrote {out}");
    Ok(())
}
