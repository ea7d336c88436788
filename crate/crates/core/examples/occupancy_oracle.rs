//! Occupancy from rendered depth compared with visible surface samples voxelized
//! directly.

use georecon::occupancy::{occupancy_from_scene, visible_surface_occupancy};
use georecon::scenegen::{default_rig, generate_scene};
use rand::SeedableRng;

fn main() -> georecon::Result<()> {
    let (res, samples) = (128, 1_000_000);
    let rig = default_rig(64);
    for seed in 0..5 {
        let t = std::time::Instant::now();
        let scene = generate_scene(seed, 8)?;
        let from_depth = occupancy_from_scene(&scene, &rig, 512, res)?;
        let oracle = visible_surface_occupancy(&scene, &rig, samples, res, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        println!(
            "scene {seed}: occupied {:.2}% (depth) {:.2}% (oracle), IoU {:.3}, {:.1}s",
            100.0 * from_depth.occupied_fraction(),
            100.0 * oracle.occupied_fraction(),
            from_depth.iou(&oracle)?,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
