//! Renders a handful of random Gaussians and writes rgb, alpha and depth images.

use georecon::formats::write_png;
use georecon::geometry::{CameraPose, Extrinsics, Intrinsics};
use georecon::gsplat::GaussianSet;
use rand::{Rng, SeedableRng};

fn main() -> georecon::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let records: Vec<[f32; 14]> = (0..40)
        .map(|_| {
            let mut r = [0f32; 14];
            for v in &mut r[..3] {
                *v = rng.random_range(-0.4..0.4);
            }
            for v in &mut r[3..6] {
                *v = rng.random_range(0.0..1.0);
            }
            for v in &mut r[6..9] {
                *v = rng.random_range(0.02..0.12);
            }
            r[9] = 1.0;
            r[13] = rng.random_range(0.5..1.0);
            r
        })
        .collect();
    let set = GaussianSet::from_records(&records);
    let pose = CameraPose::new(Intrinsics::from_fov(50.0, 128, 128), Extrinsics::look_at([0.0, -2.2, 0.6], [0.0; 3], [0.0, 0.0, 1.0]))?;
    let out = set.render(&pose)?;
    let covered = out.alpha.data().iter().filter(|&&a| a > 0.5).count();
    println!("{} Gaussians, {covered} of {} pixels with alpha > 0.5", set.len(), 128 * 128);
    let dmax = out.depth.data().iter().cloned().fold(0.0f32, f32::max).max(1e-6);
    write_png("splat_rgb.png".as_ref(), &out.image)?;
    write_png("splat_alpha.png".as_ref(), &out.alpha)?;
    write_png("splat_depth.png".as_ref(), &out.depth.map(|d| d / dmax))?;
    println!("wrote splat_rgb.png, splat_alpha.png, splat_depth.png");
    Ok(())
}
