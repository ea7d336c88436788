//! Randomized renderer invariants shared by the property tests and the acceptance run.
//! Each check returns the first violation it finds.

#![allow(dead_code)]

use georecon::formats::GAUSS_RECORD;
use georecon::geometry::{CameraPose, Extrinsics, Intrinsics};
use georecon::gsplat::{render_records, RenderOut, BACKGROUND, MIN_TRANSMITTANCE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const RES: usize = 16;

type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
    let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.random_range(-0.4..0.8);
    let r = rng.random_range(1.8..2.6);
    let eye = [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()];
    CameraPose::new(Intrinsics::from_fov(50.0, RES, RES), Extrinsics::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0])).unwrap()
}

fn random_gaussian(rng: &mut ChaCha8Rng) -> [f64; GAUSS_RECORD] {
    let mut r = [0.0; GAUSS_RECORD];
    for v in &mut r[..3] {
        *v = rng.random_range(-0.4..0.4);
    }
    for v in &mut r[3..6] {
        *v = rng.random_range(0.0..1.0);
    }
    for v in &mut r[6..9] {
        *v = rng.random_range(0.03..0.25);
    }
    for v in &mut r[9..13] {
        *v = rng.random_range(-1.0..1.0);
    }
    r[13] = rng.random_range(0.05..1.0);
    r
}

fn render(set: &[[f64; GAUSS_RECORD]], pose: &CameraPose) -> RenderOut<f32> {
    let flat: Vec<f64> = set.iter().flatten().copied().collect();
    render_records(&flat, pose).unwrap()
}

fn camera_z(g: &[f64; GAUSS_RECORD], pose: &CameraPose) -> f64 {
    pose.extrinsics.world_to_camera([g[0], g[1], g[2]])[2]
}

/// Adding a Gaussian or raising an opacity never lowers any pixel's alpha.
pub fn alpha_monotone(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = MIN_TRANSMITTANCE as f32 + 1e-6;
    for trial in 0..trials {
        let pose = random_pose(&mut rng);
        let n = rng.random_range(1..6);
        let mut set: Vec<_> = (0..n).map(|_| random_gaussian(&mut rng)).collect();
        let before = render(&set, &pose);
        set.push(random_gaussian(&mut rng));
        let added = render(&set, &pose);
        let i = rng.random_range(0..set.len());
        set[i][13] = (set[i][13] + rng.random_range(0.0..0.5)).min(1.0);
        let raised = render(&set, &pose);
        for p in 0..RES * RES {
            let (a0, a1, a2) = (before.alpha.data()[p], added.alpha.data()[p], raised.alpha.data()[p]);
            ensure!((0.0..=1.0).contains(&a0), "trial {trial}: alpha {a0}");
            ensure!(a1 + tol >= a0, "trial {trial} pixel {p}: adding a Gaussian lowered alpha {a0} -> {a1}");
            ensure!(a2 + tol >= a1, "trial {trial} pixel {p}: raising opacity lowered alpha {a1} -> {a2}");
        }
    }
    Ok(())
}

/// A near opaque blob hides a far one on the same ray, and input order does not matter.
pub fn occlusion_order(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre = RES / 2 * RES + RES / 2;
    for trial in 0..trials {
        let pose = random_pose(&mut rng);
        let dir = pose.pixel_direction((RES / 2) as f64, (RES / 2) as f64);
        let eye = pose.origin();
        let (t_near, t_far) = (rng.random_range(1.2..1.6), rng.random_range(1.9..2.4));
        let mut near = random_gaussian(&mut rng);
        let mut far = random_gaussian(&mut rng);
        for k in 0..3 {
            near[k] = eye[k] + t_near * dir[k];
            far[k] = eye[k] + t_far * dir[k];
            near[6 + k] = 0.2;
            far[6 + k] = 0.2;
        }
        near[3..6].copy_from_slice(&[1.0, 0.0, 0.0]);
        far[3..6].copy_from_slice(&[0.0, 0.0, 1.0]);
        near[13] = 0.995;
        far[13] = 0.995;
        ensure!(camera_z(&near, &pose) < camera_z(&far, &pose), "trial {trial}: setup");
        let out = render(&[far, near], &pose);
        let px = &out.image.data()[centre * 3..centre * 3 + 3];
        ensure!(px[0] > 0.95 && px[2] < 0.05, "trial {trial}: centre pixel {px:?}");

        let mut set: Vec<_> = (0..rng.random_range(2..7)).map(|_| random_gaussian(&mut rng)).collect();
        let a = render(&set, &pose);
        set.reverse();
        let b = render(&set, &pose);
        ensure!(a.image == b.image && a.depth == b.depth, "trial {trial}: output depends on input order");
    }
    Ok(())
}

/// Rendered depth lies between the nearest and farthest splat; one splat gives its own z.
pub fn depth_convexity(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let pose = random_pose(&mut rng);
        let set: Vec<_> = (0..rng.random_range(1..8)).map(|_| random_gaussian(&mut rng)).collect();
        let zs: Vec<f64> = set.iter().map(|g| camera_z(g, &pose)).collect();
        let (lo, hi) = zs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &z| (a.min(z), b.max(z)));
        let out = render(&set, &pose);
        for p in 0..RES * RES {
            let (a, d) = (out.alpha.data()[p] as f64, out.depth.data()[p] as f64);
            if a > 1e-3 {
                ensure!(d >= lo - 1e-4 && d <= hi + 1e-4, "trial {trial}: depth {d} outside [{lo}, {hi}]");
            }
        }
        let one = render(&set[..1], &pose);
        for p in 0..RES * RES {
            let d = one.depth.data()[p] as f64;
            if one.alpha.data()[p] > 1e-3 {
                ensure!((d - zs[0]).abs() < 1e-4 * zs[0].max(1.0), "trial {trial}: single splat depth {d} vs z {}", zs[0]);
            }
        }
    }
    Ok(())
}

/// Empty, behind-camera and transparent sets leave the background untouched.
pub fn empty_background(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..trials {
        let pose = random_pose(&mut rng);
        let check = |out: &RenderOut<f32>| -> Check {
            ensure!(out.image.data().iter().all(|&c| c == BACKGROUND as f32), "trial {trial}: colour off background");
            ensure!(out.alpha.data().iter().all(|&a| a == 0.0), "trial {trial}: nonzero alpha");
            ensure!(out.depth.data().iter().all(|&d| d == 0.0), "trial {trial}: nonzero depth");
            Ok(())
        };
        check(&render(&[], &pose))?;
        let mut behind = random_gaussian(&mut rng);
        let back = pose.extrinsics.camera_to_world([0.0, 0.0, -rng.random_range(0.1..2.0)]);
        behind[..3].copy_from_slice(&back);
        let mut clear = random_gaussian(&mut rng);
        clear[13] = 0.0;
        check(&render(&[behind, clear], &pose))?;
    }
    Ok(())
}

/// All four invariants with their names.
pub fn all(trials: usize) -> Vec<(&'static str, Check)> {
    vec![
        ("alpha monotonicity", alpha_monotone(trials, 1)),
        ("occlusion order", occlusion_order(trials, 2)),
        ("depth convexity", depth_convexity(trials, 3)),
        ("empty background", empty_background(trials, 4)),
    ]
}
