//! Pinhole cameras, Plücker ray maps, projection/unprojection and voxelization.
//!
//! Camera frame: x right, y down, z forward. Extrinsics are camera-to-world, so a world
//! point maps to the camera as `R^T (p - t)`. Pixel `(u, v)` = (column, row) and pixel
//! centres sit at integer coordinates.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// Points closer than this (camera z) are never visible.
pub const Z_NEAR: f64 = 1e-4;

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, k: f64) -> Vec3 {
    [a[0] * k, a[1] * k, a[2] * k]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    /// Square image with the given horizontal field of view; the principal point sits
    /// on the pixel centre `(W/2, H/2)`.
    pub fn from_fov(fov_deg: f64, width: usize, height: usize) -> Self {
        let f = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
        Self { fx: f, fy: f, cx: (width / 2) as f64, cy: (height / 2) as f64, width, height }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Same camera at a different resolution (focal lengths and centre rescaled).
    pub fn resized(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (width / 2) as f64 + (self.cx - (self.width / 2) as f64) * sx,
            cy: (height / 2) as f64 + (self.cy - (self.height / 2) as f64) * sy,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    /// Camera-to-world rotation, row-major.
    pub rotation: Mat3,
    /// Camera origin in world coordinates.
    pub translation: Vec3,
}

impl Extrinsics {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let e = Self { rotation, translation };
        e.validate()?;
        Ok(e)
    }

    pub fn identity() -> Self {
        Self { rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], translation: [0.0; 3] }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let rtr: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr - expect).abs() > 1e-6 {
                    return Err(Error::Invalid("rotation is not orthonormal".into()));
                }
            }
        }
        let det = dot(r[0], cross(r[1], r[2]));
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("rotation determinant {det}")));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        Self { rotation, translation: eye }
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub(p, self.translation))
    }

    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        add(mat_vec(&self.rotation, p), self.translation)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl CameraPose {
    pub fn new(intrinsics: Intrinsics, extrinsics: Extrinsics) -> Result<Self> {
        intrinsics.validate()?;
        extrinsics.validate()?;
        Ok(Self { intrinsics, extrinsics })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn origin(&self) -> Vec3 {
        self.extrinsics.translation
    }

    /// World-frame direction (camera z component 1 before rotation) through pixel `(u, v)`.
    pub fn pixel_direction(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let d_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
        mat_vec(&self.extrinsics.rotation, d_cam)
    }
}

/// Per-pixel Plücker coordinates `(d, o x d)`, `[H, W, 6]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PluckerMap {
    pub height: usize,
    pub width: usize,
    pub rays: Vec<f64>,
}

impl PluckerMap {
    pub fn ray(&self, row: usize, col: usize) -> [f64; 6] {
        let i = (row * self.width + col) * 6;
        self.rays[i..i + 6].try_into().unwrap()
    }
}

pub fn plucker_rays(pose: &CameraPose) -> PluckerMap {
    let (h, w) = (pose.height(), pose.width());
    let o = pose.origin();
    let mut rays = Vec::with_capacity(h * w * 6);
    for row in 0..h {
        for col in 0..w {
            let d = normalize(pose.pixel_direction(col as f64, row as f64));
            let m = cross(o, d);
            rays.extend_from_slice(&d);
            rays.extend_from_slice(&m);
        }
    }
    PluckerMap { height: h, width: w, rays }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth.
    pub z: f64,
    pub visible: bool,
}

pub fn project(p_world: Vec3, pose: &CameraPose) -> Projection {
    let pc = pose.extrinsics.world_to_camera(p_world);
    let k = &pose.intrinsics;
    let z = pc[2];
    let (u, v) = (k.fx * pc[0] / z + k.cx, k.fy * pc[1] / z + k.cy);
    let inside = u >= -0.5 && u < k.width as f64 - 0.5 && v >= -0.5 && v < k.height as f64 - 0.5;
    Projection { u, v, z, visible: z > Z_NEAR && inside }
}

/// World point at camera-frame depth `depth` along pixel `(u, v)`.
pub fn unproject(u: f64, v: f64, depth: f64, pose: &CameraPose) -> Result<Vec3> {
    if !(depth > 0.0) {
        return Err(Error::Invalid(format!("unproject needs positive depth, got {depth}")));
    }
    let k = &pose.intrinsics;
    let pc = [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth];
    Ok(pose.extrinsics.camera_to_world(pc))
}

/// Integer lattice key of `x` on spacing `eps` (ties rounded away from zero).
pub fn lattice_key(x: f64, eps: f64) -> i64 {
    (x / eps).round() as i64
}

/// Snaps points to the lattice `{k * eps}` and removes duplicates. Output is sorted
/// by lattice key.
pub fn voxelize(points: &[Vec3], eps: f64) -> Result<Vec<Vec3>> {
    voxelize_on(points, eps, 0.0)
}

/// Like [`voxelize`] but on the shifted lattice `{k * eps + origin}`.
pub fn voxelize_on(points: &[Vec3], eps: f64, origin: f64) -> Result<Vec<Vec3>> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("voxel size must be positive, got {eps}")));
    }
    let keys: BTreeSet<[i64; 3]> = points
        .iter()
        .map(|p| [lattice_key(p[0] - origin, eps), lattice_key(p[1] - origin, eps), lattice_key(p[2] - origin, eps)])
        .collect();
    Ok(keys.into_iter().map(|k| [k[0] as f64 * eps + origin, k[1] as f64 * eps + origin, k[2] as f64 * eps + origin]).collect())
}

/// One line of the pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&CameraPose> for PoseRecord {
    fn from(p: &CameraPose) -> Self {
        let k = p.intrinsics;
        let m = p.extrinsics.rotation;
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            r: [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]],
            t: p.extrinsics.translation,
        }
    }
}

impl TryFrom<&PoseRecord> for CameraPose {
    type Error = Error;

    fn try_from(r: &PoseRecord) -> Result<Self> {
        let k = Intrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?;
        let m = [[r.r[0], r.r[1], r.r[2]], [r.r[3], r.r[4], r.r[5]], [r.r[6], r.r[7], r.r[8]]];
        CameraPose::new(k, Extrinsics::new(m, r.t)?)
    }
}

/// Writes one JSON object per pose per line.
pub fn write_poses(mut w: impl Write, poses: &[CameraPose]) -> std::io::Result<()> {
    for p in poses {
        let line = serde_json::to_string(&PoseRecord::from(p)).map_err(std::io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_poses(r: impl BufRead) -> Result<Vec<CameraPose>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Invalid(format!("pose line {i}: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PoseRecord = serde_json::from_str(&line).map_err(|e| Error::Invalid(format!("pose line {}: {e}", i + 1)))?;
        out.push(CameraPose::try_from(&rec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intr() -> Intrinsics {
        Intrinsics::from_fov(60.0, 64, 64)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let el: f64 = rng.random_range(-1.2..1.2);
        let r = rng.random_range(1.5..3.0);
        let eye = [r * el.cos() * az.cos(), r * el.cos() * az.sin(), r * el.sin()];
        let target = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
        CameraPose::new(intr(), Extrinsics::look_at(eye, target, [0.0, 0.0, 1.0])).unwrap()
    }

    #[test]
    fn plucker_at_origin_principal_point() {
        let pose = CameraPose::new(intr(), Extrinsics::identity()).unwrap();
        let map = plucker_rays(&pose);
        let r = map.ray(32, 32);
        for (a, b) in r.iter().zip([0.0, 0.0, 1.0, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn plucker_moment_by_hand() {
        let ext = Extrinsics::new(Extrinsics::identity().rotation, [1.0, 0.0, 0.0]).unwrap();
        let map = plucker_rays(&CameraPose::new(intr(), ext).unwrap());
        let r = map.ray(32, 32);
        for (a, b) in r.iter().zip([0.0, 0.0, 1.0, 0.0, -1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{r:?}");
        }
    }

    #[test]
    fn plucker_line_reconstruction_and_invariants() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let map = plucker_rays(&pose);
            for row in (0..64).step_by(7) {
                for col in (0..64).step_by(5) {
                    let r = map.ray(row, col);
                    let (d, m) = ([r[0], r[1], r[2]], [r[3], r[4], r[5]]);
                    assert!((norm(d) - 1.0).abs() < 1e-5);
                    assert!(dot(d, m).abs() < 1e-5);
                    // closest point of the line to the world origin, then check o lies on it
                    let foot = cross(d, m);
                    let o = pose.origin();
                    let lambda = dot(sub(o, foot), d);
                    let back = add(foot, scale(d, lambda));
                    assert!(norm(sub(back, o)) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn project_principal_point_and_behind() {
        let pose = CameraPose::new(intr(), Extrinsics::identity()).unwrap();
        let p = project([0.0, 0.0, 1.0], &pose);
        assert_eq!((p.u, p.v, p.z, p.visible), (32.0, 32.0, 1.0, true));
        assert!(!project([0.0, 0.0, -1.0], &pose).visible);
    }

    #[test]
    fn unproject_axis_and_rejects_zero_depth() {
        let pose = CameraPose::new(intr(), Extrinsics::identity()).unwrap();
        assert_eq!(unproject(32.0, 32.0, 1.0, &pose).unwrap(), [0.0, 0.0, 1.0]);
        assert!(unproject(3.0, 4.0, 0.0, &pose).is_err());
        assert!(unproject(3.0, 4.0, -1.0, &pose).is_err());
    }

    #[test]
    fn project_unproject_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 1000 {
            let pose = random_pose(&mut rng);
            let p = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let pr = project(p, &pose);
            if !pr.visible {
                continue;
            }
            let back = unproject(pr.u, pr.v, pr.z, &pose).unwrap();
            assert!(norm(sub(back, p)) < 1e-6);
            checked += 1;
        }
    }

    #[test]
    fn voxelize_examples() {
        let eps = 1.0 / 128.0;
        assert_eq!(voxelize(&[[0.0; 3]], eps).unwrap(), vec![[0.0; 3]]);
        assert_eq!(voxelize(&[[0.004, 0.0, 0.0]], eps).unwrap(), vec![[0.0078125, 0.0, 0.0]]);
        let two = voxelize(&[[0.1, 0.2, 0.3], [0.1 + 1e-6, 0.2, 0.3]], eps).unwrap();
        assert_eq!(two.len(), 1);
        assert!(voxelize(&[[0.0; 3]], 0.0).is_err());
    }

    #[test]
    fn voxelize_ties_round_away_from_zero() {
        let eps = 0.5;
        let v = voxelize(&[[0.25, -0.25, 0.75]], eps).unwrap();
        assert_eq!(v, vec![[0.5, -0.5, 1.0]]);
    }

    #[test]
    fn pose_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poses: Vec<_> = (0..4).map(|_| random_pose(&mut rng)).collect();
        let mut buf = Vec::new();
        write_poses(&mut buf, &poses).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 4);
        let back = read_poses(buf.as_slice()).unwrap();
        assert_eq!(back, poses);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn voxelize_is_idempotent_and_on_lattice(
                pts in prop::collection::vec(prop::array::uniform3(-0.5f64..0.5), 1..64),
            ) {
                let eps = 1.0 / 128.0;
                let v = voxelize(&pts, eps).unwrap();
                prop_assert!(v.len() <= pts.len());
                for c in &v {
                    for x in c {
                        let k = x / eps;
                        prop_assert!((k - k.round()).abs() < 1e-9);
                    }
                }
                prop_assert_eq!(voxelize(&v, eps).unwrap(), v);
            }
        }
    }
}
