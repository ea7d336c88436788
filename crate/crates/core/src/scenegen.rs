//! Procedural object-centric scenes (spheres and boxes in the unit cube), an orbiting
//! camera rig, and an analytic ray caster producing posed RGB / depth / mask views.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::formats;
use crate::geometry::{self, add, dot, normalize, project, scale, sub, CameraPose, Extrinsics, Intrinsics, Vec3};

pub const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];
pub const AMBIENT: f64 = 0.3;
/// Direction towards the light (world frame, z up).
pub const LIGHT_DIR: Vec3 = [0.3713906763541037, 0.5570860145311556, 0.7427813527082074];
pub const DEFAULT_RADIUS: f64 = 2.0;
pub const DEFAULT_FOV_DEG: f64 = 60.0;
pub const WORLD_UP: Vec3 = [0.0, 0.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    Box,
}

/// A sphere (radius `size[0]`, all entries equal) or an axis-aligned box with
/// half-extents `size`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: Vec3,
    pub size: Vec3,
    pub albedo: [f64; 3],
}

impl Primitive {
    pub fn sphere(center: Vec3, radius: f64, albedo: [f64; 3]) -> Self {
        Self { kind: PrimitiveKind::Sphere, center, size: [radius; 3], albedo }
    }

    pub fn cuboid(center: Vec3, half_extents: Vec3, albedo: [f64; 3]) -> Self {
        Self { kind: PrimitiveKind::Box, center, size: half_extents, albedo }
    }

    /// Half-extent of the axis-aligned bounding box.
    pub fn extent(&self) -> Vec3 {
        self.size
    }

    pub fn inside_unit_cube(&self) -> bool {
        let e = self.extent();
        (0..3).all(|i| self.center[i] - e[i] >= -0.5 && self.center[i] + e[i] <= 0.5)
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        let q = sub(p, self.center);
        match self.kind {
            PrimitiveKind::Sphere => geometry::norm(q) - self.size[0],
            PrimitiveKind::Box => {
                let d = [q[0].abs() - self.size[0], q[1].abs() - self.size[1], q[2].abs() - self.size[2]];
                let outside = geometry::norm([d[0].max(0.0), d[1].max(0.0), d[2].max(0.0)]);
                outside + d[0].max(d[1]).max(d[2]).min(0.0)
            }
        }
    }

    /// Nearest ray parameter `t > 0` of `o + t d` hitting the surface, with the outward normal.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, Vec3)> {
        let oc = sub(o, self.center);
        match self.kind {
            PrimitiveKind::Sphere => {
                let r = self.size[0];
                let a = dot(d, d);
                let b = dot(oc, d);
                let c = dot(oc, oc) - r * r;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > 1e-9)?;
                let n = normalize(sub(add(o, scale(d, t)), self.center));
                Some((t, n))
            }
            PrimitiveKind::Box => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let (mut axis0, mut axis1) = (0, 0);
                for i in 0..3 {
                    if d[i].abs() < 1e-15 {
                        if oc[i].abs() > self.size[i] {
                            return None;
                        }
                        continue;
                    }
                    let (mut a, mut b) = ((-self.size[i] - oc[i]) / d[i], (self.size[i] - oc[i]) / d[i]);
                    if a > b {
                        std::mem::swap(&mut a, &mut b);
                    }
                    if a > t0 {
                        t0 = a;
                        axis0 = i;
                    }
                    if b < t1 {
                        t1 = b;
                        axis1 = i;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis, sign) = if t0 > 1e-9 {
                    (t0, axis0, -d[axis0].signum())
                } else if t1 > 1e-9 {
                    (t1, axis1, d[axis1].signum())
                } else {
                    return None;
                };
                let mut n = [0.0; 3];
                n[axis] = sign;
                Some((t, n))
            }
        }
    }

    /// Uniform-by-area sample on the surface.
    pub fn sample_surface(&self, rng: &mut impl Rng) -> Vec3 {
        match self.kind {
            PrimitiveKind::Sphere => {
                let z: f64 = rng.random_range(-1.0..1.0);
                let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let r = (1.0 - z * z).sqrt();
                add(self.center, scale([r * phi.cos(), r * phi.sin(), z], self.size[0]))
            }
            PrimitiveKind::Box => {
                let s = self.size;
                let areas = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
                let total: f64 = areas.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut axis = 0;
                while axis < 2 && pick >= areas[axis] {
                    pick -= areas[axis];
                    axis += 1;
                }
                let mut p = [0.0; 3];
                for i in 0..3 {
                    p[i] = if i == axis {
                        if rng.random_bool(0.5) {
                            s[i]
                        } else {
                            -s[i]
                        }
                    } else {
                        rng.random_range(-s[i]..s[i])
                    };
                }
                add(self.center, p)
            }
        }
    }

    fn area(&self) -> f64 {
        match self.kind {
            PrimitiveKind::Sphere => 4.0 * std::f64::consts::PI * self.size[0] * self.size[0],
            PrimitiveKind::Box => 8.0 * (self.size[0] * self.size[1] + self.size[1] * self.size[2] + self.size[0] * self.size[2]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub primitives: Vec<Primitive>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn new(primitives: Vec<Primitive>, seed: u64) -> crate::Result<Self> {
        if primitives.is_empty() {
            return Err(crate::Error::Invalid("a scene needs at least one primitive".into()));
        }
        if let Some(p) = primitives.iter().find(|p| !p.inside_unit_cube()) {
            return Err(crate::Error::Invalid(format!("primitive outside the unit cube: {p:?}")));
        }
        Ok(Self { primitives, seed })
    }

    pub fn signed_distance(&self, p: Vec3) -> f64 {
        self.primitives.iter().map(|q| q.signed_distance(p)).fold(f64::INFINITY, f64::min)
    }

    /// Nearest hit along `o + t d`: `(t, normal, albedo)`.
    pub fn intersect(&self, o: Vec3, d: Vec3) -> Option<(f64, Vec3, [f64; 3])> {
        self.primitives.iter().filter_map(|p| p.intersect(o, d).map(|(t, n)| (t, n, p.albedo))).min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Points on the outer surface of the union (samples buried inside another
    /// primitive are rejected), area-weighted across primitives.
    pub fn sample_surface(&self, count: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        let areas: Vec<f64> = self.primitives.iter().map(Primitive::area).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while out.len() < count && attempts < count * 200 {
            attempts += 1;
            let mut pick = rng.random_range(0.0..total);
            let mut idx = 0;
            while idx + 1 < areas.len() && pick >= areas[idx] {
                pick -= areas[idx];
                idx += 1;
            }
            let p = self.primitives[idx].sample_surface(rng);
            let buried = self.primitives.iter().enumerate().any(|(j, q)| j != idx && q.signed_distance(p) < -1e-9);
            if !buried {
                out.push(p);
            }
        }
        out
    }
}

/// Random scene of `n_prims` primitives, deterministic in `seed`.
pub fn generate_scene(seed: u64, n_prims: usize) -> crate::Result<SyntheticScene> {
    if n_prims == 0 {
        return Err(crate::Error::Invalid("n_prims must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prims = Vec::with_capacity(n_prims);
    while prims.len() < n_prims {
        let albedo = [rng.random_range(0.15..0.95), rng.random_range(0.15..0.95), rng.random_range(0.15..0.95)];
        let center = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let p = if rng.random_bool(0.5) {
            Primitive::sphere(center, rng.random_range(0.1..0.3), albedo)
        } else {
            let half = [rng.random_range(0.06..0.26), rng.random_range(0.06..0.26), rng.random_range(0.06..0.26)];
            Primitive::cuboid(center, half, albedo)
        };
        if p.inside_unit_cube() {
            prims.push(p);
        }
    }
    SyntheticScene::new(prims, seed)
}

/// Look-at cameras on a circle around the origin. `elevations_deg` holds either one
/// value for every view or one value per view; azimuths start at `azimuth0_deg` and are
/// evenly spaced.
pub fn orbit_cameras(
    n_views: usize,
    elevations_deg: &[f64],
    azimuth0_deg: f64,
    radius: f64,
    intrinsics: Intrinsics,
) -> crate::Result<Vec<CameraPose>> {
    if elevations_deg.len() != 1 && elevations_deg.len() != n_views {
        return Err(crate::Error::Invalid(format!("{} elevations for {n_views} views", elevations_deg.len())));
    }
    (0..n_views)
        .map(|i| {
            let el = elevations_deg[if elevations_deg.len() == 1 { 0 } else { i }].to_radians();
            let az = (azimuth0_deg + 360.0 * i as f64 / n_views as f64).to_radians();
            let eye = [radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin()];
            CameraPose::new(intrinsics, Extrinsics::look_at(eye, [0.0; 3], WORLD_UP))
        })
        .collect()
}

/// Number of views on the elevated orbit of [`default_rig`].
pub const RIG_UPPER_VIEWS: usize = 24;
/// Number of views on the near-horizontal orbit of [`default_rig`].
pub const RIG_LOWER_VIEWS: usize = 12;

/// 36-view rig: 24 views stepping 15 degrees in azimuth with elevation rising from 5 to
/// 30 degrees, then 12 views stepping 30 degrees with elevation rising from -5 to 5.
pub fn default_rig(resolution: usize) -> Vec<CameraPose> {
    rig(RIG_UPPER_VIEWS + RIG_LOWER_VIEWS, resolution).expect("valid rig")
}

/// True when all eight corners of `[-0.5, 0.5]^3` project inside the image.
pub fn cube_in_frustum(pose: &CameraPose) -> bool {
    (0..8).all(|i| {
        let c = [if i & 1 == 0 { -0.5 } else { 0.5 }, if i & 2 == 0 { -0.5 } else { 0.5 }, if i & 4 == 0 { -0.5 } else { 0.5 }];
        project(c, pose).visible
    })
}

/// One rendered view: rgb `[H, W, 3]`, camera-z depth `[H, W]` (0 = background), mask `[H, W]`.
#[derive(Clone, Debug)]
pub struct ViewBundle {
    pub rgb: Tensor<f32>,
    pub depth: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub pose: CameraPose,
}

impl ViewBundle {
    pub fn height(&self) -> usize {
        self.pose.height()
    }

    pub fn width(&self) -> usize {
        self.pose.width()
    }

    /// Checks mask/depth/background consistency.
    pub fn is_consistent(&self) -> bool {
        let (d, m) = (self.depth.data(), self.mask.data());
        d.iter().zip(m).enumerate().all(|(i, (&dv, &mv))| {
            let bg_ok = mv != 0.0 || self.rgb.data()[i * 3..i * 3 + 3] == BACKGROUND;
            ((mv == 0.0) == (dv == 0.0)) && (mv == 0.0 || mv == 1.0) && bg_ok
        })
    }
}

fn shade(albedo: [f64; 3], normal: Vec3) -> [f32; 3] {
    let lambert = dot(normal, LIGHT_DIR).max(0.0);
    let k = AMBIENT + (1.0 - AMBIENT) * lambert;
    [(albedo[0] * k).min(1.0) as f32, (albedo[1] * k).min(1.0) as f32, (albedo[2] * k).min(1.0) as f32]
}

/// Renders `scene` from `pose` at the pose's resolution by casting one ray through
/// each pixel centre.
pub fn render_reference(scene: &SyntheticScene, pose: &CameraPose) -> ViewBundle {
    let (h, w) = (pose.height(), pose.width());
    let mut rgb = Vec::with_capacity(h * w * 3);
    let mut depth = vec![0.0f32; h * w];
    let mut mask = vec![0.0f32; h * w];
    let o = pose.origin();
    for row in 0..h {
        for col in 0..w {
            // camera-z of this direction is 1, so the ray parameter is the depth
            let d = pose.pixel_direction(col as f64, row as f64);
            match scene.intersect(o, d) {
                Some((t, n, albedo)) => {
                    rgb.extend_from_slice(&shade(albedo, n));
                    depth[row * w + col] = t as f32;
                    mask[row * w + col] = 1.0;
                }
                None => rgb.extend_from_slice(&BACKGROUND),
            }
        }
    }
    ViewBundle {
        rgb: Tensor::new(&[h, w, 3], rgb).unwrap(),
        depth: Tensor::new(&[h, w], depth).unwrap(),
        mask: Tensor::new(&[h, w], mask).unwrap(),
        pose: *pose,
    }
}

/// Renders every pose of the rig.
pub fn render_views(scene: &SyntheticScene, poses: &[CameraPose]) -> Vec<ViewBundle> {
    poses.iter().map(|p| render_reference(scene, p)).collect()
}

/// Poses for `n_views` views on the two-path orbit: the first `ceil(2n/3)` views on the
/// elevated path, the rest near the horizon. `rig(36, res)` equals [`default_rig`].
pub fn rig(n_views: usize, resolution: usize) -> crate::Result<Vec<CameraPose>> {
    if n_views == 0 {
        return Err(crate::Error::Invalid("a rig needs at least one view".into()));
    }
    let k = Intrinsics::from_fov(DEFAULT_FOV_DEG, resolution, resolution);
    let upper_n = (2 * n_views).div_ceil(3);
    let lower_n = n_views - upper_n;
    let ramp = |n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|i| if n == 1 { lo } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
    };
    let mut poses = orbit_cameras(upper_n, &ramp(upper_n, 5.0, 30.0), 0.0, DEFAULT_RADIUS, k)?;
    if lower_n > 0 {
        let az0 = 180.0 / lower_n as f64;
        poses.extend(orbit_cameras(lower_n, &ramp(lower_n, -5.0, 5.0), az0, DEFAULT_RADIUS, k)?);
    }
    Ok(poses)
}

/// A scene with its rendered views, as stored in a bundle directory.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub scene: Option<SyntheticScene>,
    pub views: Vec<ViewBundle>,
}

pub const POSES_FILE: &str = "poses.jsonl";
pub const SCENE_FILE: &str = "scene.json";

fn view_path(dir: &Path, i: usize, suffix: &str) -> PathBuf {
    dir.join(format!("view_{i:03}_{suffix}"))
}

impl SceneBundle {
    pub fn render(scene: SyntheticScene, poses: &[CameraPose]) -> Self {
        let views = render_views(&scene, poses);
        Self { scene: Some(scene), views }
    }

    pub fn poses(&self) -> Vec<CameraPose> {
        self.views.iter().map(|v| v.pose).collect()
    }

    /// Writes `poses.jsonl`, `scene.json` and per view an rgb PNG, a mask PNG and a
    /// depth file.
    pub fn save(&self, dir: &Path) -> crate::Result<()> {
        fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
        let poses_path = dir.join(POSES_FILE);
        let f = fs::File::create(&poses_path).map_err(|e| crate::Error::io(&poses_path, e))?;
        let mut w = BufWriter::new(f);
        geometry::write_poses(&mut w, &self.poses()).map_err(|e| crate::Error::io(&poses_path, e))?;
        w.flush().map_err(|e| crate::Error::io(&poses_path, e))?;
        if let Some(scene) = &self.scene {
            let json = serde_json::to_string_pretty(scene).expect("scene serializes");
            let p = dir.join(SCENE_FILE);
            fs::write(&p, json).map_err(|e| crate::Error::io(&p, e))?;
        }
        for (i, v) in self.views.iter().enumerate() {
            formats::write_png(&view_path(dir, i, "rgb.png"), &v.rgb)?;
            formats::write_png(&view_path(dir, i, "mask.png"), &v.mask)?;
            formats::write_depth(&view_path(dir, i, "depth.bin"), &v.depth)?;
        }
        Ok(())
    }

    /// Loads a bundle directory; `scene.json` is optional.
    pub fn load(dir: &Path) -> crate::Result<Self> {
        let poses_path = dir.join(POSES_FILE);
        let f = fs::File::open(&poses_path).map_err(|e| crate::Error::io(&poses_path, e))?;
        let poses = geometry::read_poses(BufReader::new(f)).map_err(|e| crate::Error::format(&poses_path, e.to_string()))?;
        let scene_path = dir.join(SCENE_FILE);
        let scene = if scene_path.exists() {
            let text = fs::read_to_string(&scene_path).map_err(|e| crate::Error::io(&scene_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| crate::Error::format(&scene_path, e.to_string()))?)
        } else {
            None
        };
        let mut views = Vec::with_capacity(poses.len());
        for (i, pose) in poses.into_iter().enumerate() {
            let rgb = formats::read_png_rgb(&view_path(dir, i, "rgb.png"))?;
            let mut mask = formats::read_png_gray(&view_path(dir, i, "mask.png"))?;
            mask.data_mut().iter_mut().for_each(|m| *m = if *m > 0.5 { 1.0 } else { 0.0 });
            let depth = formats::read_depth(&view_path(dir, i, "depth.bin"))?;
            let (h, w) = (pose.height(), pose.width());
            if rgb.shape() != [h, w, 3] || mask.shape() != [h, w] || depth.shape() != [h, w] {
                return Err(crate::Error::format(dir, format!("view {i} does not match its {w}x{h} pose")));
            }
            views.push(ViewBundle { rgb, depth, mask, pose });
        }
        if views.is_empty() {
            return Err(crate::Error::format(&poses_path, "no views"));
        }
        Ok(Self { scene, views })
    }
}

/// Options for writing a synthetic dataset.
#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_prims: usize,
    pub views: usize,
    pub resolution: usize,
}

/// Seed of the `i`-th scene of a dataset.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

pub fn scene_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("scene_{index:04}"))
}

/// Renders and stores `n_scenes` scenes under `root/scene_XXXX`.
pub fn write_dataset(root: &Path, spec: &DatasetSpec) -> crate::Result<Vec<PathBuf>> {
    let poses = rig(spec.views, spec.resolution)?;
    (0..spec.n_scenes)
        .map(|i| {
            let scene = generate_scene(scene_seed(spec.seed, i), spec.n_prims)?;
            let dir = scene_dir(root, i);
            SceneBundle::render(scene, &poses).save(&dir)?;
            Ok(dir)
        })
        .collect()
}

/// Scene directories under `root`, sorted by name.
pub fn list_scenes(root: &Path) -> crate::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| crate::Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(POSES_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() && root.join(POSES_FILE).is_file() {
        dirs.push(root.to_path_buf());
    }
    if dirs.is_empty() {
        return Err(crate::Error::Invalid(format!("no scene bundles under {}", root.display())));
    }
    Ok(dirs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{norm, unproject};

    fn centered_sphere() -> SyntheticScene {
        SyntheticScene::new(vec![Primitive::sphere([0.0; 3], 0.3, [0.8, 0.2, 0.2])], 0).unwrap()
    }

    #[test]
    fn same_seed_same_scene() {
        assert_eq!(generate_scene(42, 5).unwrap(), generate_scene(42, 5).unwrap());
        assert_ne!(generate_scene(42, 5).unwrap(), generate_scene(43, 5).unwrap());
        assert!(generate_scene(1, 0).is_err());
    }

    #[test]
    fn generated_primitives_fit_the_cube() {
        for seed in 0..20 {
            let s = generate_scene(seed, 8).unwrap();
            assert_eq!(s.primitives.len(), 8);
            assert!(s.primitives.iter().all(Primitive::inside_unit_cube));
        }
    }

    #[test]
    fn forced_single_sphere() {
        let s = centered_sphere();
        assert_eq!(s.primitives.len(), 1);
        assert!(SyntheticScene::new(vec![Primitive::sphere([0.4, 0.0, 0.0], 0.3, [1.0; 3])], 0).is_err());
    }

    #[test]
    fn four_views_at_zero_elevation() {
        let k = Intrinsics::from_fov(60.0, 32, 32);
        let poses = orbit_cameras(4, &[0.0], 0.0, 2.0, k).unwrap();
        let expected = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [-2.0, 0.0, 0.0], [0.0, -2.0, 0.0]];
        for (p, e) in poses.iter().zip(expected) {
            assert!(norm(sub(p.origin(), e)) < 1e-12);
            assert!((norm(p.origin()) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rig_looks_at_origin_and_sees_the_cube() {
        let rig = default_rig(64);
        assert_eq!(rig.len(), RIG_UPPER_VIEWS + RIG_LOWER_VIEWS);
        assert_eq!((RIG_UPPER_VIEWS, RIG_LOWER_VIEWS), (24, 12));
        for pose in &rig {
            let p = project([0.0; 3], pose);
            assert!(p.visible);
            assert!((p.u - pose.intrinsics.cx).abs() < 1e-9 && (p.v - pose.intrinsics.cy).abs() < 1e-9);
            assert!(cube_in_frustum(pose));
        }
    }

    #[test]
    fn miss_pixel_is_background() {
        let k = Intrinsics::from_fov(60.0, 32, 32);
        let pose = CameraPose::new(k, Extrinsics::look_at([0.0, 0.0, 2.0], [0.0; 3], [0.0, 1.0, 0.0])).unwrap();
        let v = render_reference(&centered_sphere(), &pose);
        assert_eq!(v.depth.data()[0], 0.0);
        assert_eq!(v.mask.data()[0], 0.0);
        assert_eq!(&v.rgb.data()[..3], &BACKGROUND);
        assert!(v.is_consistent());
    }

    #[test]
    fn sphere_depth_on_axis() {
        let k = Intrinsics::from_fov(60.0, 64, 64);
        let pose = CameraPose::new(k, Extrinsics::look_at([0.0, 0.0, 2.0], [0.0; 3], [0.0, 1.0, 0.0])).unwrap();
        let v = render_reference(&centered_sphere(), &pose);
        let d = v.depth.data()[32 * 64 + 32];
        assert!((d as f64 - 1.7).abs() < 1e-4, "{d}");
    }

    #[test]
    fn unprojected_pixels_lie_on_surfaces() {
        let scene = generate_scene(7, 6).unwrap();
        for pose in default_rig(48).iter().step_by(5) {
            let v = render_reference(&scene, pose);
            assert!(v.is_consistent());
            for row in 0..48 {
                for col in 0..48 {
                    let d = v.depth.data()[row * 48 + col];
                    if d > 0.0 {
                        let p = unproject(col as f64, row as f64, d as f64, pose).unwrap();
                        assert!(scene.signed_distance(p).abs() < 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn cross_view_depth_agrees_or_is_occluded() {
        let scene = generate_scene(3, 5).unwrap();
        let rig = default_rig(48);
        let a = render_reference(&scene, &rig[0]);
        let (mut agree, mut total) = (0, 0);
        for row in 0..48 {
            for col in 0..48 {
                let d = a.depth.data()[row * 48 + col];
                if d == 0.0 {
                    continue;
                }
                let p = unproject(col as f64, row as f64, d as f64, &rig[0]).unwrap();
                let pr = project(p, &rig[3]);
                if !pr.visible {
                    continue;
                }
                // the ray through the projected point's exact location, not the pixel centre
                let hit = scene.intersect(rig[3].origin(), rig[3].pixel_direction(pr.u, pr.v));
                total += 1;
                if let Some((t, _, _)) = hit {
                    if (t - pr.z).abs() < 1e-3 {
                        agree += 1;
                    } else {
                        assert!(t < pr.z, "surface point hidden behind nothing");
                    }
                }
            }
        }
        assert!(total > 100 && agree > 0);
    }

    #[test]
    fn surface_samples_are_on_the_outer_surface() {
        let scene = generate_scene(11, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = scene.sample_surface(2000, &mut rng);
        assert_eq!(pts.len(), 2000);
        for p in pts {
            assert!(scene.signed_distance(p).abs() < 1e-9);
        }
    }

    #[test]
    fn rig_36_matches_default() {
        let a = rig(36, 32).unwrap();
        let b = default_rig(32);
        for (x, y) in a.iter().zip(&b) {
            assert!(norm(sub(x.origin(), y.origin())) < 1e-12);
        }
        assert_eq!(rig(8, 32).unwrap().len(), 8);
        assert_eq!(rig(1, 32).unwrap().len(), 1);
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = generate_scene(9, 3).unwrap();
        let b = SceneBundle::render(scene.clone(), &rig(3, 24).unwrap());
        b.save(dir.path()).unwrap();
        let back = SceneBundle::load(dir.path()).unwrap();
        assert_eq!(back.scene.as_ref(), Some(&scene));
        assert_eq!(back.views.len(), 3);
        for (x, y) in back.views.iter().zip(&b.views) {
            assert_eq!(x.pose, y.pose);
            assert_eq!(x.depth, y.depth);
            assert_eq!(x.mask, y.mask);
            assert!(x.rgb.max_abs_diff(&y.rgb) <= 0.5 / 255.0 + 1e-6);
            assert!(x.is_consistent());
        }
    }

    #[test]
    fn dataset_listing_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec { seed: 1, n_scenes: 3, n_prims: 2, views: 2, resolution: 16 };
        let written = write_dataset(dir.path(), &spec).unwrap();
        assert_eq!(list_scenes(dir.path()).unwrap(), written);
        assert!(list_scenes(&dir.path().join("scene_0000")).is_ok());
        assert!(list_scenes(&dir.path().join("nope")).is_err());
    }
}
