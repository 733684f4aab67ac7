//! Analytic synthetic objects and a pixel-center ray tracer for them.
//!
//! Shapes are normalized to fit the unit ball exactly (diameter 2), so
//! synthetic manifests use `d_real = 2` and poses need no rescaling.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{BoundingBox, CameraIntrinsics, Convention, Pose, PoseJson};
use crate::raster::{Mask, RgbImage};
use crate::reconstruction::Observation;

use super::{save_manifest, FrameEntry, ObjectEntry, SceneManifest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    /// Box elongated along x with side ratio `aspect : 1 : 1`.
    Box { aspect: f64 },
    /// Sphere whose `x >= 0` and `x < 0` halves have different colors.
    TwoToneSphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Uniform { rgb: [f64; 3] },
    /// Each channel ramps linearly along its own object axis, within
    /// `[0.15, 0.85]`, which makes every rotation visible.
    AxisGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticShape {
    #[serde(flatten)]
    pub kind: ShapeKind,
    pub texture: Texture,
}

const TWO_TONE: [[f64; 3]; 2] = [[0.85, 0.3, 0.2], [0.2, 0.4, 0.85]];

impl SyntheticShape {
    pub fn new(kind: ShapeKind, texture: Texture) -> Result<Self> {
        if let ShapeKind::Box { aspect } = kind {
            if !(aspect.is_finite() && aspect > 0.0) {
                return Err(Error::InvalidArgument(format!("box aspect must be positive, got {aspect}")));
            }
        }
        if let Texture::Uniform { rgb } = texture {
            if rgb.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidArgument("uniform color must lie in [0, 1]".into()));
            }
        }
        Ok(Self { kind, texture })
    }

    pub fn sphere(texture: Texture) -> Self {
        Self { kind: ShapeKind::Sphere, texture }
    }

    pub fn cube(texture: Texture) -> Self {
        Self { kind: ShapeKind::Cube, texture }
    }

    /// Half side lengths for box-like shapes, `None` for spheres.
    pub fn half_extents(&self) -> Option<Vector3<f64>> {
        match self.kind {
            ShapeKind::Sphere | ShapeKind::TwoToneSphere => None,
            ShapeKind::Cube => Some(Vector3::repeat(1.0 / 3f64.sqrt())),
            ShapeKind::Box { aspect } => {
                let k = 1.0 / (aspect * aspect + 2.0).sqrt();
                Some(Vector3::new(aspect * k, k, k))
            }
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        match self.half_extents() {
            None => p.norm_squared() <= 1.0,
            Some(e) => p.x.abs() <= e.x && p.y.abs() <= e.y && p.z.abs() <= e.z,
        }
    }

    /// First intersection of the ray `o + s·d`, `s > 0`, with the surface.
    pub fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Vector3<f64>> {
        match self.half_extents() {
            None => {
                let a = d.norm_squared();
                let b = o.dot(d);
                let c = o.norm_squared() - 1.0;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let s = if -b - sq > 0.0 { (-b - sq) / a } else { (-b + sq) / a };
                (s > 0.0).then(|| o + d * s)
            }
            Some(e) => {
                let (mut near, mut far) = (f64::NEG_INFINITY, f64::INFINITY);
                for i in 0..3 {
                    if d[i] == 0.0 {
                        if o[i].abs() > e[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = (-e[i] - o[i]) / d[i];
                    let b = (e[i] - o[i]) / d[i];
                    near = near.max(a.min(b));
                    far = far.min(a.max(b));
                }
                if near > far || far <= 0.0 {
                    return None;
                }
                let s = if near > 0.0 { near } else { far };
                Some(o + d * s)
            }
        }
    }

    pub fn color(&self, p: &Vector3<f64>) -> [f64; 3] {
        if self.kind == ShapeKind::TwoToneSphere {
            return TWO_TONE[(p.x < 0.0) as usize];
        }
        match self.texture {
            Texture::Uniform { rgb } => rgb,
            Texture::AxisGradient => {
                let e = self.half_extents().unwrap_or(Vector3::repeat(1.0));
                let ramp = |i: usize| 0.15 + 0.35 * (p[i] / e[i] + 1.0).clamp(0.0, 2.0);
                [ramp(0), ramp(1), ramp(2)]
            }
        }
    }

    /// Points uniformly distributed over the surface.
    pub fn surface_points<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<Vector3<f64>> {
        match self.half_extents() {
            None => (0..n).map(|_| random_unit_vector(rng)).collect(),
            Some(e) => {
                let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
                let total: f64 = areas.iter().sum();
                (0..n)
                    .map(|_| {
                        let mut pick = rng.random::<f64>() * total;
                        let mut axis = 2;
                        for (i, a) in areas.iter().enumerate() {
                            if pick < *a {
                                axis = i;
                                break;
                            }
                            pick -= a;
                        }
                        let mut p = Vector3::from_fn(|i, _| e[i] * rng.random_range(-1.0..=1.0));
                        p[axis] = if rng.random::<bool>() { e[axis] } else { -e[axis] };
                        p
                    })
                    .collect()
            }
        }
    }

    /// Renders color and silhouette by tracing one ray through every pixel
    /// center. Background pixels are black and unmasked.
    pub fn render(&self, pose: &Pose, k: &CameraIntrinsics, width: usize, height: usize) -> (RgbImage, Mask) {
        let mut img = RgbImage::new(width, height);
        let mut mask = Mask::new(width, height);
        let origin = pose.inverse_transform_point(&Vector3::zeros());
        let rt = pose.r.transpose();
        for y in 0..height {
            for x in 0..width {
                let d = rt * k.ray_direction(x as f64, y as f64);
                if let Some(hit) = self.intersect(&origin, &d) {
                    let c = self.color(&hit);
                    img.set(x, y, [c[0] as f32, c[1] as f32, c[2] as f32]);
                    mask.set(x, y, true);
                }
            }
        }
        (img, mask)
    }
}

pub fn random_unit_vector<R: Rng>(rng: &mut R) -> Vector3<f64> {
    loop {
        let v = Vector3::from_fn(|_, _| rng.random_range(-1.0..=1.0));
        let n = v.norm();
        if n > 1e-6 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Uniformly distributed rotation (Shoemake's method).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = nalgebra::Quaternion::new(b * (tau * u3).cos(), a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

/// Rotation by `angle` about a uniformly random axis.
pub fn random_axis_rotation<R: Rng>(rng: &mut R, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Unit::new_unchecked(random_unit_vector(rng)), angle).into_inner()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSampler {
    pub intrinsics: CameraIntrinsics,
    pub width: usize,
    pub height: usize,
    /// Range of `‖t‖`.
    pub distance: (f64, f64),
    /// Maximum offset, in pixels, of the projected object center from the
    /// principal point along each axis.
    pub center_jitter: f64,
}

impl ViewSampler {
    /// Square images with a focal length that keeps the unit ball inside the
    /// frame at the nearest distance.
    pub fn new(size: usize) -> Self {
        let s = size as f64;
        Self {
            intrinsics: CameraIntrinsics { fx: 0.95 * s, fy: 0.95 * s, px: 0.5 * s - 0.5, py: 0.5 * s - 0.5 },
            width: size,
            height: size,
            distance: (3.0, 8.0),
            center_jitter: s / 16.0,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Pose {
        let r = random_rotation(rng);
        let dist = rng.random_range(self.distance.0..=self.distance.1);
        let j = self.center_jitter;
        let (du, dv) = if j > 0.0 { (rng.random_range(-j..=j), rng.random_range(-j..=j)) } else { (0.0, 0.0) };
        let k = &self.intrinsics;
        Pose { r, t: k.ray_direction(k.px + du, k.py + dv) * dist }
    }
}

/// Six views looking at the object along `±x`, `±y`, `±z`, centered, at
/// distance `distance`.
pub fn axis_aligned_poses(distance: f64) -> Vec<Pose> {
    let z = Vector3::z();
    let axes = [Vector3::x(), -Vector3::x(), Vector3::y(), -Vector3::y(), Vector3::z(), -Vector3::z()];
    axes.iter()
        .map(|a| {
            // rotate so the object axis `a` faces the camera (camera +z)
            let r = Rotation3::rotation_between(a, &z)
                .unwrap_or_else(|| Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
            Pose { r: r.into_inner(), t: Vector3::new(0.0, 0.0, -distance) }
        })
        .collect()
}

/// Bounding box of the set mask pixels, or the whole image if empty.
pub fn mask_bbox(mask: &Mask) -> BoundingBox {
    match mask.extent() {
        Some((x0, y0, x1, y1)) => BoundingBox::from_pixel_range(x0, y0, x1, y1),
        None => BoundingBox { x: 0.0, y: 0.0, w: mask.width as f64, h: mask.height as f64 },
    }
}

pub fn observe(shape: &SyntheticShape, pose: &Pose, k: &CameraIntrinsics, width: usize, height: usize) -> Observation {
    let (image, mask) = shape.render(pose, k, width, height);
    let bbox = mask_bbox(&mask);
    Observation { image, mask, pose: *pose, intrinsics: *k, bbox }
}

pub fn observe_all(shape: &SyntheticShape, poses: &[Pose], k: &CameraIntrinsics, width: usize, height: usize) -> Vec<Observation> {
    use rayon::prelude::*;
    poses.par_iter().map(|p| observe(shape, p, k, width, height)).collect()
}

/// Renders `poses` into `out_dir` as `frame{i}.png` / `mask{i}.png` and
/// writes `manifest.json` next to them.
pub fn write_scene(
    shape: &SyntheticShape,
    object_id: &str,
    poses: &[Pose],
    k: &CameraIntrinsics,
    width: usize,
    height: usize,
    out_dir: &Path,
) -> Result<SceneManifest> {
    std::fs::create_dir_all(out_dir)?;
    let observations = observe_all(shape, poses, k, width, height);
    let mut frames = Vec::with_capacity(poses.len());
    for (i, obs) in observations.iter().enumerate() {
        let image = format!("frame{i}.png");
        let mask = format!("mask{i}.png");
        obs.image.save(out_dir.join(&image))?;
        obs.mask.save(out_dir.join(&mask))?;
        frames.push(FrameEntry {
            id: i,
            image,
            mask,
            pose: PoseJson::from_pose(&obs.pose, Convention::NegZForward),
            intrinsics: *k,
            bbox: obs.bbox,
            object_id: object_id.to_string(),
        });
    }
    let manifest = SceneManifest {
        convention: Convention::NegZForward.as_str().to_string(),
        objects: vec![ObjectEntry { id: object_id.to_string(), d_real: 2.0, shape: Some(*shape) }],
        frames,
    };
    save_manifest(&manifest, out_dir.join("manifest.json"))?;
    Ok(manifest)
}
