//! Rigid poses, pinhole intrinsics, bounding boxes and the disentangled pose
//! update.
//!
//! Pixel `(l, m)` has its center at continuous image coordinate `(l, m)`. A
//! point `p` in camera space projects to `(p_x + f_x p.x / -p.z, p_y + f_y p.y / -p.z)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-6;
const DEGENERATE_EPS: f64 = 1e-8;

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub px: f64,
    pub py: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, px: f64, py: f64) -> Result<Self> {
        let k = Self { fx, fy, px, py };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.px, self.py].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive and finite, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }

    /// Projects a camera-space point. Points with `z >= 0` are behind the
    /// camera and yield `None`.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        if p.z >= 0.0 {
            return None;
        }
        let depth = -p.z;
        Some([self.px + self.fx * p.x / depth, self.py + self.fy * p.y / depth])
    }

    /// Unit direction of the ray through continuous pixel coordinate `(u, v)`.
    ///
    /// With `f_x = f_y = f` this is `(u - p_x, v - p_y, -f)` normalized.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.px) / self.fx, (v - self.py) / self.fy, -1.0).normalize()
    }
}

/// Axis-aligned image box. `(x, y)` is the top-left pixel and the box spans
/// `w × h` pixels, i.e. the continuous extent `[x - 0.5, x + w - 0.5]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    /// Box of the given size centered on continuous coordinate `(cx, cy)`.
    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { x: cx - 0.5 * w + 0.5, y: cy - 0.5 * h + 0.5, w, h }
    }

    /// Tight box around an inclusive pixel index range.
    pub fn from_pixel_range(min_x: usize, min_y: usize, max_x: usize, max_y: usize) -> Self {
        Self {
            x: min_x as f64,
            y: min_y as f64,
            w: (max_x - min_x + 1) as f64,
            h: (max_y - min_y + 1) as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::DegenerateBox { w: self.w, h: self.h });
        }
        Ok(())
    }

    pub fn center(&self) -> [f64; 2] {
        [self.x + 0.5 * self.w - 0.5, self.y + 0.5 * self.h - 0.5]
    }

    /// Zoom-in box: the shorter side is expanded symmetrically so the box
    /// becomes square around the same center.
    pub fn squared(&self) -> Self {
        let side = self.w.max(self.h);
        let [cx, cy] = self.center();
        Self::centered(cx, cy, side, side)
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.w * self.h + other.w * other.h - inter)
    }
}

/// Rigid transform from object space to camera space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl Pose {
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Result<Self> {
        let pose = Self { r, t };
        pose.validate_rotation()?;
        Ok(pose)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { r: Matrix3::identity(), t }
    }

    /// Checks orthonormality and `det(R) = 1`.
    pub fn validate_rotation(&self) -> Result<()> {
        if !self.r.iter().chain(self.t.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entries".into()));
        }
        let ortho = (self.r.transpose() * self.r - Matrix3::identity()).amax();
        let det = self.r.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation not orthonormal (|RᵀR - I| = {ortho:.3e}, det = {det})"
            )));
        }
        Ok(())
    }

    /// Full validity under the internal convention: a proper rotation and the
    /// object in front of the camera.
    pub fn validate(&self) -> Result<()> {
        self.validate_rotation()?;
        if self.t.z >= 0.0 {
            return Err(Error::InvalidPose(format!(
                "t_z = {} must be negative (camera looks along -z)",
                self.t.z
            )));
        }
        Ok(())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r * p + self.t
    }

    /// Camera space to object space.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.r.transpose() * (p - self.t)
    }
}

/// The disentangled 9-parameter relative pose: image-space shift in pixels,
/// relative depth scale and two vectors spanning the relative rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseDelta {
    pub v_x: f64,
    pub v_y: f64,
    pub v_z: f64,
    pub e1: Vector3<f64>,
    pub e2: Vector3<f64>,
}

impl PoseDelta {
    pub fn identity() -> Self {
        Self {
            v_x: 0.0,
            v_y: 0.0,
            v_z: 1.0,
            e1: Vector3::x(),
            e2: Vector3::y(),
        }
    }

    /// Parameter order: `v_x, v_y, v_z, e1, e2`.
    pub fn to_params(&self) -> [f64; 9] {
        [
            self.v_x, self.v_y, self.v_z, self.e1.x, self.e1.y, self.e1.z, self.e2.x, self.e2.y,
            self.e2.z,
        ]
    }

    pub fn from_params(p: &[f64; 9]) -> Self {
        Self {
            v_x: p[0],
            v_y: p[1],
            v_z: p[2],
            e1: Vector3::new(p[3], p[4], p[5]),
            e2: Vector3::new(p[6], p[7], p[8]),
        }
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        rotation_from_6d(&self.e1, &self.e2)
    }
}

/// Builds a rotation whose columns are `r1 = e1/|e1|`, `r3 = r1 × e2`
/// (normalized) and `r2 = r3 × r1`.
pub fn rotation_from_6d(e1: &Vector3<f64>, e2: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let n1 = e1.norm();
    let n2 = e2.norm();
    if !(n1 > DEGENERATE_EPS) || !(n2 > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotationInput("zero-length basis vector"));
    }
    let r1 = e1 / n1;
    let cross = r1.cross(e2) / n2;
    // |cross| = sin of the angle between e1 and e2
    let sin = cross.norm();
    if !(sin > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotationInput("basis vectors are parallel"));
    }
    let r3 = cross / sin;
    let r2 = r3.cross(&r1);
    Ok(Matrix3::from_columns(&[r1, r2, r3]))
}

/// Applies a relative update: the translation moves in image space and depth
/// scale, the rotation composes on the left.
pub fn apply_delta(prev: &Pose, delta: &PoseDelta, k: &CameraIntrinsics) -> Result<Pose> {
    if prev.t.z == 0.0 {
        return Err(Error::InvalidPose("t_z must be nonzero".into()));
    }
    let rel = delta.rotation()?;
    let tz = delta.v_z * prev.t.z;
    // t_x / t_z · t'_z written as t_x · v_z so the identity update is exact
    let tx = prev.t.x * delta.v_z + delta.v_x / k.fx * tz;
    let ty = prev.t.y * delta.v_z + delta.v_y / k.fy * tz;
    Ok(Pose {
        r: rel * prev.r,
        t: Vector3::new(tx, ty, tz),
    })
}

/// Inverse of [`apply_delta`]. The rotation vectors are returned as the first
/// two columns of the relative rotation.
pub fn extract_delta(prev: &Pose, next: &Pose, k: &CameraIntrinsics) -> Result<PoseDelta> {
    if prev.t.z == 0.0 || next.t.z == 0.0 {
        return Err(Error::InvalidPose("t_z must be nonzero".into()));
    }
    let rel = next.r * prev.r.transpose();
    Ok(PoseDelta {
        v_x: k.fx * (next.t.x / next.t.z - prev.t.x / prev.t.z),
        v_y: k.fy * (next.t.y / next.t.z - prev.t.y / prev.t.z),
        v_z: next.t.z / prev.t.z,
        e1: rel.column(0).into_owned(),
        e2: rel.column(1).into_owned(),
    })
}

/// Initial pose that fits the unit-ball object into the box: identity rotation,
/// depth from the box size, lateral offset so the object center projects to
/// the box center.
pub fn initial_pose(b: &BoundingBox, k: &CameraIntrinsics) -> Pose {
    let diameter = 2.0;
    let depth = 0.5 * diameter * (k.fx / b.w + k.fy / b.h);
    let [cx, cy] = b.center();
    let tz = -depth;
    Pose {
        r: Matrix3::identity(),
        t: Vector3::new((cx - k.px) * depth / k.fx, (cy - k.py) * depth / k.fy, tz),
    }
}

/// Angle of the relative rotation `R_aᵀ R_b` in `[0, π]`.
pub fn geodesic_distance(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let m = ra.transpose() * rb;
    let cos = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // The skew part carries sin θ; atan2 keeps precision near 0 and π where
    // acos alone loses half the digits.
    let skew = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);
    let sin = 0.5 * skew.norm();
    if cos.abs() < 0.9 {
        cos.acos()
    } else {
        sin.atan2(cos)
    }
}

fn is_signed_permutation(d: &Matrix3<f64>) -> bool {
    let entries_ok = d.iter().all(|&v| v == 0.0 || v == 1.0 || v == -1.0);
    let rows_ok = (0..3).all(|i| d.row(i).iter().filter(|v| **v != 0.0).count() == 1);
    let cols_ok = (0..3).all(|j| d.column(j).iter().filter(|v| **v != 0.0).count() == 1);
    entries_ok && rows_ok && cols_ok
}

/// Re-expresses a pose under a different camera basis: `R' = D R D`, `t' = D t`.
///
/// Object points follow with [`convert_point`], so `R' x' + t' = D (R x + t)`.
pub fn convert_convention(p: &Pose, basis_change: &Matrix3<f64>) -> Result<Pose> {
    if !is_signed_permutation(basis_change) {
        return Err(Error::InvalidBasisChange);
    }
    Ok(Pose {
        r: basis_change * p.r * basis_change,
        t: basis_change * p.t,
    })
}

/// Object-space counterpart of [`convert_convention`]: `x' = Dᵀ x`.
pub fn convert_point(x: &Vector3<f64>, basis_change: &Matrix3<f64>) -> Vector3<f64> {
    basis_change.transpose() * x
}

/// Source camera conventions accepted in pose files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// Internal: camera looks along -z.
    NegZForward,
    /// OpenCV-style: camera looks along +z.
    PosZForward,
}

impl Convention {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "neg_z_forward" => Ok(Self::NegZForward),
            "pos_z_forward" => Ok(Self::PosZForward),
            other => Err(Error::ConventionUnknown(other.to_string())),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NegZForward => "neg_z_forward",
            Self::PosZForward => "pos_z_forward",
        }
    }

    /// Basis change taking this convention to the internal one. It is an
    /// involution, so it also maps back.
    pub fn basis_change(&self) -> Matrix3<f64> {
        match self {
            Self::NegZForward => Matrix3::identity(),
            Self::PosZForward => Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)),
        }
    }
}

/// On-disk pose fragment: `{"R": [9 row-major], "t": [3], "convention": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convention: Option<String>,
}

impl PoseJson {
    pub fn from_pose(p: &Pose, convention: Convention) -> Self {
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = p.r[(i, j)];
            }
        }
        Self {
            r,
            t: [p.t.x, p.t.y, p.t.z],
            convention: Some(convention.as_str().to_string()),
        }
    }

    /// Raw pose in the fragment's own convention.
    pub fn raw_pose(&self) -> Pose {
        Pose {
            r: Matrix3::from_row_slice(&self.r),
            t: Vector3::new(self.t[0], self.t[1], self.t[2]),
        }
    }

    pub fn convention_or(&self, default: Convention) -> Result<Convention> {
        match &self.convention {
            Some(s) => Convention::parse(s),
            None => Ok(default),
        }
    }

    /// Pose converted to the internal convention and scaled so the object has
    /// diameter 2.
    pub fn to_internal(&self, default: Convention, d_real: f64) -> Result<Pose> {
        let conv = self.convention_or(default)?;
        let mut pose = convert_convention(&self.raw_pose(), &conv.basis_change())?;
        pose.t /= 0.5 * d_real;
        pose.validate()?;
        Ok(pose)
    }

    /// Inverse of [`PoseJson::to_internal`].
    pub fn from_internal(p: &Pose, conv: Convention, d_real: f64) -> Result<Self> {
        let mut pose = convert_convention(p, &conv.basis_change())?;
        pose.t *= 0.5 * d_real;
        Ok(Self::from_pose(&pose, conv))
    }
}
