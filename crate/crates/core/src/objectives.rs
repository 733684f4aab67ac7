//! Pose objectives and their gradients with respect to the 9-parameter delta.
//!
//! Grid matching (GM) compares the object-space RoI grids of two poses point
//! by point; grid distance (GD) compares the object distances `‖t‖`. Point
//! matching (PM) and image matching (IM) are kept as baselines.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, RayGrid};
use crate::pose::{apply_delta, BoundingBox, CameraIntrinsics, Pose, PoseDelta};
use crate::projector::{self, Appearance, FeatureSampler};
use crate::reconstruction::VoxelFeature;

/// Grid resolution and loss weighting shared by the grid-based objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub out_res: usize,
    pub n_z: usize,
    pub lambda_gd: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { out_res: 128, n_z: 64, lambda_gd: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gm: f64,
    pub gd: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub im: Option<f64>,
    pub lambda_gd: f64,
}

/// Mean pointwise Euclidean distance between two object-space grids.
pub fn gm_loss(pred: &RayGrid, gt: &RayGrid) -> Result<f64> {
    if !pred.same_shape(gt) || pred.stage != gt.stage {
        return Err(Error::ShapeMismatch(format!(
            "grids {}×{}×{} ({:?}) vs {}×{}×{} ({:?})",
            pred.height, pred.width, pred.n_z, pred.stage, gt.height, gt.width, gt.n_z, gt.stage
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    // per-ray partial sums keep the reduction order independent of threading
    let n_z = pred.n_z;
    let partial: Vec<f64> = pred
        .points
        .par_chunks(n_z)
        .zip(gt.points.par_chunks(n_z))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).norm()).sum())
        .collect();
    Ok(partial.iter().sum::<f64>() / pred.len() as f64)
}

pub fn gd_loss(pred_t: &Vector3<f64>, gt_t: &Vector3<f64>) -> f64 {
    (gt_t.norm() - pred_t.norm()).abs()
}

pub fn total_loss(
    pred: &Pose,
    gt: &Pose,
    k: &CameraIntrinsics,
    b: &BoundingBox,
    cfg: &GridConfig,
) -> Result<LossReport> {
    let gp = grid::object_grid(k, b, pred, cfg.out_res, cfg.n_z)?;
    let gg = grid::object_grid(k, b, gt, cfg.out_res, cfg.n_z)?;
    let gm = gm_loss(&gp, &gg)?;
    let gd = gd_loss(&pred.t, &gt.t);
    Ok(LossReport { gm, gd, total: gm + cfg.lambda_gd * gd, pm: None, im: None, lambda_gd: cfg.lambda_gd })
}

/// Mean distance between matched points transformed by the two poses.
pub fn pm_loss(pred: &Pose, gt: &Pose, points: &[Vector3<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let sum: f64 = points
        .iter()
        .map(|x| (pred.transform_point(x) - gt.transform_point(x)).norm())
        .sum();
    Ok(sum / points.len() as f64)
}

/// Mean squared difference over every pixel and channel.
pub fn im_loss(pred: &Appearance, target: &Appearance) -> Result<f64> {
    if pred.width != target.width || pred.height != target.height || pred.channels != target.channels {
        return Err(Error::ShapeMismatch(format!(
            "appearance {}×{}×{} vs {}×{}×{}",
            pred.width, pred.height, pred.channels, target.width, target.height, target.channels
        )));
    }
    if pred.pixels.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred.pixels.iter().zip(&target.pixels).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.pixels.len() as f64)
}

/// A scalar objective over poses, optionally with an analytic gradient with
/// respect to the rotation matrix and translation.
pub trait PoseObjective: Sync {
    fn value(&self, pose: &Pose) -> Result<f64>;

    /// `(∂L/∂R, ∂L/∂t)` at `pose`, if available.
    fn pose_gradient(&self, _pose: &Pose) -> Option<Result<(Matrix3<f64>, Vector3<f64>)>> {
        None
    }
}

/// `GM + λ·GD` against a fixed ground-truth pose.
pub struct GridObjective {
    pub k: CameraIntrinsics,
    pub bbox: BoundingBox,
    pub cfg: GridConfig,
    gt_t: Vector3<f64>,
    gt_grid: RayGrid,
    cropped: RayGrid,
}

impl GridObjective {
    pub fn new(gt: &Pose, k: &CameraIntrinsics, b: &BoundingBox, cfg: &GridConfig) -> Result<Self> {
        let cropped = grid::crop_grid(k, b, cfg.out_res, cfg.n_z)?;
        let gt_grid = grid::transform_grid(&grid::push_grid(&cropped, gt.t.norm())?, gt)?;
        Ok(Self { k: *k, bbox: *b, cfg: *cfg, gt_t: gt.t, gt_grid, cropped })
    }

    pub fn object_grid(&self, pose: &Pose) -> Result<RayGrid> {
        grid::transform_grid(&grid::push_grid(&self.cropped, pose.t.norm())?, pose)
    }

    pub fn report(&self, pose: &Pose) -> Result<LossReport> {
        let gm = gm_loss(&self.object_grid(pose)?, &self.gt_grid)?;
        let gd = gd_loss(&pose.t, &self.gt_t);
        Ok(LossReport {
            gm,
            gd,
            total: gm + self.cfg.lambda_gd * gd,
            pm: None,
            im: None,
            lambda_gd: self.cfg.lambda_gd,
        })
    }
}

impl PoseObjective for GridObjective {
    fn value(&self, pose: &Pose) -> Result<f64> {
        Ok(self.report(pose)?.total)
    }

    fn pose_gradient(&self, pose: &Pose) -> Option<Result<(Matrix3<f64>, Vector3<f64>)>> {
        Some(self.grid_gradient(pose))
    }
}

impl GridObjective {
    // Pushed point q = (‖t‖ + s) u, object point x = Rᵀ (q - t).
    fn grid_gradient(&self, pose: &Pose) -> Result<(Matrix3<f64>, Vector3<f64>)> {
        let pred = self.object_grid(pose)?;
        let n_z = pred.n_z;
        let count = pred.len() as f64;
        let dist = pose.t.norm();
        let t_hat = pose.t / dist;
        let partial: Vec<(Matrix3<f64>, Vector3<f64>)> = (0..pred.ray_count())
            .into_par_iter()
            .map(|ray| {
                let u = self.cropped.directions[ray];
                let mut g_r = Matrix3::zeros();
                let mut g_t = Vector3::zeros();
                for n in 0..n_z {
                    let i = ray * n_z + n;
                    let diff = pred.points[i] - self.gt_grid.points[i];
                    let norm = diff.norm();
                    if norm == 0.0 {
                        continue;
                    }
                    let gx = diff / (norm * count);
                    let w = pose.r * pred.points[i];
                    g_r += w * gx.transpose();
                    let rgx = pose.r * gx;
                    g_t += t_hat * u.dot(&rgx) - rgx;
                }
                (g_r, g_t)
            })
            .collect();
        let (mut g_r, mut g_t) = (Matrix3::zeros(), Vector3::zeros());
        for (a, b) in partial {
            g_r += a;
            g_t += b;
        }
        let gd = dist - self.gt_t.norm();
        if gd != 0.0 {
            g_t += t_hat * (self.cfg.lambda_gd * gd.signum());
        }
        Ok((g_r, g_t))
    }
}

/// PM against a fixed ground-truth pose over a fixed point set.
pub struct PointObjective {
    pub gt: Pose,
    pub points: Vec<Vector3<f64>>,
}

impl PoseObjective for PointObjective {
    fn value(&self, pose: &Pose) -> Result<f64> {
        pm_loss(pose, &self.gt, &self.points)
    }

    fn pose_gradient(&self, pose: &Pose) -> Option<Result<(Matrix3<f64>, Vector3<f64>)>> {
        if self.points.is_empty() {
            return Some(Err(Error::EmptyPointSet));
        }
        let count = self.points.len() as f64;
        let mut g_r = Matrix3::zeros();
        let mut g_t = Vector3::zeros();
        for x in &self.points {
            let diff = pose.transform_point(x) - self.gt.transform_point(x);
            let norm = diff.norm();
            if norm == 0.0 {
                continue;
            }
            let gy = diff / (norm * count);
            g_r += gy * x.transpose();
            g_t += gy;
        }
        Some(Ok((g_r, g_t)))
    }
}

/// IM between the rendered feature and an observed crop.
pub struct ImageObjective<'a> {
    pub target: Appearance,
    pub k: CameraIntrinsics,
    pub bbox: BoundingBox,
    pub cfg: GridConfig,
    sampler: FeatureSampler<'a>,
}

impl<'a> ImageObjective<'a> {
    pub fn new(feature: &'a VoxelFeature, target: Appearance, k: CameraIntrinsics, bbox: BoundingBox, cfg: GridConfig) -> Self {
        Self { target, k, bbox, cfg, sampler: FeatureSampler::new(feature) }
    }

    pub fn feature(&self) -> &'a VoxelFeature {
        self.sampler.feature()
    }

    pub fn render(&self, pose: &Pose) -> Result<Appearance> {
        projector::render_with(&self.sampler, pose, &self.k, &self.bbox, self.cfg.n_z, self.cfg.out_res)
    }
}

impl PoseObjective for ImageObjective<'_> {
    fn value(&self, pose: &Pose) -> Result<f64> {
        im_loss(&self.render(pose)?, &self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    /// Central differences with the configured step.
    CentralFd,
    /// Richardson extrapolation of central differences at `h` and `h/2`.
    Richardson,
    Analytic,
}

/// Default finite-difference step in normalized units.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

/// Per-parameter finite-difference steps: pixel parameters scale by the mean
/// focal length.
pub fn fd_steps(k: &CameraIntrinsics, h: f64) -> [f64; 9] {
    let f = k.mean_focal();
    [h * f, h * f, h, h, h, h, h, h, h]
}

/// Objective as a function of the delta parameters around `base`.
pub fn delta_objective(
    obj: &dyn PoseObjective,
    base: &Pose,
    params: &[f64; 9],
    k: &CameraIntrinsics,
) -> Result<f64> {
    let pose = apply_delta(base, &PoseDelta::from_params(params), k)?;
    let v = obj.value(&pose)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss(v));
    }
    Ok(v)
}

fn central_differences(
    obj: &dyn PoseObjective,
    base: &Pose,
    params: &[f64; 9],
    k: &CameraIntrinsics,
    steps: &[f64; 9],
) -> Result<[f64; 9]> {
    let evals: Vec<Result<f64>> = (0..18)
        .into_par_iter()
        .map(|j| {
            let (i, sign) = (j / 2, if j % 2 == 0 { 1.0 } else { -1.0 });
            let mut p = *params;
            p[i] += sign * steps[i];
            delta_objective(obj, base, &p, k)
        })
        .collect();
    let mut grad = [0.0; 9];
    for i in 0..9 {
        let plus = evals[2 * i].as_ref().map_err(clone_err)?;
        let minus = evals[2 * i + 1].as_ref().map_err(clone_err)?;
        grad[i] = (plus - minus) / (2.0 * steps[i]);
    }
    Ok(grad)
}

fn clone_err(e: &Error) -> Error {
    match e {
        Error::NonFiniteLoss(v) => Error::NonFiniteLoss(*v),
        Error::DegenerateRotationInput(s) => Error::DegenerateRotationInput(s),
        other => Error::InvalidArgument(other.to_string()),
    }
}

/// Vector-Jacobian product of [`crate::pose::rotation_from_6d`]: maps
/// `∂L/∂Q` (columns `r1, r2, r3`) to `(∂L/∂e1, ∂L/∂e2)`.
pub fn rotation_from_6d_vjp(
    e1: &Vector3<f64>,
    e2: &Vector3<f64>,
    g_q: &Matrix3<f64>,
) -> Result<(Vector3<f64>, Vector3<f64>)> {
    let q = crate::pose::rotation_from_6d(e1, e2)?;
    let (r1, r3) = (q.column(0).into_owned(), q.column(2).into_owned());
    let mut g1 = g_q.column(0).into_owned();
    let g2 = g_q.column(1).into_owned();
    let mut g3 = g_q.column(2).into_owned();
    // r2 = r3 × r1
    g3 += r1.cross(&g2);
    g1 += g2.cross(&r3);
    // r3 = a / |a|, a = r1 × e2
    let a = r1.cross(e2);
    let ga = (g3 - r3 * r3.dot(&g3)) / a.norm();
    g1 += e2.cross(&ga);
    let ge2 = ga.cross(&r1);
    // r1 = e1 / |e1|
    let ge1 = (g1 - r1 * r1.dot(&g1)) / e1.norm();
    Ok((ge1, ge2))
}

fn analytic_gradient(
    obj: &dyn PoseObjective,
    base: &Pose,
    params: &[f64; 9],
    k: &CameraIntrinsics,
) -> Result<[f64; 9]> {
    let delta = PoseDelta::from_params(params);
    let pose = apply_delta(base, &delta, k)?;
    let (g_r, g_t) = obj.pose_gradient(&pose).ok_or(Error::AnalyticGradientUnavailable)??;
    // R' = Q R0
    let g_q = g_r * base.r.transpose();
    let (ge1, ge2) = rotation_from_6d_vjp(&delta.e1, &delta.e2, &g_q)?;
    // t'_z = v_z t_z, t'_x = (v_x/f_x + t_x/t_z) t'_z, t'_y likewise
    let tz0 = base.t.z;
    let rx = delta.v_x / k.fx + base.t.x / tz0;
    let ry = delta.v_y / k.fy + base.t.y / tz0;
    let g_vx = g_t.x * pose.t.z / k.fx;
    let g_vy = g_t.y * pose.t.z / k.fy;
    let g_vz = (g_t.z + g_t.x * rx + g_t.y * ry) * tz0;
    Ok([g_vx, g_vy, g_vz, ge1.x, ge1.y, ge1.z, ge2.x, ge2.y, ge2.z])
}

/// Gradient of the objective with respect to the 9 delta parameters at
/// `delta`, applied on top of `base`.
pub fn loss_gradient(
    obj: &dyn PoseObjective,
    base: &Pose,
    delta: &PoseDelta,
    k: &CameraIntrinsics,
    method: GradientMethod,
    fd_step: f64,
) -> Result<[f64; 9]> {
    let params = delta.to_params();
    // the loss must be finite where the gradient is taken
    delta_objective(obj, base, &params, k)?;
    match method {
        GradientMethod::Analytic => analytic_gradient(obj, base, &params, k),
        GradientMethod::CentralFd => central_differences(obj, base, &params, k, &fd_steps(k, fd_step)),
        GradientMethod::Richardson => {
            let coarse = central_differences(obj, base, &params, k, &fd_steps(k, fd_step))?;
            let fine = central_differences(obj, base, &params, k, &fd_steps(k, 0.5 * fd_step))?;
            let mut g = [0.0; 9];
            for i in 0..9 {
                g[i] = (4.0 * fine[i] - coarse[i]) / 3.0;
            }
            Ok(g)
        }
    }
}
