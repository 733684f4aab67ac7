//! Pose accuracy metrics: ADD, ADD-S, thresholded accuracy, AUC, Proj2D and
//! per-axis error breakdowns.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::pm_loss;
use crate::pose::{geodesic_distance, CameraIntrinsics, Pose};
use crate::reconstruction::VoxelFeature;

/// Default ADD(-S) threshold as a fraction of the object diameter.
pub const DEFAULT_THRESHOLD_RATIO: f64 = 0.1;

/// Number of trapezoids in the AUC sweep.
pub const AUC_STEPS: usize = 1000;

/// Mean matched-point distance.
pub fn add_metric(pred: &Pose, gt: &Pose, points: &[Vector3<f64>]) -> Result<f64> {
    pm_loss(pred, gt, points)
}

/// Mean distance from each ground-truth-transformed point to the nearest
/// prediction-transformed point.
pub fn add_s_metric(pred: &Pose, gt: &Pose, points: &[Vector3<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let predicted: Vec<Vector3<f64>> = points.iter().map(|x| pred.transform_point(x)).collect();
    let nearest: Vec<f64> = points
        .par_iter()
        .map(|x| {
            let q = gt.transform_point(x);
            predicted.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min).sqrt()
        })
        .collect();
    Ok(nearest.iter().sum::<f64>() / points.len() as f64)
}

/// Fraction of values strictly below `thr_ratio · diameter`.
pub fn threshold_accuracy(values: &[f64], diameter: f64, thr_ratio: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let thr = thr_ratio * diameter;
    values.iter().filter(|v| **v < thr).count() as f64 / values.len() as f64
}

/// Area under the accuracy-vs-threshold curve over `[0, max_thr]`, normalized
/// to `[0, 1]`. Values at or above `max_thr` never count as correct.
pub fn auc_add_s(values: &[f64], max_thr: f64) -> f64 {
    if values.is_empty() || !(max_thr > 0.0) {
        return 0.0;
    }
    let n = values.len() as f64;
    let accuracy = |thr: f64| values.iter().filter(|v| **v < max_thr && **v <= thr).count() as f64 / n;
    let step = max_thr / AUC_STEPS as f64;
    let mut area = 0.0;
    let mut prev = accuracy(0.0);
    for i in 1..=AUC_STEPS {
        let cur = accuracy(step * i as f64);
        area += 0.5 * (prev + cur);
        prev = cur;
    }
    area / AUC_STEPS as f64
}

/// Mean pixel distance between the projections of the point set.
pub fn proj2d(pred: &Pose, gt: &Pose, points: &[Vector3<f64>], k: &CameraIntrinsics) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut sum = 0.0;
    for (index, x) in points.iter().enumerate() {
        let a = k.project(&pred.transform_point(x)).ok_or(Error::PointBehindCamera { index })?;
        let b = k.project(&gt.transform_point(x)).ok_or(Error::PointBehindCamera { index })?;
        sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    Ok(sum / points.len() as f64)
}

/// Rotation error (radians) and per-axis translation error `t_pred - t_gt`.
pub fn pose_errors(pred: &Pose, gt: &Pose) -> (f64, Vector3<f64>) {
    (geodesic_distance(&pred.r, &gt.r), pred.t - gt.t)
}

/// Metrics for one frame. Distances are in normalized units (diameter 2);
/// the `_real` fields are rescaled by `d_real / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub add: f64,
    pub add_real: f64,
    pub add_s: f64,
    pub add_s_real: f64,
    pub proj2d: f64,
    pub rot_err: f64,
    pub trans_err: [f64; 3],
}

pub fn frame_metrics(
    pred: &Pose,
    gt: &Pose,
    points: &[Vector3<f64>],
    k: &CameraIntrinsics,
    d_real: f64,
) -> Result<FrameMetrics> {
    let scale = 0.5 * d_real;
    let add = add_metric(pred, gt, points)?;
    let add_s = add_s_metric(pred, gt, points)?;
    let (rot_err, trans) = pose_errors(pred, gt);
    Ok(FrameMetrics {
        add,
        add_real: add * scale,
        add_s,
        add_s_real: add_s * scale,
        proj2d: proj2d(pred, gt, points, k)?,
        rot_err,
        trans_err: [trans.x * scale, trans.y * scale, trans.z * scale],
    })
}

/// Aggregate over a set of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub add: f64,
    pub add_s: f64,
    pub thr_ratio: f64,
    pub add_accuracy: f64,
    pub add_s_accuracy: f64,
    pub proj2d: f64,
    pub proj2d_accuracy_5px: f64,
    pub auc_add_s: f64,
    pub auc_max_thr: f64,
    pub rot_err: f64,
    pub trans_err: [f64; 3],
}

/// `auc_max_thr` is in real object units, like `add_s_real`.
pub fn summarize(rows: &[FrameMetrics], thr_ratio: f64, auc_max_thr: f64) -> MetricReport {
    let n = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let add: Vec<f64> = rows.iter().map(|r| r.add).collect();
    let add_s: Vec<f64> = rows.iter().map(|r| r.add_s).collect();
    let add_s_real: Vec<f64> = rows.iter().map(|r| r.add_s_real).collect();
    let proj: Vec<f64> = rows.iter().map(|r| r.proj2d).collect();
    MetricReport {
        frames: rows.len(),
        add: mean(&|r| r.add),
        add_s: mean(&|r| r.add_s),
        thr_ratio,
        add_accuracy: threshold_accuracy(&add, 2.0, thr_ratio),
        add_s_accuracy: threshold_accuracy(&add_s, 2.0, thr_ratio),
        proj2d: mean(&|r| r.proj2d),
        proj2d_accuracy_5px: threshold_accuracy(&proj, 1.0, 5.0),
        auc_add_s: auc_add_s(&add_s_real, auc_max_thr),
        auc_max_thr,
        rot_err: mean(&|r| r.rot_err),
        trans_err: [
            mean(&|r| r.trans_err[0].abs()),
            mean(&|r| r.trans_err[1].abs()),
            mean(&|r| r.trans_err[2].abs()),
        ],
    }
}

/// Evaluation points of a carved object: occupied voxel centers, uniformly
/// subsampled to at most `max_points` (seeded, order preserved).
pub fn feature_points(feature: &VoxelFeature, max_points: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    use rand::SeedableRng;
    let centers = feature.occupied_centers();
    if centers.is_empty() || max_points == 0 {
        return Err(Error::EmptyPointSet);
    }
    if centers.len() <= max_points {
        return Ok(centers);
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, centers.len(), max_points).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| centers[i]).collect())
}
