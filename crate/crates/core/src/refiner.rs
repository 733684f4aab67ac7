//! Iterative pose refinement by numerical optimization of the 9-parameter
//! delta.
//!
//! Each outer iteration starts a fresh delta at identity, runs Adam on the
//! objective with monotone acceptance (a step that raises the objective is
//! rejected and the step size halved), then applies the delta. Grids and
//! renders are always rebuilt from the current pose.

use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{
    self, GradientMethod, GridConfig, GridObjective, ImageObjective, PointObjective, PoseObjective,
};
use crate::pose::{self, apply_delta, BoundingBox, CameraIntrinsics, Pose, PoseDelta};
use crate::projector::Appearance;
use crate::reconstruction::VoxelFeature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// GM + λ·GD against a known pose.
    SupervisedGm,
    /// PM against a known pose over a point set.
    SupervisedPm,
    /// IM between the rendered feature and the observed crop.
    RenderCompareIm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinerConfig {
    pub outer_iters: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    pub mode: RefineMode,
    pub fd_step: f64,
    /// Stop an outer iteration once an accepted step improves the objective by
    /// less than this.
    pub convergence_tol: f64,
    pub seed: u64,
    pub grid: GridConfig,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            outer_iters: 2,
            inner_steps: 100,
            step_size: 0.01,
            mode: RefineMode::SupervisedGm,
            fd_step: objectives::DEFAULT_FD_STEP,
            convergence_tol: 1e-8,
            seed: 0,
            grid: GridConfig::default(),
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_steps == 0 {
            return Err(Error::InvalidArgument("iteration counts must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !(self.fd_step > 0.0) {
            return Err(Error::InvalidArgument("step sizes must be positive".into()));
        }
        Ok(())
    }
}

/// What the refinement is matched against.
pub enum RefineTarget<'a> {
    Pose(Pose),
    /// Ground-truth pose plus the point set PM is measured on.
    PosePoints(Pose, &'a [Vector3<f64>]),
    Observed(Appearance),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub pose: crate::pose::PoseJson,
    pub initial_objective: f64,
    pub objective: f64,
    pub steps: usize,
    pub accepted: usize,
    pub loss_curve: Vec<f64>,
    pub resets: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinementTrace {
    pub iterations: Vec<OuterIteration>,
}

impl RefinementTrace {
    pub fn final_objective(&self) -> Option<f64> {
        self.iterations.last().map(|it| it.objective)
    }
}

/// Pose used to start refinement when only the box is known.
pub fn initialize_from_box(b: &BoundingBox, k: &CameraIntrinsics) -> Pose {
    pose::initial_pose(b, k)
}

struct Adam {
    m: [f64; 9],
    v: [f64; 9],
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Self { m: [0.0; 9], v: [0.0; 9], t: 0 }
    }

    fn update(&mut self, grad: &[f64; 9]) {
        self.t += 1;
        for i in 0..9 {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
        }
    }

    fn direction(&self) -> [f64; 9] {
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut d = [0.0; 9];
        for i in 0..9 {
            d[i] = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
        d
    }
}

// Optimizer coordinates: v_x and v_y are divided by the mean focal length so a
// unit step has comparable effect on every parameter.
fn to_params(opt: &[f64; 9], f: f64) -> [f64; 9] {
    let mut p = *opt;
    p[0] *= f;
    p[1] *= f;
    p
}

// Objective at optimizer coordinates; `None` if the rotation is degenerate.
fn eval(objective: &dyn PoseObjective, base: &Pose, opt: &[f64; 9], k: &CameraIntrinsics, f: f64) -> Result<Option<f64>> {
    match objectives::delta_objective(objective, base, &to_params(opt, f), k) {
        Ok(v) => Ok(Some(v)),
        Err(Error::DegenerateRotationInput(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Refines `initial` against an arbitrary objective.
pub fn refine_objective(
    initial: &Pose,
    objective: &dyn PoseObjective,
    k: &CameraIntrinsics,
    cfg: &RefinerConfig,
    method: GradientMethod,
) -> Result<(Pose, RefinementTrace)> {
    cfg.validate()?;
    let f = k.mean_focal();
    let mut pose = *initial;
    let mut trace = RefinementTrace::default();
    for _ in 0..cfg.outer_iters {
        let base = pose;
        let identity = {
            let mut p = PoseDelta::identity().to_params();
            p[0] /= f;
            p[1] /= f;
            p
        };
        let mut opt = identity;
        let mut loss = objective.value(&base)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(loss));
        }
        let initial_objective = loss;
        let mut adam = Adam::new();
        let mut lr = cfg.step_size;
        let mut curve = vec![loss];
        let mut accepted = 0;
        let mut resets = 0;
        let mut steps = 0;
        let mut need_grad = true;
        let mut last_grad = [0.0; 9];
        while steps < cfg.inner_steps && loss > 0.0 {
            steps += 1;
            if need_grad {
                let delta = PoseDelta::from_params(&to_params(&opt, f));
                let grad = match objectives::loss_gradient(objective, &base, &delta, k, method, cfg.fd_step) {
                    Ok(g) => g,
                    Err(Error::DegenerateRotationInput(why)) => {
                        warn!("rotation parameters degenerate ({why}); resetting to canonical basis");
                        opt[3..].copy_from_slice(&identity[3..]);
                        resets += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let mut g = grad;
                g[0] *= f;
                g[1] *= f;
                adam.update(&g);
                last_grad = g;
            }
            let dir = adam.direction();
            let mut cand = opt;
            for i in 0..9 {
                cand[i] -= lr * dir[i];
            }
            let mut cand_loss = eval(objective, &base, &cand, k, f)?;
            if !cand_loss.is_some_and(|v| v <= loss) {
                // Joint steps across a kink of the objective (e.g. the distance
                // term at ‖t‖ = ‖t_gt‖) fail for every step size; moving one
                // coordinate at a time can still descend along the kink.
                for i in 0..9 {
                    let mut c = opt;
                    c[i] -= lr * dir[i];
                    if let Some(v) = eval(objective, &base, &c, k, f)? {
                        if v < cand_loss.filter(|b| *b <= loss).unwrap_or(loss) {
                            cand = c;
                            cand_loss = Some(v);
                        }
                    }
                }
            }
            match cand_loss {
                Some(v) if v <= loss => {
                    let improvement = loss - v;
                    opt = cand;
                    loss = v;
                    curve.push(v);
                    accepted += 1;
                    need_grad = true;
                    if improvement < cfg.convergence_tol {
                        // a stalled step usually means momentum is zig-zagging
                        // across a narrow valley; restart with a smaller step
                        // before giving up
                        if lr < cfg.step_size * 1e-3 {
                            break;
                        }
                        adam = Adam::new();
                        lr *= 0.5;
                    }
                }
                _ => {
                    // momentum need not point downhill; restart from the
                    // current gradient, whose sign direction does for small steps
                    if adam.t > 1 {
                        adam = Adam::new();
                        adam.update(&last_grad);
                    }
                    lr *= 0.5;
                    need_grad = false;
                    if lr < cfg.step_size * 1e-9 {
                        break;
                    }
                }
            }
        }
        pose = apply_delta(&base, &PoseDelta::from_params(&to_params(&opt, f)), k)?;
        trace.iterations.push(OuterIteration {
            pose: crate::pose::PoseJson::from_pose(&pose, crate::pose::Convention::NegZForward),
            initial_objective,
            objective: loss,
            steps,
            accepted,
            loss_curve: curve,
            resets,
        });
    }
    Ok((pose, trace))
}

/// Refines `initial` in the configured mode.
///
/// Supervised modes take a pose target and use analytic gradients;
/// render-and-compare takes the observed crop of `b` and uses central
/// differences.
pub fn refine(
    initial: &Pose,
    target: &RefineTarget<'_>,
    feature: &VoxelFeature,
    k: &CameraIntrinsics,
    b: &BoundingBox,
    cfg: &RefinerConfig,
) -> Result<(Pose, RefinementTrace)> {
    match (cfg.mode, target) {
        (RefineMode::SupervisedGm, RefineTarget::Pose(gt) | RefineTarget::PosePoints(gt, _)) => {
            let obj = GridObjective::new(gt, k, b, &cfg.grid)?;
            refine_objective(initial, &obj, k, cfg, GradientMethod::Analytic)
        }
        (RefineMode::SupervisedPm, RefineTarget::PosePoints(gt, points)) => {
            let obj = PointObjective { gt: *gt, points: points.to_vec() };
            refine_objective(initial, &obj, k, cfg, GradientMethod::Analytic)
        }
        (RefineMode::RenderCompareIm, RefineTarget::Observed(observed)) => {
            let obj = ImageObjective::new(feature, observed.clone(), *k, *b, cfg.grid);
            refine_objective(initial, &obj, k, cfg, GradientMethod::CentralFd)
        }
        (mode, _) => Err(Error::InvalidArgument(format!("target does not match refinement mode {mode:?}"))),
    }
}
