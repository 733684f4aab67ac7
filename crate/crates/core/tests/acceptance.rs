//! Acceptance suite. Every criterion runs and prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails.
//!
//! `cargo test -p dprost --test acceptance -- 4 6` runs only criteria 4 and 6.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dprost::dataset::synth::{
    self, axis_aligned_poses, observe, observe_all, random_axis_rotation, random_rotation, random_unit_vector,
    ViewSampler,
};
use dprost::dataset::{self, ShapeKind, SyntheticShape, Texture};
use dprost::grid::{self, RayGrid};
use dprost::metrics;
use dprost::objectives::{self, GradientMethod, GridConfig, GridObjective, PointObjective, PoseObjective};
use dprost::projector;
use dprost::raster::Mask;
use dprost::reconstruction::{self, Observation, ReferenceSet, VoxelFeature};
use dprost::refiner::{self, RefineMode, RefineTarget, RefinerConfig};
use dprost::{BoundingBox, CameraIntrinsics, Pose, PoseDelta};

type Outcome = Result<String, String>;

fn err(e: dprost::Error) -> String {
    e.to_string()
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64, what: &str) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("{what} took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

fn random_intrinsics(rng: &mut ChaCha8Rng) -> CameraIntrinsics {
    CameraIntrinsics::new(
        rng.random_range(100.0..1000.0),
        rng.random_range(100.0..1000.0),
        rng.random_range(0.0..640.0),
        rng.random_range(0.0..480.0),
    )
    .unwrap()
}

/// Pose with `‖t‖ = dist` and the object in front of the camera.
fn random_pose(rng: &mut ChaCha8Rng, dist: f64) -> Pose {
    let dir = loop {
        let d = random_unit_vector(rng);
        if d.z < -0.3 {
            break d;
        }
    };
    Pose { r: random_rotation(rng), t: dir * dist }
}

// ---------------------------------------------------------------------------

fn c1_grid_geometry() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 100_000;
    let (mut max_form, mut max_round_trip) = (0.0f64, 0.0f64);
    let mut points = 0usize;
    for case in 0..cases {
        let k = random_intrinsics(&mut rng);
        let b = BoundingBox::new(
            rng.random_range(-50.0..600.0),
            rng.random_range(-50.0..450.0),
            rng.random_range(4.0..300.0),
            rng.random_range(4.0..300.0),
        )
        .unwrap();
        let dist = rng.random_range(2.0..=10.0);
        let pose = random_pose(&mut rng, dist);
        let n_z = rng.random_range(2..=16);
        let formed: RayGrid = if case % 100 == 0 {
            grid::form_grid(&k, rng.random_range(1..=6), rng.random_range(1..=6), n_z).map_err(err)?
        } else {
            grid::crop_grid(&k, &b, rng.random_range(2..=4), n_z).map_err(err)?
        };
        for p in &formed.points {
            max_form = max_form.max(p.norm());
        }
        let pushed = grid::push_grid(&formed, dist).map_err(err)?;
        for ray in 0..pushed.ray_count() {
            let d: Vec<f64> = pushed.ray(ray).iter().map(|p| p.norm()).collect();
            check(d.windows(2).all(|w| w[1] > w[0]), || format!("case {case}: distances not increasing {d:?}"))?;
            check(d[0] >= dist - 1.0 - 1e-12 && d[n_z - 1] <= dist + 1.0 + 1e-12, || {
                format!("case {case}: distances {:?} outside [{}, {}]", d, dist - 1.0, dist + 1.0)
            })?;
        }
        let object = grid::transform_grid(&pushed, &pose).map_err(err)?;
        for (o, q) in object.points.iter().zip(&pushed.points) {
            max_round_trip = max_round_trip.max((pose.transform_point(o) - q).amax());
        }
        points += pushed.len();
    }
    check(max_form <= 1.0 + 1e-15, || format!("formed point at radius {max_form}"))?;
    check(max_round_trip < 1e-12, || format!("transform round trip error {max_round_trip:e}"))?;
    within(start.elapsed(), 30.0, "grid suite")?;
    Ok(format!(
        "{cases} cases, {points} points; max formed radius {max_form:.15}, round-trip error {max_round_trip:.1e}"
    ))
}

// ---------------------------------------------------------------------------

/// Brute-force visual hull: a voxel center is inside iff it projects onto a
/// foreground pixel in every view.
fn visual_hull_oracle(views: &[Observation], size: usize) -> Vec<bool> {
    let coord = |i: usize| -1.0 + (2 * i + 1) as f64 / size as f64;
    let mut out = Vec::with_capacity(size * size * size);
    for iz in 0..size {
        for iy in 0..size {
            for ix in 0..size {
                let x = Vector3::new(coord(ix), coord(iy), coord(iz));
                let inside = views.iter().all(|v| {
                    let c = v.pose.r * x + v.pose.t;
                    if c.z >= 0.0 {
                        return false;
                    }
                    let k = &v.intrinsics;
                    let u = (k.px + k.fx * c.x / -c.z).round();
                    let w = (k.py + k.fy * c.y / -c.z).round();
                    u >= 0.0
                        && w >= 0.0
                        && (u as usize) < v.mask.width
                        && (w as usize) < v.mask.height
                        && v.mask.get(u as usize, w as usize)
                });
                out.push(inside);
            }
        }
    }
    out
}

fn c2_carving_oracle() -> Outcome {
    let start = Instant::now();
    let size = 32;
    let sampler = ViewSampler::new(96);
    let mut notes = Vec::new();
    for kind in [ShapeKind::Cube, ShapeKind::Sphere] {
        let shape = SyntheticShape { kind, texture: Texture::Uniform { rgb: [0.7, 0.4, 0.2] } };
        let views = observe_all(&shape, &axis_aligned_poses(4.0), &sampler.intrinsics, 96, 96);
        let carved = reconstruction::carve_with_mask(&ReferenceSet::new(views.clone()), size).map_err(err)?;
        let oracle = visual_hull_oracle(&views, size);
        // the layout of the oracle is x fastest, matching the feature
        let mut mismatches = 0;
        let mut occupied = 0;
        let mut missed_interior = 0;
        for iz in 0..size {
            for iy in 0..size {
                for ix in 0..size {
                    let v = carved.mask.voxel_index(ix, iy, iz);
                    let got = carved.mask.values[v] > 0.0;
                    let want = oracle[(iz * size + iy) * size + ix];
                    mismatches += (got != want) as usize;
                    occupied += got as usize;
                    // containment: voxels well inside the object are kept
                    let c = carved.mask.voxel_center(v);
                    if shape.contains(&(c * 1.1)) && !got {
                        missed_interior += 1;
                    }
                }
            }
        }
        check(mismatches == 0, || format!("{kind:?}: {mismatches} voxel mismatches"))?;
        check(missed_interior == 0, || format!("{kind:?}: {missed_interior} interior voxels carved away"))?;
        notes.push(format!("{kind:?} {occupied} voxels, 0 mismatches"));
    }
    within(start.elapsed(), 10.0, "carving oracle")?;
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------------------

/// Trilinear oracle written with tent weights over the 8 surrounding voxels.
fn trilinear_oracle(f: &VoxelFeature, p: &Vector3<f64>) -> Vec<f64> {
    let mut out = vec![0.0; f.channels];
    if p.iter().any(|c| c.abs() > 1.0) {
        return out;
    }
    let s = f.size as f64;
    let g = p.map(|c| (c + 1.0) * s / 2.0 - 0.5);
    let base = g.map(f64::floor);
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let idx = base + Vector3::new(dx as f64, dy as f64, dz as f64);
                if idx.iter().any(|i| *i < 0.0 || *i >= s) {
                    continue;
                }
                let w: f64 = (0..3).map(|a| 1.0 - (g[a] - idx[a]).abs()).product();
                let v = f.voxel(idx.x as usize, idx.y as usize, idx.z as usize);
                for c in 0..f.channels {
                    out[c] += w * v[c] as f64;
                }
            }
        }
    }
    out
}

fn c3_projector_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_err = 0.0f64;
    let mut samples = 0usize;
    for _ in 0..20 {
        let mut f = VoxelFeature::zeros(16, 3);
        for v in 0..f.voxel_count() {
            if rng.random_bool(0.5) {
                for c in 0..3 {
                    f.values[3 * v + c] = rng.random();
                }
            }
        }
        let k = CameraIntrinsics::new(rng.random_range(100.0..400.0), rng.random_range(100.0..400.0), 64.0, 64.0).unwrap();
        let pose = { let v = rng.random_range(2.0..6.0); random_pose(&mut rng, v) };
        let center = k.project(&pose.t).unwrap();
        let side = rng.random_range(20.0..120.0);
        let b = BoundingBox::centered(center[0], center[1], side, side * rng.random_range(0.6..1.0));
        let g = grid::object_grid(&k, &b, &pose, 12, 24).map_err(err)?;
        let sampled = projector::sample_feature(&f, &g).map_err(err)?;
        for (i, p) in g.points.iter().enumerate() {
            let want = trilinear_oracle(&f, p);
            for c in 0..3 {
                max_err = max_err.max((sampled.values[3 * i + c] - want[c]).abs());
            }
            samples += 1;
        }
    }
    check(max_err < 1e-6, || format!("trilinear error {max_err:e}"))?;

    // two occupied voxels on one ray: the nearer one must be rendered
    let k = CameraIntrinsics::new(300.0, 300.0, 64.0, 64.0).unwrap();
    let (mut cases, mut correct, mut attempts) = (0, 0, 0);
    while cases < 1000 {
        attempts += 1;
        let pose = Pose {
            r: random_rotation(&mut rng),
            t: Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), -rng.random_range(3.0..6.0)),
        };
        let (u, v) = (64.0 + rng.random_range(-15.0..15.0), 64.0 + rng.random_range(-15.0..15.0));
        let o = pose.inverse_transform_point(&Vector3::zeros());
        let d = pose.r.transpose() * k.ray_direction(u, v);
        // voxels whose centers the ray passes closely, in ray order
        let mut cells: Vec<[usize; 3]> = Vec::new();
        let dist = pose.t.norm();
        let mut s = dist - 1.0;
        while s < dist + 1.0 {
            let p = o + d * s;
            s += 0.002;
            if p.norm() > 0.9 {
                continue;
            }
            let idx = p.map(|c| ((c + 1.0) * 8.0).floor());
            let center = idx.map(|i| -1.0 + (2.0 * i + 1.0) / 16.0);
            if (p - center).amax() < 0.25 / 8.0 {
                let cell = [idx.x as usize, idx.y as usize, idx.z as usize];
                if cells.last() != Some(&cell) {
                    cells.push(cell);
                }
            }
        }
        let far_apart = |a: &[usize; 3], b: &[usize; 3]| (0..3).any(|i| a[i].abs_diff(b[i]) >= 3);
        let Some(near) = cells.first() else { continue };
        let Some(far) = cells.iter().find(|c| far_apart(near, c)) else { continue };
        let mut f = VoxelFeature::zeros(16, 3);
        f.voxel_mut(near[0], near[1], near[2]).copy_from_slice(&[1.0, 0.0, 0.0]);
        f.voxel_mut(far[0], far[1], far[2]).copy_from_slice(&[0.0, 1.0, 0.0]);
        let b = BoundingBox::centered(u, v, 0.01, 0.01);
        let a = projector::render(&f, &pose, &k, &b, 256, 2).map_err(err)?;
        cases += 1;
        let ok = a.valid.iter().all(|v| *v) && a.pixels.chunks(3).all(|px| px[0] > 0.5 && px[1] == 0.0);
        correct += ok as usize;
    }
    check(correct == cases, || format!("near voxel selected in {correct}/{cases} occlusion cases"))?;
    Ok(format!(
        "{samples} samples, max error {max_err:.1e}; near voxel selected in {correct}/{cases} cases ({attempts} rays drawn)"
    ))
}

// ---------------------------------------------------------------------------

struct RoundTrip {
    error: f64,
    iou: f64,
}

fn round_trip(texture: Texture, seed: u64) -> Result<RoundTrip, String> {
    let shape = SyntheticShape::sphere(texture);
    let size = 128;
    let sampler = ViewSampler::new(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // references are picked from a large pool so they spread around the object
    let poses: Vec<Pose> = (0..48).map(|_| sampler.sample(&mut rng)).collect();
    let training = observe_all(&shape, &poses, &sampler.intrinsics, size, size);
    let refs = reconstruction::select_references(&training, 8).map_err(err)?;
    let feature = reconstruction::carve(&refs, 128).map_err(err)?;

    let held_out = sampler.sample(&mut rng);
    let truth = observe(&shape, &held_out, &sampler.intrinsics, size, size);
    let rendered =
        projector::render_full_frame(&feature, &held_out, &sampler.intrinsics, size, size, 64).map_err(err)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..size {
        for x in 0..size {
            if truth.mask.get(x, y) {
                let want = truth.image.get(x, y);
                let got = rendered.pixel(x, y);
                sum += (0..3).map(|c| (got[c] - want[c] as f64).abs()).sum::<f64>() / 3.0;
                n += 1;
            }
        }
    }
    Ok(RoundTrip { error: sum / n.max(1) as f64, iou: rendered.valid_mask().iou(&truth.mask) })
}

fn c4_round_trip_render() -> Outcome {
    let uniform = round_trip(Texture::Uniform { rgb: [0.8, 0.5, 0.3] }, 4)?;
    // informational: view-independent carving cannot reproduce a texture
    // that differs between opposite sides of the object
    let gradient = round_trip(Texture::AxisGradient, 4)?;
    let summary = format!(
        "uniform sphere: error {:.4}, IoU {:.4} (axis-gradient sphere, not asserted: error {:.4}, IoU {:.4})",
        uniform.error, uniform.iou, gradient.error, gradient.iou
    );
    check(uniform.error < 0.05 && uniform.iou > 0.9, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------

fn c5_loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut gm_err, mut total_err, mut pm_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let k = CameraIntrinsics::new(rng.random_range(150.0..600.0), rng.random_range(150.0..600.0), 64.0, 64.0).unwrap();
        let b = BoundingBox::centered(64.0 + rng.random_range(-10.0..10.0), 64.0, 60.0, 50.0);
        let gt = { let v = rng.random_range(3.0..8.0); random_pose(&mut rng, v) };
        let g = grid::object_grid(&k, &b, &gt, 10, 10).map_err(err)?;
        let offset = random_unit_vector(&mut rng) * rng.random_range(0.01..1.0);
        let mut h = g.clone();
        h.points.iter_mut().for_each(|p| *p += offset);
        gm_err = gm_err.max((objectives::gm_loss(&h, &g).map_err(err)? - offset.norm()).abs());

        let pred = Pose { r: random_axis_rotation(&mut rng, 0.2) * gt.r, t: gt.t * rng.random_range(0.9..1.1) };
        let lambda = rng.random_range(0.0..5.0);
        let cfg = GridConfig { out_res: 10, n_z: 10, lambda_gd: lambda };
        let rep = objectives::total_loss(&pred, &gt, &k, &b, &cfg).map_err(err)?;
        total_err = total_err.max((rep.total - (rep.gm + lambda * rep.gd)).abs());

        let points: Vec<_> = (0..100).map(|_| random_unit_vector(&mut rng) * rng.random_range(0.0..1.0)).collect();
        let delta = random_unit_vector(&mut rng) * rng.random_range(0.01..1.0);
        let shifted = Pose { r: gt.r, t: gt.t + delta };
        pm_err = pm_err.max((objectives::pm_loss(&shifted, &gt, &points).map_err(err)? - delta.norm()).abs());
    }
    check(gm_err < 1e-12, || format!("gm uniform-offset error {gm_err:e}"))?;
    check(total_err < 1e-12, || format!("total decomposition error {total_err:e}"))?;
    check(pm_err < 1e-12, || format!("pm translation-only error {pm_err:e}"))?;

    // analytic gradients against Richardson-extrapolated central differences
    let mut worst = 0.0f64;
    for config in 0..100 {
        let k = CameraIntrinsics::new(rng.random_range(150.0..400.0), rng.random_range(150.0..400.0), 64.0, 64.0).unwrap();
        let gt = { let v = rng.random_range(3.0..8.0); random_pose(&mut rng, v) };
        let center = k.project(&gt.t).unwrap();
        let b = BoundingBox::centered(center[0], center[1], 50.0, 50.0);
        let base = Pose {
            r: { let v = rng.random_range(0.05..0.3); random_axis_rotation(&mut rng, v) } * gt.r,
            t: gt.t * rng.random_range(1.03..1.1) + random_unit_vector(&mut rng) * 0.05,
        };
        let jitter = |rng: &mut ChaCha8Rng| Vector3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        let delta = PoseDelta {
            v_x: rng.random_range(-2.0..2.0),
            v_y: rng.random_range(-2.0..2.0),
            v_z: rng.random_range(0.98..1.02),
            e1: Vector3::x() + jitter(&mut rng),
            e2: Vector3::y() + jitter(&mut rng),
        };
        let objective: Box<dyn PoseObjective> = if config % 2 == 0 {
            let cfg = GridConfig { out_res: 12, n_z: 12, lambda_gd: rng.random_range(0.0..2.0) };
            Box::new(GridObjective::new(&gt, &k, &b, &cfg).map_err(err)?)
        } else {
            let points = (0..200).map(|_| random_unit_vector(&mut rng) * rng.random_range(0.1..1.0)).collect();
            Box::new(PointObjective { gt, points })
        };
        let analytic =
            objectives::loss_gradient(objective.as_ref(), &base, &delta, &k, GradientMethod::Analytic, 1e-3).map_err(err)?;
        let numeric =
            objectives::loss_gradient(objective.as_ref(), &base, &delta, &k, GradientMethod::Richardson, 1e-3).map_err(err)?;
        let diff: f64 = (0..9).map(|i| (analytic[i] - numeric[i]).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    check(worst < 1e-4, || format!("gradient relative error {worst:e}"))?;
    Ok(format!(
        "gm offset {gm_err:.1e}, total {total_err:.1e}, pm {pm_err:.1e}; gradient rel. error {worst:.1e} over 100 configs"
    ))
}

// ---------------------------------------------------------------------------

const SHAPES: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Cube, ShapeKind::Box { aspect: 3.0 }];
const TRIAL_IMAGE: usize = 128;
const TRIAL_VOXELS: usize = 128;
const TRIAL_GRID: GridConfig = GridConfig { out_res: 24, n_z: 24, lambda_gd: 1.0 };
/// Reference views are rendered at a higher resolution than the observations
/// so the carved hull is tight.
const REFERENCE_IMAGE: usize = 256;
const TRIAL_REFS: usize = 16;

struct Scene {
    shape: SyntheticShape,
    sampler: ViewSampler,
    feature: VoxelFeature,
}

fn build_scene(kind: ShapeKind, rng: &mut ChaCha8Rng) -> Result<Scene, String> {
    let shape = SyntheticShape { kind, texture: Texture::AxisGradient };
    let sampler = ViewSampler::new(TRIAL_IMAGE);
    let poses: Vec<Pose> = (0..48).map(|_| sampler.sample(rng)).collect();
    let reference_k = ViewSampler::new(REFERENCE_IMAGE).intrinsics;
    let training = observe_all(&shape, &poses, &reference_k, REFERENCE_IMAGE, REFERENCE_IMAGE);
    let refs = reconstruction::select_references(&training, TRIAL_REFS).map_err(err)?;
    let feature = reconstruction::carve(&refs, TRIAL_VOXELS).map_err(err)?;
    Ok(Scene { shape, sampler, feature })
}

/// Ground truth plus a perturbation of at most `max_deg` degrees and
/// `max_frac` relative translation.
fn perturb(gt: &Pose, rng: &mut ChaCha8Rng, max_deg: f64, max_frac: f64) -> Pose {
    let angle = rng.random_range(0.0..=max_deg).to_radians();
    let shift = random_unit_vector(rng) * rng.random_range(0.0..=max_frac) * gt.t.norm();
    Pose { r: random_axis_rotation(rng, angle) * gt.r, t: gt.t + shift }
}

fn c6_refiner_convergence() -> Outcome {
    let start = Instant::now();
    let trials = 50;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut im_hits, mut gm_hits) = (0, 0);
    let mut rot_before = 0.0;
    let mut rot_after = 0.0;
    for trial in 0..trials {
        let scene = build_scene(SHAPES[trial % 3], &mut rng)?;
        let k = scene.sampler.intrinsics;
        let gt = scene.sampler.sample(&mut rng);
        let obs = observe(&scene.shape, &gt, &k, TRIAL_IMAGE, TRIAL_IMAGE);
        let initial = perturb(&gt, &mut rng, 15.0, 0.1);
        let points = scene.shape.surface_points(1000, &mut rng);

        let im_cfg = RefinerConfig {
            mode: RefineMode::RenderCompareIm,
            seed: trial as u64,
            grid: TRIAL_GRID,
            // wide enough to see silhouette edges move by a fraction of a pixel
            fd_step: 1e-2,
            ..Default::default()
        };
        let observed = projector::crop_image(&obs.image, &obs.bbox, TRIAL_GRID.out_res).map_err(err)?;
        let (im_pose, _) = refiner::refine(&initial, &RefineTarget::Observed(observed), &scene.feature, &k, &obs.bbox, &im_cfg)
            .map_err(err)?;
        let add = metrics::add_metric(&im_pose, &gt, &points).map_err(err)?;
        im_hits += (add < 0.1 * 2.0) as usize;
        rot_before += metrics::pose_errors(&initial, &gt).0.to_degrees();
        rot_after += metrics::pose_errors(&im_pose, &gt).0.to_degrees();

        let gm_cfg = RefinerConfig { mode: RefineMode::SupervisedGm, seed: trial as u64, grid: TRIAL_GRID, ..Default::default() };
        let (gm_pose, _) =
            refiner::refine(&initial, &RefineTarget::Pose(gt), &scene.feature, &k, &obs.bbox, &gm_cfg).map_err(err)?;
        let gm = GridObjective::new(&gt, &k, &obs.bbox, &TRIAL_GRID).map_err(err)?.report(&gm_pose).map_err(err)?.gm;
        gm_hits += (gm < 1e-3) as usize;
    }
    let elapsed = start.elapsed();
    let im_rate = im_hits as f64 / trials as f64;
    let gm_rate = gm_hits as f64 / trials as f64;
    let summary = format!(
        "render-compare ADD<0.1d {:.0}% (mean rot. error {:.2}° -> {:.2}°), supervised GM gm<1e-3 {:.0}%, {:.0}s",
        100.0 * im_rate,
        rot_before / trials as f64,
        rot_after / trials as f64,
        100.0 * gm_rate,
        elapsed.as_secs_f64()
    );
    check(im_rate >= 0.8 && gm_rate >= 0.95, || summary.clone())?;
    within(elapsed, 300.0, "refiner benchmark").map_err(|e| format!("{e}; {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------

/// Rotation error about the object's long (x) axis, in degrees.
fn axial_error(pred: &Pose, gt: &Pose) -> f64 {
    let rel = Rotation3::from_matrix_unchecked(pred.r.transpose() * gt.r);
    rel.scaled_axis().x.abs().to_degrees()
}

fn c7_gm_vs_pm() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shape = SyntheticShape { kind: ShapeKind::Box { aspect: 3.0 }, texture: Texture::AxisGradient };
    let sampler = ViewSampler::new(TRIAL_IMAGE);
    let k = sampler.intrinsics;
    let feature = VoxelFeature::zeros(2, 3);
    let trials = 25;
    let (mut gm_sum, mut pm_sum, mut init_sum) = (0.0, 0.0, 0.0);
    for trial in 0..trials {
        let gt = sampler.sample(&mut rng);
        let obs = observe(&shape, &gt, &k, TRIAL_IMAGE, TRIAL_IMAGE);
        let angle = rng.random_range(5.0..20.0f64).to_radians() * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let axial = Rotation3::from_axis_angle(&Vector3::x_axis(), angle).into_inner();
        let initial = Pose { r: gt.r * axial, t: gt.t };
        let points = shape.surface_points(1000, &mut rng);

        let base = RefinerConfig { seed: trial as u64, grid: TRIAL_GRID, ..Default::default() };
        let gm_cfg = RefinerConfig { mode: RefineMode::SupervisedGm, ..base };
        let pm_cfg = RefinerConfig { mode: RefineMode::SupervisedPm, ..base };
        let (gm_pose, _) = refiner::refine(&initial, &RefineTarget::Pose(gt), &feature, &k, &obs.bbox, &gm_cfg).map_err(err)?;
        let (pm_pose, _) =
            refiner::refine(&initial, &RefineTarget::PosePoints(gt, &points), &feature, &k, &obs.bbox, &pm_cfg).map_err(err)?;
        init_sum += axial_error(&initial, &gt);
        gm_sum += axial_error(&gm_pose, &gt);
        pm_sum += axial_error(&pm_pose, &gt);
    }
    let n = trials as f64;
    let (gm, pm) = (gm_sum / n, pm_sum / n);
    let summary = format!(
        "mean axial error: initial {:.3}°, GM {gm:.3e}°, PM {pm:.3e}° (gap PM − GM = {:.3e}°)",
        init_sum / n,
        pm - gm
    );
    check(gm <= pm, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------

fn c8_metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut violations = 0;
    for _ in 0..10_000 {
        let points: Vec<_> = (0..20).map(|_| random_unit_vector(&mut rng) * rng.random_range(0.0..1.0)).collect();
        let gt = { let v = rng.random_range(3.0..8.0); random_pose(&mut rng, v) };
        let pred = perturb(&gt, &mut rng, 60.0, 0.2);
        let add = metrics::add_metric(&pred, &gt, &points).map_err(err)?;
        let add_s = metrics::add_s_metric(&pred, &gt, &points).map_err(err)?;
        violations += (add_s > add) as usize;
    }
    check(violations == 0, || format!("add_s > add in {violations} cases"))?;

    let max = 0.1;
    let spread: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0 * max).collect();
    let cases: [(&str, Vec<f64>, f64); 4] = [
        ("all zero", vec![0.0; 10], 1.0),
        ("all beyond", vec![0.2, 0.5, 0.1], 0.0),
        ("single 0.03", vec![0.03], 1.0 - 0.03 / max),
        ("uniform spread", spread, 0.5),
    ];
    let mut worst_auc = 0.0f64;
    for (name, values, want) in &cases {
        let got = metrics::auc_add_s(values, max);
        worst_auc = worst_auc.max((got - want).abs());
        check((got - want).abs() <= 1e-3, || format!("AUC {name}: {got} vs {want}"))?;
    }

    let mut worst_proj = 0.0f64;
    for _ in 0..1000 {
        let k = random_intrinsics(&mut rng);
        let x = random_unit_vector(&mut rng) * rng.random_range(0.0..1.0);
        let gt = { let v = rng.random_range(3.0..8.0); random_pose(&mut rng, v) };
        let pred = perturb(&gt, &mut rng, 10.0, 0.1);
        let pixel = |p: &Pose| {
            let c: Vector3<f64> = p.r * x + p.t;
            (k.px + k.fx * c.x / -c.z, k.py + k.fy * c.y / -c.z)
        };
        let (a, b) = (pixel(&pred), pixel(&gt));
        let want = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
        let got = metrics::proj2d(&pred, &gt, &[x], &k).map_err(err)?;
        worst_proj = worst_proj.max((got - want).abs());
    }
    check(worst_proj < 1e-9, || format!("proj2d error {worst_proj:e}"))?;
    Ok(format!(
        "add_s ≤ add in 10000/10000 cases; AUC max deviation {worst_auc:.1e}; proj2d max error {worst_proj:.1e}"
    ))
}

// ---------------------------------------------------------------------------

/// Synthesis, carving, rendering, refinement and metrics, serialized.
fn pipeline(seed: u64) -> Result<Vec<u8>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = SyntheticShape { kind: ShapeKind::Box { aspect: 2.0 }, texture: Texture::AxisGradient };
    let sampler = ViewSampler::new(64);
    let k = sampler.intrinsics;
    let poses: Vec<Pose> = (0..10).map(|_| sampler.sample(&mut rng)).collect();
    let training = observe_all(&shape, &poses, &k, 64, 64);
    let refs = reconstruction::select_references(&training, 6).map_err(err)?;
    let feature = reconstruction::carve(&refs, 32).map_err(err)?;
    let gt = sampler.sample(&mut rng);
    let obs = observe(&shape, &gt, &k, 64, 64);
    let grid_cfg = GridConfig { out_res: 16, n_z: 16, lambda_gd: 1.0 };
    let cfg = RefinerConfig { mode: RefineMode::RenderCompareIm, inner_steps: 10, seed, grid: grid_cfg, ..Default::default() };
    let observed = projector::crop_image(&obs.image, &obs.bbox, 16).map_err(err)?;
    let initial = perturb(&gt, &mut rng, 10.0, 0.05);
    let (pose, trace) =
        refiner::refine(&initial, &RefineTarget::Observed(observed), &feature, &k, &obs.bbox, &cfg).map_err(err)?;
    let render = projector::render_full_frame(&feature, &pose, &k, 64, 64, 32).map_err(err)?;
    let points = shape.surface_points(500, &mut rng);
    let m = metrics::frame_metrics(&pose, &gt, &points, &k, 2.0).map_err(err)?;

    let mut out: Vec<u8> = feature.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    out.extend(render.pixels.iter().flat_map(|v| v.to_le_bytes()));
    out.extend(serde_json::to_vec(&trace).unwrap());
    out.extend(serde_json::to_vec(&m).unwrap());
    Ok(out)
}

fn c9_determinism_and_io() -> Outcome {
    let mut outputs = Vec::new();
    for threads in [1, 2, 4, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
        outputs.push(pool.install(|| pipeline(9))?);
    }
    check(outputs.windows(2).all(|w| w[0] == w[1]), || "outputs differ between runs or thread counts".into())?;
    check(pipeline(10)? != outputs[0], || "different seeds gave identical outputs".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut f = VoxelFeature::zeros(9, 3);
    f.values.iter_mut().for_each(|v| *v = rng.random::<f32>() * 2.0 - 1.0);
    f.values[0] = f32::MIN_POSITIVE / 7.0;
    let path = dir.path().join("f.dpvf");
    dataset::save_feature(&f, &path).map_err(err)?;
    let g = dataset::load_feature(&path).map_err(err)?;
    check(f.values.iter().zip(&g.values).all(|(a, b)| a.to_bits() == b.to_bits()) && (g.size, g.channels) == (9, 3), || {
        ".dpvf round trip changed values".into()
    })?;

    let scene_dir = dir.path().join("scene");
    let sampler = ViewSampler::new(32);
    let poses: Vec<Pose> = (0..4).map(|_| sampler.sample(&mut rng)).collect();
    synth::write_scene(&SyntheticShape::cube(Texture::AxisGradient), "cube", &poses, &sampler.intrinsics, 32, 32, &scene_dir)
        .map_err(err)?;
    let manifest_path = scene_dir.join("manifest.json");
    let first_bytes = std::fs::read(&manifest_path).map_err(|e| e.to_string())?;
    let loaded = dataset::load_manifest(&manifest_path).map_err(err)?;
    dataset::save_manifest(&loaded.manifest, &manifest_path).map_err(err)?;
    let reloaded = dataset::load_manifest(&manifest_path).map_err(err)?;
    check(first_bytes == std::fs::read(&manifest_path).map_err(|e| e.to_string())?, || {
        "manifest bytes changed on re-save".into()
    })?;
    check(loaded == reloaded, || "manifest reload differs".into())?;
    for (frame, pose) in reloaded.frames.iter().zip(&poses) {
        check(frame.pose == *pose, || format!("frame {} pose not bitwise identical", frame.id))?;
        let mask = Mask::load(&frame.mask_path).map_err(err)?;
        check(mask == observe(&SyntheticShape::cube(Texture::AxisGradient), pose, &sampler.intrinsics, 32, 32).mask, || {
            "mask round trip changed pixels".into()
        })?;
    }

    let grid = grid::object_grid(&sampler.intrinsics, &BoundingBox::new(4.0, 4.0, 20.0, 18.0).unwrap(), &poses[0], 6, 5)
        .map_err(err)?;
    let mut bytes = Vec::new();
    grid::write_grid_dump(&grid, &mut bytes).map_err(err)?;
    let back = grid::read_grid_dump(bytes.as_slice()).map_err(err)?;
    check(
        back.stage == grid.stage
            && back.points.iter().zip(&grid.points).all(|(a, b)| (0..3).all(|i| a[i] == b[i] as f32 as f64)),
        || "grid dump round trip mismatch".into(),
    )?;
    Ok(format!("{} bytes identical across 4 runs with 1/2/4 threads; .dpvf, manifest, grid dump lossless", outputs[0].len()))
}

// ---------------------------------------------------------------------------

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("grid geometry", c1_grid_geometry),
        ("carving oracle", c2_carving_oracle),
        ("projector oracle", c3_projector_oracle),
        ("round-trip render", c4_round_trip_render),
        ("loss identities", c5_loss_identities),
        ("refiner convergence", c6_refiner_convergence),
        ("GM vs PM", c7_gm_vs_pm),
        ("metric identities", c8_metric_identities),
        ("determinism and I/O", c9_determinism_and_io),
    ];
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    // a libtest-style name filter that does not match this suite skips it
    if selected.is_empty() && args.iter().any(|a| !"acceptance".contains(a.as_str())) {
        return;
    }

    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !selected.is_empty() && !selected.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance criterion {} ({name}): PASS [{secs:.1}s] {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance criterion {} ({name}): FAIL [{secs:.1}s] {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
