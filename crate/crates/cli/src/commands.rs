use std::collections::HashMap;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use dprost::dataset::{self, synth, FeatureSidecar, Scene, ShapeKind, SyntheticShape, Texture};
use dprost::grid;
use dprost::metrics::{self, FrameMetrics};
use dprost::objectives::{self, GridConfig};
use dprost::pose::{Convention, PoseJson};
use dprost::projector;
use dprost::raster::{Mask, RgbImage};
use dprost::reconstruction;
use dprost::refiner::{self, RefineMode, RefineTarget, RefinerConfig};
use dprost::{BoundingBox, CameraIntrinsics};

use crate::{Cli, Command, Global, ModeArg, ShapeArg, TextureArg, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Synth(a) => synth_cmd(g, a),
        Command::Carve(a) => carve_cmd(g, a),
        Command::Render(a) => render_cmd(g, a),
        Command::Refine(a) => refine_cmd(g, a),
        Command::Losses(a) => losses_cmd(g, a),
        Command::Eval(a) => eval_cmd(g, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = read_json(path)?;
    k.validate().with_context(|| format!("intrinsics in {}", path.display()))?;
    Ok(k)
}

/// JSON on stdout with `--json`, a one-line summary otherwise.
fn emit(g: &Global, value: &serde_json::Value, summary: String) -> Result<()> {
    if g.json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        println!("{summary}");
    }
    Ok(())
}

fn grid_config(g: &Global) -> GridConfig {
    GridConfig { out_res: g.out_res, n_z: g.n_z, lambda_gd: g.lambda_gd }
}

fn synth_cmd(g: &Global, a: &crate::SynthArgs) -> Result<()> {
    let kind = match a.shape {
        ShapeArg::Sphere => ShapeKind::Sphere,
        ShapeArg::Cube => ShapeKind::Cube,
        ShapeArg::Box => ShapeKind::Box { aspect: a.aspect },
        ShapeArg::TwoToneSphere => ShapeKind::TwoToneSphere,
    };
    let texture = match a.texture {
        TextureArg::Gradient => Texture::AxisGradient,
        TextureArg::Uniform => Texture::Uniform { rgb: a.color },
    };
    let shape = SyntheticShape::new(kind, texture).map_err(|e| usage(e.to_string()))?;
    if a.size < 2 {
        return Err(usage("--size must be at least 2"));
    }
    let sampler = synth::ViewSampler::new(a.size);
    let poses = if a.axis_views {
        let (lo, hi) = sampler.distance;
        synth::axis_aligned_poses(0.5 * (lo + hi))
    } else {
        if a.views == 0 {
            return Err(usage("--views must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
        (0..a.views).map(|_| sampler.sample(&mut rng)).collect()
    };
    let manifest = synth::write_scene(&shape, &a.object_id, &poses, &sampler.intrinsics, a.size, a.size, &a.output)?;
    let path = a.output.join("manifest.json");
    emit(
        g,
        &json!({ "manifest": path, "frames": manifest.frames.len(), "intrinsics": sampler.intrinsics }),
        format!("wrote {} frames to {}", manifest.frames.len(), path.display()),
    )
}

fn resolve_object(scene: &Scene, requested: Option<&str>) -> Result<String> {
    match requested {
        Some(id) => {
            scene.object(id).ok_or_else(|| anyhow!("object {id:?} not in manifest"))?;
            Ok(id.to_string())
        }
        None => match scene.manifest.objects.as_slice() {
            [only] => Ok(only.id.clone()),
            [] => Err(anyhow!("manifest has no objects")),
            _ => Err(usage("manifest has several objects; pass --object")),
        },
    }
}

fn carve_cmd(g: &Global, a: &crate::CarveArgs) -> Result<()> {
    let scene = dataset::load_manifest(&a.manifest)?;
    let object_id = resolve_object(&scene, a.object.as_deref())?;
    let frames: Vec<_> = scene.frames_of(Some(&object_id)).collect();
    let observations = frames
        .iter()
        .map(|f| f.load_observation())
        .collect::<Result<Vec<_>, _>>()?;
    let refs = reconstruction::select_references(&observations, g.refs)?;
    let feature = reconstruction::carve(&refs, g.voxels)?;
    dataset::save_feature(&feature, &a.output)?;
    let manifest = fs::canonicalize(&a.manifest).unwrap_or_else(|_| a.manifest.clone());
    let sidecar = FeatureSidecar {
        object_id: object_id.clone(),
        d_real: scene.object(&object_id).map_or(2.0, |o| o.d_real),
        references: refs.indices.iter().map(|&i| frames[i].id).collect(),
        manifest: Some(manifest.to_string_lossy().into_owned()),
    };
    dataset::save_sidecar(&sidecar, &a.output)?;
    let occupied = (0..feature.voxel_count()).filter(|&v| feature.is_occupied(v)).count();
    emit(
        g,
        &json!({ "feature": a.output, "references": sidecar.references, "occupied_voxels": occupied }),
        format!("carved {occupied} occupied voxels from frames {:?} into {}", sidecar.references, a.output.display()),
    )
}

fn manifest_for(feature: &Path, explicit: Option<&Path>, sidecar: Option<&FeatureSidecar>) -> Result<Scene> {
    let path = match (explicit, sidecar.and_then(|s| s.manifest.as_deref())) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                feature.parent().unwrap_or(Path::new("")).join(p)
            }
        }
        (None, None) => return Err(usage("--frame needs --manifest (the feature has no sidecar manifest)")),
    };
    Ok(dataset::load_manifest(path)?)
}

fn render_cmd(g: &Global, a: &crate::RenderArgs) -> Result<()> {
    let feature = dataset::load_feature(&a.feature)?;
    let sidecar = dataset::load_sidecar(&a.feature)?;
    let (pose, k, width, height) = if let Some(id) = a.frame {
        let scene = manifest_for(&a.feature, a.manifest.as_deref(), sidecar.as_ref())?;
        let frame = scene.frame(id).ok_or_else(|| anyhow!("frame {id} not in manifest"))?;
        let img = RgbImage::load(&frame.image_path)?;
        (frame.pose, frame.intrinsics, img.width, img.height)
    } else if let Some(p) = &a.pose {
        let d_real = sidecar.as_ref().map_or(2.0, |s| s.d_real);
        let pj: PoseJson = read_json(p)?;
        let pose = pj.to_internal(Convention::NegZForward, d_real)?;
        let k = load_intrinsics(a.intrinsics.as_deref().unwrap())?;
        (pose, k, a.width.unwrap(), a.height.unwrap())
    } else {
        return Err(usage("render needs --frame or --pose"));
    };

    let object_grid = match &a.bbox {
        Some(b) => grid::object_grid(&k, b, &pose, g.out_res, g.n_z)?,
        None => {
            let formed = grid::form_grid(&k, width, height, g.n_z)?;
            grid::transform_grid(&grid::push_grid(&formed, pose.t.norm())?, &pose)?
        }
    };
    let appearance = projector::render_grid(&feature, &object_grid)?;
    appearance.save(&a.output, a.valid_mask.as_deref())?;
    if let Some(p) = &a.dump_grid {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        grid::write_grid_dump(&object_grid, std::io::BufWriter::new(f))?;
    }
    let valid = appearance.valid.iter().filter(|v| **v).count();
    emit(
        g,
        &json!({ "output": a.output, "width": appearance.width, "height": appearance.height, "valid_pixels": valid }),
        format!("rendered {}×{} ({valid} valid pixels) to {}", appearance.width, appearance.height, a.output.display()),
    )
}

fn refine_cmd(g: &Global, a: &crate::RefineArgs) -> Result<()> {
    let feature = dataset::load_feature(&a.feature)?;
    let sidecar = dataset::load_sidecar(&a.feature)?;

    let mut d_real = sidecar.as_ref().map_or(2.0, |s| s.d_real);
    let mut convention = Convention::NegZForward;
    let (image, mask, mut bbox, k, mut gt) = if let Some(id) = a.frame {
        let scene = dataset::load_manifest(a.manifest.as_ref().unwrap())?;
        let frame = scene.frame(id).ok_or_else(|| anyhow!("frame {id} not in manifest"))?;
        d_real = frame.d_real;
        convention = scene.convention;
        let obs = frame.load_observation()?;
        (obs.image, Some(obs.mask), Some(frame.bbox), frame.intrinsics, Some(frame.pose))
    } else {
        let image = a.image.as_ref().ok_or_else(|| usage("refine needs --image or --frame"))?;
        let k = a.intrinsics.as_ref().ok_or_else(|| usage("refine needs --intrinsics or --frame"))?;
        (RgbImage::load(image)?, None, None, load_intrinsics(k)?, None)
    };
    if let Some(d) = a.d_real {
        d_real = d;
    }
    let mask = match &a.mask {
        Some(p) => Some(Mask::load(p)?),
        None => mask,
    };
    if let Some(b) = a.bbox {
        bbox = Some(b);
    }
    let bbox: BoundingBox = match (bbox, &mask) {
        (Some(b), _) => b,
        (None, Some(m)) if m.count() > 0 => synth::mask_bbox(m),
        (None, Some(_)) => return Err(anyhow!("mask is empty; cannot derive a box")),
        (None, None) => return Err(usage("refine needs --bbox or --mask")),
    };
    if let Some(p) = &a.gt_pose {
        gt = Some(read_json::<PoseJson>(p)?.to_internal(convention, d_real)?);
    }
    let initial = match &a.init {
        Some(p) => read_json::<PoseJson>(p)?.to_internal(convention, d_real)?,
        None => refiner::initialize_from_box(&bbox, &k),
    };

    let mode = match a.mode {
        ModeArg::RenderCompareIm => RefineMode::RenderCompareIm,
        ModeArg::SupervisedGm => RefineMode::SupervisedGm,
        ModeArg::SupervisedPm => RefineMode::SupervisedPm,
    };
    let cfg = RefinerConfig {
        outer_iters: a.outer_iters,
        inner_steps: a.steps,
        step_size: a.lr,
        mode,
        fd_step: a.fd_step,
        seed: g.seed,
        grid: grid_config(g),
        ..Default::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let points;
    let target = match mode {
        RefineMode::RenderCompareIm => RefineTarget::Observed(projector::crop_image(&image, &bbox, g.out_res)?),
        RefineMode::SupervisedGm => RefineTarget::Pose(gt.ok_or_else(|| usage("supervised modes need --gt-pose or --frame"))?),
        RefineMode::SupervisedPm => {
            let gt = gt.ok_or_else(|| usage("supervised modes need --gt-pose or --frame"))?;
            points = metrics::feature_points(&feature, 4096, g.seed)?;
            RefineTarget::PosePoints(gt, &points)
        }
    };
    let (pose, trace) = refiner::refine(&initial, &target, &feature, &k, &bbox, &cfg)?;

    write_json(&PoseJson::from_internal(&pose, convention, d_real)?, &a.output)?;
    if let Some(p) = &a.trace {
        write_json(&trace, p)?;
    }
    if let Some(dir) = &a.iter_renders {
        fs::create_dir_all(dir)?;
        if let RefineTarget::Observed(obs) = &target {
            obs.save(dir.join("observed.png"), None)?;
        }
        projector::render(&feature, &initial, &k, &bbox, g.n_z, g.out_res)?.save(dir.join("iter0.png"), None)?;
        for (i, it) in trace.iterations.iter().enumerate() {
            let p = it.pose.raw_pose();
            projector::render(&feature, &p, &k, &bbox, g.n_z, g.out_res)?.save(dir.join(format!("iter{}.png", i + 1)), None)?;
        }
    }

    let initial_objective = trace.iterations.first().map(|it| it.initial_objective);
    let final_objective = trace.final_objective();
    let mut out = json!({
        "pose": PoseJson::from_internal(&pose, convention, d_real)?,
        "initial_objective": initial_objective,
        "final_objective": final_objective,
        "steps": trace.iterations.iter().map(|it| it.steps).collect::<Vec<_>>(),
    });
    let mut summary = format!(
        "objective {:.6e} -> {:.6e}",
        initial_objective.unwrap_or(f64::NAN),
        final_objective.unwrap_or(f64::NAN)
    );
    if let Some(gt) = gt {
        let (rot, trans) = metrics::pose_errors(&pose, &gt);
        let trans = trans * 0.5 * d_real;
        out["rot_err_deg"] = json!(rot.to_degrees());
        out["trans_err"] = json!([trans.x, trans.y, trans.z]);
        summary.push_str(&format!(", rotation error {:.3}°", rot.to_degrees()));
    }
    emit(g, &out, summary)
}

fn losses_cmd(g: &Global, a: &crate::LossesArgs) -> Result<()> {
    if !(a.d_real > 0.0) {
        return Err(usage("--d-real must be positive"));
    }
    let pred = read_json::<PoseJson>(&a.pred)?.to_internal(Convention::NegZForward, a.d_real)?;
    let gt = read_json::<PoseJson>(&a.gt)?.to_internal(Convention::NegZForward, a.d_real)?;
    let k = load_intrinsics(&a.intrinsics)?;
    let mut report = objectives::total_loss(&pred, &gt, &k, &a.bbox, &grid_config(g))?;
    if let Some(f) = &a.feature {
        let feature = dataset::load_feature(f)?;
        let points = metrics::feature_points(&feature, a.points, g.seed)?;
        report.pm = Some(objectives::pm_loss(&pred, &gt, &points)?);
    }
    if let Some(p) = &a.output {
        write_json(&report, p)?;
    }
    let mut summary = format!("gm {:.6e}, gd {:.6e}, total {:.6e}", report.gm, report.gd, report.total);
    if let Some(pm) = report.pm {
        summary.push_str(&format!(", pm {pm:.6e}"));
    }
    emit(g, &serde_json::to_value(report)?, summary)
}

fn eval_points(
    scene: &Scene,
    object_id: &str,
    feature: Option<&reconstruction::VoxelFeature>,
    n: usize,
    seed: u64,
) -> Result<Vec<Vector3<f64>>> {
    let object = scene.object(object_id).ok_or_else(|| anyhow!("object {object_id:?} not in manifest"))?;
    if let Some(shape) = &object.shape {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok(shape.surface_points(n.max(1), &mut rng));
    }
    match feature {
        Some(f) => Ok(metrics::feature_points(f, n, seed)?),
        None => Err(usage(format!("object {object_id:?} has no synthetic shape; pass --feature for evaluation points"))),
    }
}

fn eval_cmd(g: &Global, a: &crate::EvalArgs) -> Result<()> {
    let scene = dataset::load_manifest(&a.manifest)?;
    let preds = dataset::load_predictions(&a.predictions)?;
    let feature = a.feature.as_ref().map(dataset::load_feature).transpose()?;
    let mut points: HashMap<String, Vec<Vector3<f64>>> = HashMap::new();
    let mut rows: Vec<(usize, String, FrameMetrics)> = Vec::with_capacity(preds.len());
    for p in &preds {
        let frame = scene.frame(p.frame).ok_or_else(|| anyhow!("prediction for unknown frame {}", p.frame))?;
        if !points.contains_key(&frame.object_id) {
            let pts = eval_points(&scene, &frame.object_id, feature.as_ref(), a.points, g.seed)?;
            points.insert(frame.object_id.clone(), pts);
        }
        let pred = p
            .pose
            .to_internal(scene.convention, frame.d_real)
            .with_context(|| format!("prediction for frame {}", p.frame))?;
        let m = metrics::frame_metrics(&pred, &frame.pose, &points[&frame.object_id], &frame.intrinsics, frame.d_real)?;
        rows.push((p.frame, frame.object_id.clone(), m));
    }
    if rows.is_empty() {
        return Err(anyhow!("no predictions in {}", a.predictions.display()));
    }
    let metric_rows: Vec<FrameMetrics> = rows.iter().map(|r| r.2).collect();
    let report = metrics::summarize(&metric_rows, a.thr_ratio, a.auc_max_thr);

    if let Some(p) = &a.csv {
        let mut s = String::from("frame,object,add,add_real,add_s,add_s_real,proj2d,rot_err,trans_err_x,trans_err_y,trans_err_z\n");
        for (frame, object, m) in &rows {
            s.push_str(&format!(
                "{frame},{object},{},{},{},{},{},{},{},{},{}\n",
                m.add, m.add_real, m.add_s, m.add_s_real, m.proj2d, m.rot_err, m.trans_err[0], m.trans_err[1], m.trans_err[2]
            ));
        }
        fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.output {
        write_json(&report, p)?;
    }
    emit(
        g,
        &serde_json::to_value(&report)?,
        format!(
            "{} frames: ADD acc {:.3}, ADD-S acc {:.3}, AUC ADD-S {:.3}, Proj2D@5px {:.3}",
            report.frames, report.add_accuracy, report.add_s_accuracy, report.auc_add_s, report.proj2d_accuracy_5px
        ),
    )
}
