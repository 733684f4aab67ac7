//! `dprost` command-line front end.
//!
//! Exit codes: 0 on success, 1 on usage errors (with help text), 2 on data
//! errors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "dprost", version, about = "Projective-grid pose refinement toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Side of the zoom-in crop, in pixels.
    #[arg(long, global = true, default_value_t = 128)]
    pub out_res: usize,
    /// Grid points per ray.
    #[arg(long = "nz", global = true, default_value_t = 64)]
    pub n_z: usize,
    /// Voxel grid side length.
    #[arg(long, global = true, default_value_t = 128)]
    pub voxels: usize,
    /// Number of reference views used for carving.
    #[arg(long, global = true, default_value_t = 8)]
    pub refs: usize,
    /// Weight of the distance term in the grid loss.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub lambda_gd: f64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "DPROST_THREADS")]
    pub threads: Option<usize>,
    /// Print the result as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic object into a scene directory with a manifest.
    Synth(SynthArgs),
    /// Carve a voxel feature from a scene's reference views.
    Carve(CarveArgs),
    /// Render a voxel feature under a pose.
    Render(RenderArgs),
    /// Refine a pose for one observed image.
    Refine(RefineArgs),
    /// Evaluate the grid, distance and point losses between two poses.
    Losses(LossesArgs),
    /// Score predicted poses against a manifest's ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ShapeArg {
    Sphere,
    Cube,
    Box,
    TwoToneSphere,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TextureArg {
    Gradient,
    Uniform,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub shape: ShapeArg,
    /// Side ratio of the box shape.
    #[arg(long, default_value_t = 3.0)]
    pub aspect: f64,
    #[arg(long, value_enum, default_value_t = TextureArg::Uniform)]
    pub texture: TextureArg,
    /// Color of the uniform texture, as `r,g,b` in [0, 1].
    #[arg(long, value_parser = parse_triple, default_value = "0.8,0.5,0.3")]
    pub color: [f64; 3],
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    /// Image width and height.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Use the six axis-aligned views instead of random ones.
    #[arg(long)]
    pub axis_views: bool,
    #[arg(long, default_value = "object")]
    pub object_id: String,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CarveArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Object to carve; required when the manifest has several.
    #[arg(long)]
    pub object: Option<String>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub feature: PathBuf,
    /// Manifest frame whose pose, intrinsics and size to use. The manifest is
    /// taken from the feature's sidecar unless `--manifest` is given.
    #[arg(long, conflicts_with = "pose")]
    pub frame: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Pose JSON, used with `--intrinsics`, `--width` and `--height`.
    #[arg(long, requires_all = ["intrinsics", "width", "height"])]
    pub pose: Option<PathBuf>,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    /// Render only the zoom-in crop of this box, `x,y,w,h`.
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<dprost::BoundingBox>,
    /// Also write the valid-pixel mask.
    #[arg(long)]
    pub valid_mask: Option<PathBuf>,
    /// Also write the object-space grid as a binary dump.
    #[arg(long)]
    pub dump_grid: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    RenderCompareIm,
    SupervisedGm,
    SupervisedPm,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub feature: PathBuf,
    /// Take image, mask, box, intrinsics and ground truth from this manifest
    /// frame.
    #[arg(long, requires = "manifest")]
    pub frame: Option<usize>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Object mask; used for the box when `--bbox` is absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<dprost::BoundingBox>,
    #[arg(long)]
    pub intrinsics: Option<PathBuf>,
    /// Starting pose; defaults to the pose fitted to the box.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Target pose for the supervised modes.
    #[arg(long)]
    pub gt_pose: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::RenderCompareIm)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 2)]
    pub outer_iters: usize,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = dprost::objectives::DEFAULT_FD_STEP)]
    pub fd_step: f64,
    /// Object diameter, when the feature has no sidecar.
    #[arg(long)]
    pub d_real: Option<f64>,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Directory for a crop render after every outer iteration.
    #[arg(long)]
    pub iter_renders: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LossesArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub intrinsics: PathBuf,
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: dprost::BoundingBox,
    #[arg(long, default_value_t = 2.0)]
    pub d_real: f64,
    /// Feature whose occupied voxels give the point loss.
    #[arg(long)]
    pub feature: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    pub points: usize,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature for the evaluation points of non-synthetic objects.
    #[arg(long)]
    pub feature: Option<PathBuf>,
    #[arg(long, default_value_t = 4096)]
    pub points: usize,
    #[arg(long, default_value_t = dprost::metrics::DEFAULT_THRESHOLD_RATIO)]
    pub thr_ratio: f64,
    /// Upper end of the ADD-S AUC sweep, in real units.
    #[arg(long, default_value_t = 0.1)]
    pub auc_max_thr: f64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn parse_floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma-separated numbers"));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("not a number: {p:?}"))?;
    }
    Ok(out)
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    parse_floats::<3>(s)
}

fn parse_bbox(s: &str) -> Result<dprost::BoundingBox, String> {
    let [x, y, w, h] = parse_floats::<4>(s)?;
    dprost::BoundingBox::new(x, y, w, h).map_err(|e| e.to_string())
}

/// Error raised for invalid flag combinations found after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}\n");
            use clap::CommandFactory;
            let _ = Cli::command().print_help();
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
