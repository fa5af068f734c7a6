//! `camlidar` command-line front end. Every subcommand is a thin wrapper over
//! library calls; exit code 0 on success, 1 on bad input, 2 on internal failure.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use camlidar::correspondence::{ground_truth_flow, oracle_match, OracleNoiseConfig};
use camlidar::geometry::{CameraIntrinsics, FrameConvention, PointCloud, Pose};
use camlidar::io::{self, RunConfig, VoxelGridConfig};
use camlidar::pipeline::{
    self, BenchmarkConfig, CalibrationFrame, ColorFrame, MatcherConfig, StageConfig, StageStatus,
};
use camlidar::projection::{render_lidar_image, OcclusionConfig, ProjectionConfig};
use camlidar::scene;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "camlidar", version, about = "Camera to LiDAR-map matching toolkit")]
struct Cli {
    /// TOML run configuration supplying paths, stages, seeds and projection settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Aggregate scans at their trajectory poses into a voxelized PLY map.
    BuildMap(BuildMapArgs),
    /// Render a map into a LiDAR image (LIMG) at a camera pose.
    Project(ProjectArgs),
    /// Write the ground-truth flow (FLOW) between an initial and a true pose.
    GenFlow(GenFlowArgs),
    /// Localize one camera frame in a map with the staged pipeline.
    Localize(LocalizeArgs),
    /// Estimate a camera-LiDAR extrinsic over many frames and aggregate it.
    Calibrate(CalibrateArgs),
    /// Seeded Monte-Carlo run producing a JSON-lines report.
    Benchmark(BenchmarkArgs),
    /// Color map points from camera images.
    Colorize(ColorizeArgs),
}

#[derive(Args)]
struct MapArgs {
    /// Map file: PLY, or the binary scan format.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Intrinsics TOML file.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
}

#[derive(Args)]
struct BuildMapArgs {
    /// Directory of `.bin` scans, used in file-name order.
    #[arg(long)]
    scans: PathBuf,
    /// Sensor-to-map poses, one line per scan.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Directory of `.label` files named like the scans.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Semantic label to drop; repeatable.
    #[arg(long = "drop-label")]
    drop_labels: Vec<u32>,
    #[arg(long, default_value_t = 0.1)]
    voxel_size: f64,
    /// Axis convention of the scans.
    #[arg(long, value_enum, default_value_t = Convention::PinholeZForward)]
    convention: Convention,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Convention {
    PinholeZForward,
    RobotXForward,
}

impl From<Convention> for FrameConvention {
    fn from(c: Convention) -> Self {
        match c {
            Convention::PinholeZForward => FrameConvention::PinholeZForward,
            Convention::RobotXForward => FrameConvention::RobotXForward,
        }
    }
}

#[derive(Args)]
struct ProjectArgs {
    #[command(flatten)]
    map: MapArgs,
    /// Map-to-camera pose: 12 reals, row-major 3x4.
    #[arg(long)]
    pose: String,
    #[arg(long)]
    max_depth: Option<f64>,
    /// Apply the occlusion filter (obstruction reading of the cosine sum).
    #[arg(long)]
    occlusion: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GenFlowArgs {
    #[command(flatten)]
    map: MapArgs,
    /// Map-to-camera pose the LiDAR image is rendered at.
    #[arg(long)]
    init_pose: String,
    /// True map-to-camera pose.
    #[arg(long)]
    gt_pose: String,
    /// Gaussian noise added to displacements, pixels.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the LiDAR image rendered at the initial pose.
    #[arg(long)]
    limg: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    map: MapArgs,
    /// True map-to-camera pose (required by the oracle matcher and for errors).
    #[arg(long)]
    gt_pose: Option<String>,
    /// Initial pose; drawn from the first stage's range around the true pose when absent.
    #[arg(long)]
    init_pose: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use this FLOW file for a single external-matcher stage.
    #[arg(long)]
    flow: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Directory of `.bin` scans in the LiDAR frame, one per camera frame.
    #[arg(long, conflicts_with = "synthetic_frames")]
    scans: Option<PathBuf>,
    /// Use this many synthetic street frames instead of scans.
    #[arg(long)]
    synthetic_frames: Option<usize>,
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// True LiDAR-to-camera extrinsic, 12 reals.
    #[arg(long)]
    gt_extrinsic: Option<String>,
    /// Initial extrinsic; drawn around the true one when absent.
    #[arg(long)]
    init_extrinsic: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Use the built-in synthetic street scene.
    #[arg(long)]
    synthetic_street: bool,
    #[arg(long, default_value_t = 10_000)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    #[command(flatten)]
    map: MapArgs,
    /// True map-to-camera pose when a map is given.
    #[arg(long)]
    gt_pose: Option<String>,
    /// Number of seeds 0..N (overrides the config's seed list).
    #[arg(long)]
    seeds: Option<u64>,
    /// Record wall-clock runtimes (reports are then not reproducible byte for byte).
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ColorizeArgs {
    #[command(flatten)]
    map: MapArgs,
    /// Camera-to-map poses with timestamps, one line per image.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// Directory of PNG/PPM images, used in file-name order.
    #[arg(long)]
    images: PathBuf,
    /// Skip the occlusion filter.
    #[arg(long)]
    no_occlusion: bool,
    /// Leave points that never received a color out of the output.
    #[arg(long)]
    drop_uncolored: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<camlidar::Error> for Failure {
    fn from(e: camlidar::Error) -> Self {
        Failure {
            code: if e.is_user_error() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn user(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::BuildMap(a) => build_map(a, &cfg),
        Command::Project(a) => project(a, &cfg),
        Command::GenFlow(a) => gen_flow(a, &cfg),
        Command::Localize(a) => localize(a, &cfg),
        Command::Calibrate(a) => calibrate(a, &cfg),
        Command::Benchmark(a) => benchmark(a, &cfg),
        Command::Colorize(a) => colorize(a, &cfg),
    }
}

/// Flag value, else config value, else an error naming the flag.
fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| user(format!("missing --{name} (or `{name}` in --config)")))
}

fn load_map_and_intrinsics(a: MapArgs, cfg: &RunConfig) -> CliResult<(PointCloud, CameraIntrinsics)> {
    let map_path = required(a.map, &cfg.map, "map")?;
    let k_path = required(a.intrinsics, &cfg.intrinsics, "intrinsics")?;
    let (k, convention) = io::load_intrinsics(&k_path)?;
    let map = io::load_map(&map_path)?;
    Ok((map.to_camera_convention(convention), k))
}

fn projection_config(cfg: &RunConfig) -> ProjectionConfig {
    cfg.projection.unwrap_or_default()
}

fn stages(cfg: &RunConfig) -> Vec<StageConfig> {
    if cfg.stages.is_empty() {
        StageConfig::standard_stages()
    } else {
        cfg.stages.clone()
    }
}

fn sorted_files(dir: &Path, extensions: &[&str]) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| user(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| extensions.iter().any(|x| e.eq_ignore_ascii_case(x)))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(user(format!("no {} files in {}", extensions.join("/"), dir.display())));
    }
    Ok(files)
}

fn output_writer(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn pose_record(pose: &Pose) -> serde_json::Value {
    json!(pose.to_row_major_3x4())
}

fn build_map(a: BuildMapArgs, cfg: &RunConfig) -> CliResult<()> {
    let traj_path = required(a.trajectory, &cfg.trajectory, "trajectory")?;
    let output = required(a.output, &cfg.output, "output")?;
    let files = sorted_files(&a.scans, &["bin"])?;
    let traj = io::load_trajectory(&traj_path)?;
    if traj.len() != files.len() {
        return Err(user(format!("{} scans but {} trajectory poses", files.len(), traj.len())));
    }
    let convention = FrameConvention::from(a.convention);
    let mut scans = Vec::with_capacity(files.len());
    let mut labels = Vec::new();
    for (f, (_, pose)) in files.iter().zip(&traj.entries) {
        scans.push((io::load_scan(f)?.to_camera_convention(convention), *pose));
        if let Some(dir) = &a.labels {
            let stem = f.file_stem().expect("file has a name");
            labels.push(io::load_labels(&dir.join(stem).with_extension("label"))?);
        }
    }
    let grid = VoxelGridConfig {
        voxel_size: a.voxel_size,
    };
    let labels = a.labels.as_ref().map(|_| labels.as_slice());
    let map = io::build_map(&scans, &grid, labels, &a.drop_labels)?;
    io::export_ply(&map, &output)?;
    eprintln!("wrote {} points to {}", map.len(), output.display());
    Ok(())
}

fn project(a: ProjectArgs, cfg: &RunConfig) -> CliResult<()> {
    let output = required(a.output, &cfg.output, "output")?;
    let (map, k) = load_map_and_intrinsics(a.map, cfg)?;
    let pose = io::parse_pose(&a.pose)?;
    let mut proj = projection_config(cfg);
    if let Some(d) = a.max_depth {
        proj.max_depth = d;
    }
    if a.occlusion {
        proj.occlusion = Some(OcclusionConfig::obstruction());
    }
    let image = render_lidar_image(&map, &pose, &k, &proj)?;
    image.write_limg(BufWriter::new(File::create(&output)?))?;
    eprintln!("{} valid pixels", image.valid_count());
    Ok(())
}

fn gen_flow(a: GenFlowArgs, cfg: &RunConfig) -> CliResult<()> {
    let output = required(a.output, &cfg.output, "output")?;
    let (map, k) = load_map_and_intrinsics(a.map, cfg)?;
    let init = io::parse_pose(&a.init_pose)?;
    let gt = io::parse_pose(&a.gt_pose)?;
    let (image, flow) = ground_truth_flow(&map, &init, &gt, &k, &projection_config(cfg))?;
    let noise = OracleNoiseConfig {
        gaussian_sigma: a.sigma,
        outlier_fraction: a.outlier_fraction,
        rng_seed: a.seed,
        ..Default::default()
    };
    let flow = oracle_match(&flow, &noise)?;
    flow.write_flow(BufWriter::new(File::create(&output)?))?;
    if let Some(p) = a.limg {
        image.write_limg(BufWriter::new(File::create(p)?))?;
    }
    Ok(())
}

fn localize(a: LocalizeArgs, cfg: &RunConfig) -> CliResult<()> {
    let (map, k) = load_map_and_intrinsics(a.map, cfg)?;
    let gt = a.gt_pose.as_deref().map(io::parse_pose).transpose()?;
    let mut stages = stages(cfg);
    if let Some(flow) = a.flow {
        stages = vec![StageConfig {
            matcher: MatcherConfig::External {
                flow_path: flow,
                upscale_factor: 1,
            },
            ..stages[0].clone()
        }];
    }
    let init = match (&a.init_pose, &gt) {
        (Some(p), _) => io::parse_pose(p)?,
        (None, Some(gt)) => pipeline::sample_initial_pose(gt, &stages[0].noise_range, a.seed),
        (None, None) => return Err(user("missing --init-pose (or --gt-pose to sample one)")),
    };
    pipeline::validate_stages(&stages)?;
    let outcomes = pipeline::iterative_localize(&map, &init, &k, &stages, gt.as_ref());
    let mut w = output_writer(&a.output.or_else(|| cfg.output.clone()))?;
    for (i, o) in outcomes.iter().enumerate() {
        let mut rec = json!({
            "record": "stage",
            "stage": i + 1,
            "status": status_name(&o.status),
            "inliers": o.result.as_ref().map_or(0, |r| r.inlier_indices.len()),
            "pose": pose_record(&o.pose),
        });
        if let Some(gt) = &gt {
            let (et, er) = camlidar::pose_errors(gt, &o.pose);
            rec["E_t"] = json!(et);
            rec["E_r"] = json!(er);
        }
        if let StageStatus::Failed(m) = &o.status {
            rec["message"] = json!(m);
        }
        writeln!(w, "{rec}")?;
    }
    w.flush()?;
    match outcomes.last().map(|o| &o.status) {
        Some(StageStatus::Failed(m)) => Err(Failure {
            code: 2,
            message: format!("stage {} failed: {m}", outcomes.len()),
        }),
        _ => Ok(()),
    }
}

fn status_name(s: &StageStatus) -> &'static str {
    match s {
        StageStatus::Ok => "ok",
        StageStatus::NoConsensus => "no-consensus",
        StageStatus::Failed(_) => "failed",
    }
}

fn calibrate(a: CalibrateArgs, cfg: &RunConfig) -> CliResult<()> {
    let (clouds, k) = match (a.synthetic_frames, &a.scans) {
        (Some(n), _) => {
            if n == 0 {
                return Err(user("--synthetic-frames must be >= 1"));
            }
            // each frame is a fresh street scan; its ground-truth pose is the extrinsic
            let clouds: Vec<PointCloud> =
                (0..n as u64).map(|i| scene::synthetic_street(10_000, i).cloud).collect();
            (clouds, scene::kitti_intrinsics())
        }
        (None, Some(dir)) => {
            let k_path = required(a.intrinsics.clone(), &cfg.intrinsics, "intrinsics")?;
            let (k, convention) = io::load_intrinsics(&k_path)?;
            let clouds = sorted_files(dir, &["bin"])?
                .iter()
                .map(|f| Ok(io::load_scan(f)?.to_camera_convention(convention)))
                .collect::<CliResult<Vec<_>>>()?;
            (clouds, k)
        }
        (None, None) => return Err(user("missing --scans (or --synthetic-frames)")),
    };
    let gt = match (&a.gt_extrinsic, a.synthetic_frames) {
        (Some(p), _) => Some(io::parse_pose(p)?),
        (None, Some(_)) => Some(scene::street_gt_pose()),
        (None, None) => None,
    };
    let stage_list = stages(cfg);
    let init = match (&a.init_extrinsic, &gt) {
        (Some(p), _) => io::parse_pose(p)?,
        (None, Some(gt)) => pipeline::sample_initial_pose(gt, &stage_list[0].noise_range, a.seed),
        (None, None) => return Err(user("missing --init-extrinsic (or --gt-extrinsic to sample one)")),
    };
    let frames: Vec<CalibrationFrame> = clouds
        .into_iter()
        .enumerate()
        .map(|(i, cloud)| CalibrationFrame {
            cloud,
            stages: stage_list
                .iter()
                .enumerate()
                .map(|(s, st)| st.reseeded(a.seed.wrapping_add(i as u64), s))
                .collect(),
        })
        .collect();
    let rep = pipeline::calibrate_extrinsics(&frames, &init, &k, gt.as_ref())?;
    let mut w = output_writer(&a.output.or_else(|| cfg.output.clone()))?;
    for (i, outcomes) in rep.per_frame.iter().enumerate() {
        let last = outcomes.last().expect("stages are nonempty");
        let mut rec = json!({
            "record": "frame",
            "frame": i,
            "status": status_name(&last.status),
            "used": rep.used_frames.contains(&i),
            "pose": pose_record(&last.pose),
        });
        if let Some(gt) = &gt {
            let (et, er) = camlidar::pose_errors(gt, &last.pose);
            rec["E_t"] = json!(et);
            rec["E_r"] = json!(er);
        }
        writeln!(w, "{rec}")?;
    }
    let agg = &rep.aggregation;
    let mut rec = json!({
        "record": "aggregate",
        "frames": agg.frame_count,
        "mean": pose_record(&agg.mean_pose),
        "mode": pose_record(&agg.mode_pose),
        "median_translation": [agg.median_translation.x, agg.median_translation.y, agg.median_translation.z],
    });
    if let Some(gt) = &gt {
        rec["mean_E_t"] = json!(camlidar::pose_errors(gt, &agg.mean_pose).0);
        rec["mean_E_r"] = json!(camlidar::pose_errors(gt, &agg.mean_pose).1);
    }
    if let Some((msee, mrr)) = rep.msee_mrr {
        rec["MSEE"] = json!(msee);
        rec["MRR"] = json!(mrr);
    }
    writeln!(w, "{rec}")?;
    w.flush()?;
    Ok(())
}

fn benchmark(a: BenchmarkArgs, cfg: &RunConfig) -> CliResult<()> {
    let (cloud, k, gt) = if a.synthetic_street {
        let s = scene::synthetic_street(a.points, a.scene_seed);
        (s.cloud, s.intrinsics, s.gt_pose)
    } else {
        let (map, k) = load_map_and_intrinsics(a.map, cfg)?;
        let gt = io::parse_pose(a.gt_pose.as_deref().ok_or_else(|| user("missing --gt-pose (or --synthetic-street)"))?)?;
        (map, k, gt)
    };
    let seeds = match (a.seeds, &cfg.seeds) {
        (Some(n), _) => (0..n).collect(),
        (None, Some(s)) => s.clone(),
        (None, None) => BenchmarkConfig::default().seeds,
    };
    let bench = BenchmarkConfig {
        stages: stages(cfg),
        seeds,
        record_timing: a.timing || cfg.record_timing,
    };
    let report = pipeline::run_benchmark(&cloud, &gt, &k, &bench)?;
    let output = a.output.or_else(|| cfg.output.clone());
    let w = output_writer(&output)?;
    report.write_json_lines(w)?;
    Ok(())
}

fn colorize(a: ColorizeArgs, cfg: &RunConfig) -> CliResult<()> {
    let output = required(a.output, &cfg.output, "output")?;
    let traj_path = required(a.trajectory, &cfg.trajectory, "trajectory")?;
    let (map, k) = load_map_and_intrinsics(a.map, cfg)?;
    let traj = io::load_trajectory(&traj_path)?;
    let files = sorted_files(&a.images, &["png", "ppm", "pnm"])?;
    if files.len() != traj.len() {
        return Err(user(format!("{} images but {} trajectory poses", files.len(), traj.len())));
    }
    let frames = files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            Ok(ColorFrame {
                image: io::load_rgb_image(f)?,
                pose: traj.camera_pose(i),
                timestamp: traj.entries[i].0,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let mut proj = cfg.projection.unwrap_or_else(pipeline::colorize_projection);
    if a.no_occlusion {
        proj.occlusion = None;
    }
    let colored = pipeline::colorize_map(&map, &frames, &k, &proj, None)?;
    let cloud = if a.drop_uncolored {
        let keep: Vec<usize> = (0..colored.colored.len()).filter(|&i| colored.colored[i]).collect();
        subset(&colored.cloud, &keep)
    } else {
        colored.cloud
    };
    io::export_ply(&cloud, &output)?;
    let n = colored.colored.iter().filter(|&&c| c).count();
    eprintln!("colored {n} of {} points", colored.colored.len());
    Ok(())
}

fn subset(cloud: &PointCloud, keep: &[usize]) -> PointCloud {
    let mut out = PointCloud::new(keep.iter().map(|&i| cloud.points[i]).collect());
    out.intensity = cloud.intensity.as_ref().map(|v| keep.iter().map(|&i| v[i]).collect());
    out.colors = cloud.colors.as_ref().map(|v| keep.iter().map(|&i| v[i]).collect());
    out
}
