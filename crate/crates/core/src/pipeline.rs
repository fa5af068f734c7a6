//! Drivers: initial-pose sampling, staged refinement, calibration metrics,
//! temporal aggregation of extrinsics, map colorization and the seeded
//! benchmark harness.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::{
    filter_by_uncertainty, ground_truth_flow, oracle_match, to_correspondences, upscale_flow, FlowField,
    OracleNoiseConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{canonical_quaternion, pose_errors, se3_log_norm, CameraIntrinsics, PointCloud, Pose};
use crate::pnp::{ransac_pnp, PnpResult, RansacConfig};
use crate::projection::{render_lidar_image, OcclusionConfig, ProjectionConfig};

/// Per-component bounds of a uniform pose perturbation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseRange {
    /// Per-axis translation bound, meters.
    pub max_translation: f64,
    /// Per-angle rotation bound, degrees.
    pub max_rotation: f64,
}

impl NoiseRange {
    pub const fn new(max_translation: f64, max_rotation: f64) -> Self {
        Self {
            max_translation,
            max_rotation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation >= 0.0 && self.max_rotation >= 0.0) {
            return Err(Error::invalid("noise range", "bounds must be >= 0"));
        }
        Ok(())
    }

    fn dominates(&self, other: &NoiseRange) -> bool {
        self.max_translation >= other.max_translation && self.max_rotation >= other.max_rotation
    }
}

/// The three refinement ranges: ±2 m / ±10°, ±0.2 m / ±0.5°, ±0.05 m / ±0.1°.
pub const STAGE_RANGES: [NoiseRange; 3] = [
    NoiseRange::new(2.0, 10.0),
    NoiseRange::new(0.2, 0.5),
    NoiseRange::new(0.05, 0.1),
];

/// Source of the flow field for a stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MatcherConfig {
    /// Ground-truth flow with synthetic noise.
    Oracle(OracleNoiseConfig),
    /// Flow read from a FLOW file, optionally predicted at reduced resolution.
    External {
        flow_path: PathBuf,
        #[serde(default = "one")]
        upscale_factor: u32,
    },
}

fn one() -> u32 {
    1
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig::Oracle(OracleNoiseConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Initial-error range the stage's matcher is meant for.
    pub noise_range: NoiseRange,
    pub matcher: MatcherConfig,
    pub ransac: RansacConfig,
    pub keep_quantile: f64,
    pub projection: ProjectionConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            noise_range: STAGE_RANGES[0],
            matcher: MatcherConfig::default(),
            ransac: RansacConfig::default(),
            keep_quantile: 1.0,
            projection: ProjectionConfig::default(),
        }
    }
}

impl StageConfig {
    /// Three noiseless oracle stages with the standard ranges.
    pub fn standard_stages() -> Vec<StageConfig> {
        STAGE_RANGES
            .iter()
            .map(|r| StageConfig {
                noise_range: *r,
                ..Default::default()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.noise_range.validate()?;
        self.ransac.validate()?;
        self.projection.validate()?;
        if !(self.keep_quantile > 0.0 && self.keep_quantile <= 1.0) {
            return Err(Error::invalid("stage config", "keep_quantile must lie in (0, 1]"));
        }
        match &self.matcher {
            MatcherConfig::Oracle(n) => n.validate(),
            MatcherConfig::External { upscale_factor: 0, .. } => {
                Err(Error::invalid("stage config", "upscale_factor must be >= 1"))
            }
            MatcherConfig::External { .. } => Ok(()),
        }
    }

    /// Copy with the oracle and RANSAC seeds derived from a frame seed.
    pub fn reseeded(&self, frame_seed: u64, stage_index: usize) -> StageConfig {
        let mut out = self.clone();
        if let MatcherConfig::Oracle(noise) = &mut out.matcher {
            noise.rng_seed = mix_seed(&[noise.rng_seed, frame_seed, stage_index as u64, 0]);
        }
        out.ransac.rng_seed = mix_seed(&[self.ransac.rng_seed, frame_seed, stage_index as u64, 1]);
        out
    }
}

/// Checks that stages are nonempty, valid and ordered by non-increasing range.
pub fn validate_stages(stages: &[StageConfig]) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::invalid("stages", "at least one stage is required"));
    }
    for s in stages {
        s.validate()?;
    }
    if stages.windows(2).any(|w| !w[0].noise_range.dominates(&w[1].noise_range)) {
        return Err(Error::invalid("stages", "noise ranges must be non-increasing"));
    }
    Ok(())
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 finalizer folded over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Perturb `gt` by per-axis uniform translation noise and independent uniform
/// roll, pitch and yaw. The rotation offset is applied on the left.
pub fn sample_initial_pose(gt: &Pose, range: &NoiseRange, seed: u64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = || rng.random_range(-1.0..=1.0);
    let dt = Vector3::new(u(), u(), u()) * range.max_translation;
    let r = range.max_rotation.to_radians();
    let (roll, pitch, yaw) = (u() * r, u() * r, u() * r);
    let dq = UnitQuaternion::from_euler_angles(roll, pitch, yaw);
    Pose::new(dq * gt.rotation(), gt.translation() + dt)
}

/// One refinement step: render at `init`, match, filter, solve.
///
/// The oracle matcher needs `gt_for_oracle`; the external matcher ignores it.
pub fn run_stage(
    cloud: &PointCloud,
    init: &Pose,
    k: &CameraIntrinsics,
    stage: &StageConfig,
    gt_for_oracle: Option<&Pose>,
) -> Result<PnpResult> {
    stage.validate()?;
    let (image, flow) = match &stage.matcher {
        MatcherConfig::Oracle(noise) => {
            let gt = gt_for_oracle.ok_or_else(|| Error::invalid("stage", "the oracle matcher needs a ground-truth pose"))?;
            let (image, gt_flow) = ground_truth_flow(cloud, init, gt, k, &stage.projection)?;
            (image, oracle_match(&gt_flow, noise)?)
        }
        MatcherConfig::External {
            flow_path,
            upscale_factor,
        } => {
            let image = render_lidar_image(cloud, init, k, &stage.projection)?;
            let flow = FlowField::read_flow(BufReader::new(File::open(flow_path)?))?;
            let flow = if *upscale_factor > 1 {
                upscale_flow(&flow, *upscale_factor)?
            } else {
                flow
            };
            (image, flow)
        }
    };
    let flow = filter_by_uncertainty(&flow, stage.keep_quantile)?;
    let corr = to_correspondences(&image, &flow, cloud)?;
    ransac_pnp(&corr, k, &stage.ransac)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Ok,
    /// RANSAC found too few inliers; the stage's input pose was passed on.
    NoConsensus,
    /// Any other error; later stages did not run.
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutcome {
    pub init: Pose,
    /// Estimate after the stage, or `init` when the stage failed.
    pub pose: Pose,
    pub result: Option<PnpResult>,
    pub status: StageStatus,
    pub runtime_ms: f64,
}

/// Chain the stages, each starting from the previous estimate.
///
/// A stage without consensus passes its input pose through and the chain
/// continues; any other error ends the chain after recording the failure.
pub fn iterative_localize(
    cloud: &PointCloud,
    init: &Pose,
    k: &CameraIntrinsics,
    stages: &[StageConfig],
    gt_for_oracle: Option<&Pose>,
) -> Vec<StageOutcome> {
    let mut out = Vec::with_capacity(stages.len());
    let mut current = *init;
    for stage in stages {
        let start = Instant::now();
        let res = run_stage(cloud, &current, k, stage, gt_for_oracle);
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        match res {
            Ok(r) => {
                let pose = r.pose;
                out.push(StageOutcome {
                    init: current,
                    pose,
                    result: Some(r),
                    status: StageStatus::Ok,
                    runtime_ms,
                });
                current = pose;
            }
            Err(Error::NoConsensus { .. }) => out.push(StageOutcome {
                init: current,
                pose: current,
                result: None,
                status: StageStatus::NoConsensus,
                runtime_ms,
            }),
            Err(e) => {
                out.push(StageOutcome {
                    init: current,
                    pose: current,
                    result: None,
                    status: StageStatus::Failed(e.to_string()),
                    runtime_ms,
                });
                break;
            }
        }
    }
    out
}

/// Mean SE(3) error and mean re-calibration rate from raw error magnitudes.
///
/// The rate is `mean(|(eta_i - e_i) / eta_i|)`; note the absolute value makes
/// an estimate with twice the initial error score like a perfect one.
pub fn msee_mrr_from_errors(initial: &[f64], final_errors: &[f64]) -> Result<(f64, f64)> {
    if initial.is_empty() || initial.len() != final_errors.len() {
        return Err(Error::invalid(
            "error arrays",
            format!("need equal nonempty lengths, got {} and {}", initial.len(), final_errors.len()),
        ));
    }
    if let Some(index) = initial.iter().position(|&e| e == 0.0) {
        return Err(Error::ZeroInitialError { index });
    }
    let n = initial.len() as f64;
    let msee = final_errors.iter().sum::<f64>() / n;
    let mrr = initial
        .iter()
        .zip(final_errors)
        .map(|(eta, e)| ((eta - e) / eta).abs())
        .sum::<f64>()
        / n;
    Ok((msee, mrr))
}

/// [`msee_mrr_from_errors`] on (ground truth, estimate) pose pairs, with the
/// error of a pair measured by [`se3_log_norm`].
pub fn msee_mrr(initial: &[(Pose, Pose)], final_pairs: &[(Pose, Pose)]) -> Result<(f64, f64)> {
    let eta: Vec<f64> = initial.iter().map(|(a, b)| se3_log_norm(a, b)).collect();
    let e: Vec<f64> = final_pairs.iter().map(|(a, b)| se3_log_norm(a, b)).collect();
    msee_mrr_from_errors(&eta, &e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationResult {
    pub mean_pose: Pose,
    pub mode_pose: Pose,
    pub median_translation: Vector3<f64>,
    pub frame_count: usize,
}

/// Rounding quanta for the mode: centimeters and 1e-4 quaternion units.
const TRANSLATION_DECIMALS: f64 = 100.0;
const QUATERNION_DECIMALS: f64 = 10_000.0;

/// Mean rotation as the principal eigenvector of `(1/n) Σ q qᵀ`.
pub fn quaternion_mean(rotations: &[UnitQuaternion<f64>]) -> UnitQuaternion<f64> {
    let mut m = Matrix4::<f64>::zeros();
    for q in rotations {
        let v = q.quaternion().coords;
        m += v * v.transpose();
    }
    m /= rotations.len() as f64;
    let eig = m.symmetric_eigen();
    let best = eig.eigenvalues.imax();
    let v: Vector4<f64> = eig.eigenvectors.column(best).into_owned();
    canonical_quaternion(UnitQuaternion::from_quaternion(Quaternion::from(v)))
}

/// Index of the first pose carrying the most frequent key; ties go to the key
/// seen first.
fn mode_index<K: std::hash::Hash + Eq + Copy>(keys: &[K]) -> usize {
    let mut counts: HashMap<K, (usize, usize)> = HashMap::new();
    for (i, k) in keys.iter().enumerate() {
        counts.entry(*k).or_insert((0, i)).0 += 1;
    }
    let (_, first) = counts
        .values()
        .copied()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .expect("nonempty keys");
    first
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Fuse per-frame extrinsic estimates.
///
/// The mode is taken per component after rounding translations to 2 and
/// quaternions to 4 decimals; the value reported for a modal component is the
/// unrounded value of its first occurrence. When the assembled quaternion
/// moves by more than one rounding quantum under renormalization, the most
/// frequent complete rounded quaternion is used instead.
pub fn aggregate_extrinsics(poses: &[Pose]) -> Result<AggregationResult> {
    if poses.is_empty() {
        return Err(Error::invalid("aggregation input", "no poses"));
    }
    let n = poses.len();
    let rotations: Vec<UnitQuaternion<f64>> = poses.iter().map(|p| p.rotation()).collect();
    let mean_t = poses.iter().map(|p| p.translation()).sum::<Vector3<f64>>() / n as f64;
    let mean_pose = Pose::new(quaternion_mean(&rotations), mean_t);

    let mut median_translation = Vector3::zeros();
    let mut mode_t = Vector3::zeros();
    for c in 0..3 {
        let mut vals: Vec<f64> = poses.iter().map(|p| p.translation()[c]).collect();
        let keys: Vec<i64> = vals.iter().map(|v| (v * TRANSLATION_DECIMALS).round() as i64).collect();
        mode_t[c] = vals[mode_index(&keys)];
        median_translation[c] = median(&mut vals);
    }

    let wxyz: Vec<[f64; 4]> = poses.iter().map(|p| p.wxyz()).collect();
    let qkeys: Vec<[i64; 4]> = wxyz
        .iter()
        .map(|q| q.map(|v| (v * QUATERNION_DECIMALS).round() as i64))
        .collect();
    let mut assembled = [0.0; 4];
    for c in 0..4 {
        let keys: Vec<i64> = qkeys.iter().map(|k| k[c]).collect();
        assembled[c] = wxyz[mode_index(&keys)][c];
    }
    let norm = assembled.iter().map(|v| v * v).sum::<f64>().sqrt();
    let per_component_ok = norm > 0.0 && assembled.iter().all(|v| (v / norm - v).abs() <= 1.0 / QUATERNION_DECIMALS);
    let mode_rotation = if per_component_ok {
        let [w, x, y, z] = assembled;
        canonical_quaternion(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
    } else {
        rotations[mode_index(&qkeys)]
    };

    Ok(AggregationResult {
        mean_pose,
        mode_pose: Pose::new(mode_rotation, mode_t),
        median_translation,
        frame_count: n,
    })
}

/// One frame of a calibration sequence: a LiDAR scan in the sensor frame and
/// the stages used to register the camera image against it.
#[derive(Clone, Debug)]
pub struct CalibrationFrame {
    pub cloud: PointCloud,
    pub stages: Vec<StageConfig>,
}

#[derive(Clone, Debug)]
pub struct CalibrationReport {
    pub per_frame: Vec<Vec<StageOutcome>>,
    /// Indices of frames whose chain produced an estimate without a fatal failure.
    pub used_frames: Vec<usize>,
    pub aggregation: AggregationResult,
    /// MSEE and MRR of the per-frame estimates, when the true extrinsic is known.
    pub msee_mrr: Option<(f64, f64)>,
}

/// Estimate the LiDAR-to-camera extrinsic in every frame starting from
/// `init`, then fuse the per-frame estimates.
///
/// Frames that end in a fatal failure or never got a successful stage are
/// left out of the aggregation.
pub fn calibrate_extrinsics(
    frames: &[CalibrationFrame],
    init: &Pose,
    k: &CameraIntrinsics,
    gt: Option<&Pose>,
) -> Result<CalibrationReport> {
    if frames.is_empty() {
        return Err(Error::invalid("calibration input", "no frames"));
    }
    for f in frames {
        validate_stages(&f.stages)?;
    }
    let per_frame: Vec<Vec<StageOutcome>> = frames
        .par_iter()
        .map(|f| iterative_localize(&f.cloud, init, k, &f.stages, gt))
        .collect();
    let used_frames: Vec<usize> = per_frame
        .iter()
        .enumerate()
        .filter(|(_, o)| {
            o.iter().all(|s| !matches!(s.status, StageStatus::Failed(_)))
                && o.iter().any(|s| s.status == StageStatus::Ok)
        })
        .map(|(i, _)| i)
        .collect();
    if used_frames.is_empty() {
        return Err(Error::DegenerateConfiguration("no calibration frame produced an estimate"));
    }
    let estimates: Vec<Pose> = used_frames
        .iter()
        .map(|&i| per_frame[i].last().expect("nonempty stages").pose)
        .collect();
    let aggregation = aggregate_extrinsics(&estimates)?;
    let msee_mrr = match gt {
        Some(gt) => {
            let initial = vec![(*gt, *init); estimates.len()];
            let finals: Vec<(Pose, Pose)> = estimates.iter().map(|e| (*gt, *e)).collect();
            Some(msee_mrr(&initial, &finals)?)
        }
        None => None,
    };
    Ok(CalibrationReport {
        per_frame,
        used_frames,
        aggregation,
        msee_mrr,
    })
}

/// Row-major 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::invalid(
                "rgb image",
                format!("{} pixels for a {width}x{height} image", pixels.len()),
            ));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [u8; 3]) -> Self {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        self.pixels[y as usize * self.width as usize + x as usize]
    }

    /// Bilinear sample with pixel centers at integer coordinates, clamped at
    /// the border.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> [u8; 3] {
        let maxx = (self.width - 1) as f64;
        let maxy = (self.height - 1) as f64;
        let u = u.clamp(0.0, maxx);
        let v = v.clamp(0.0, maxy);
        let x0 = u.floor();
        let y0 = v.floor();
        let (fx, fy) = (u - x0, v - y0);
        let x1 = (x0 + 1.0).min(maxx);
        let y1 = (y0 + 1.0).min(maxy);
        let px = |x: f64, y: f64| self.get(x as u32, y as u32);
        let (a, b, c, d) = (px(x0, y0), px(x1, y0), px(x0, y1), px(x1, y1));
        std::array::from_fn(|ch| {
            let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
            let bottom = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
            (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8
        })
    }
}

/// A camera frame used for colorization.
#[derive(Clone, Debug)]
pub struct ColorFrame {
    pub image: RgbImage,
    /// Map-to-camera pose of the frame.
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Clone, Debug)]
pub struct ColorizedMap {
    /// Input geometry with colors; uncolored points are black.
    pub cloud: PointCloud,
    /// Whether each point received a color.
    pub colored: Vec<bool>,
}

/// Projection settings for colorization: occlusion filtering with large cosine
/// sums read as obstruction.
pub fn colorize_projection() -> ProjectionConfig {
    ProjectionConfig {
        occlusion: Some(OcclusionConfig::obstruction()),
        ..ProjectionConfig::default()
    }
}

/// Color map points from camera frames.
///
/// A point can take its color from any frame in which it survives the
/// z-buffer and the occlusion filter of `projection`. Among those, the frame
/// closest in time to the point's timestamp is used; without point
/// timestamps the earliest such frame in input order wins. Colors are
/// bilinear samples at the point's sub-pixel projection.
pub fn colorize_map(
    cloud: &PointCloud,
    frames: &[ColorFrame],
    k: &CameraIntrinsics,
    projection: &ProjectionConfig,
    point_times: Option<&[f64]>,
) -> Result<ColorizedMap> {
    if frames.is_empty() {
        return Err(Error::invalid("colorize input", "no frames"));
    }
    if let Some(t) = point_times {
        if t.len() != cloud.len() {
            return Err(Error::invalid(
                "colorize input",
                format!("{} timestamps for {} points", t.len(), cloud.len()),
            ));
        }
    }
    let expected = (k.width as usize, k.height as usize);
    let mut best: Vec<Option<(f64, usize)>> = vec![None; cloud.len()];
    for (fi, frame) in frames.iter().enumerate() {
        let found = (frame.image.width as usize, frame.image.height as usize);
        if found != expected {
            return Err(Error::DimensionMismatch { expected, found });
        }
        let visible = match render_lidar_image(cloud, &frame.pose, k, projection) {
            Ok(img) => img.visible_indices(),
            Err(Error::EmptyProjection) => continue,
            Err(e) => return Err(e),
        };
        for idx in visible {
            let i = idx as usize;
            let dt = point_times.map_or(0.0, |t| (t[i] - frame.timestamp).abs());
            if best[i].is_none_or(|(d, _)| dt < d) {
                best[i] = Some((dt, fi));
            }
        }
    }
    let colors: Vec<Option<[u8; 3]>> = best
        .par_iter()
        .zip(cloud.points.par_iter())
        .map(|(b, p)| {
            let (_, fi) = (*b)?;
            let frame = &frames[fi];
            let (u, v, _) = k.project(&frame.pose.transform_point(p)).ok()?;
            Some(frame.image.sample_bilinear(u, v))
        })
        .collect();
    let mut out = cloud.clone();
    out.colors = Some(colors.iter().map(|c| c.unwrap_or([0, 0, 0])).collect());
    Ok(ColorizedMap {
        cloud: out,
        colored: colors.iter().map(Option::is_some).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub stages: Vec<StageConfig>,
    pub seeds: Vec<u64>,
    /// Record wall-clock runtimes; when false `runtime_ms` is written as 0 so
    /// reruns produce identical reports.
    pub record_timing: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            stages: StageConfig::standard_stages(),
            seeds: (0..50).collect(),
            record_timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameRecord {
    pub record: &'static str,
    pub seed: u64,
    /// 1-based stage number.
    pub stage: usize,
    #[serde(rename = "E_t")]
    pub e_t: f64,
    #[serde(rename = "E_r")]
    pub e_r: f64,
    pub inliers: usize,
    pub runtime_ms: f64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchmarkSummary {
    pub record: &'static str,
    pub frames: usize,
    pub stages: usize,
    /// Median errors after each stage.
    pub median_e_t: Vec<f64>,
    pub median_e_r: Vec<f64>,
    pub initial_median_e_t: f64,
    pub initial_median_e_r: f64,
    #[serde(rename = "MSEE")]
    pub msee: Option<f64>,
    #[serde(rename = "MRR")]
    pub mrr: Option<f64>,
    pub failures: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub frames: Vec<FrameRecord>,
    pub summary: BenchmarkSummary,
}

impl BenchmarkReport {
    /// Records for one stage, in seed order.
    pub fn stage_records(&self, stage: usize) -> impl Iterator<Item = &FrameRecord> {
        self.frames.iter().filter(move |r| r.stage == stage)
    }

    /// Newline-delimited JSON: one record per frame and stage, then the summary.
    pub fn write_json_lines<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.frames {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut w, &self.summary).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_json_lines(&self) -> String {
        let mut buf = Vec::new();
        self.write_json_lines(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }
}

/// Seeded Monte-Carlo run of the staged pipeline.
///
/// Each seed draws an initial pose from the first stage's range and derives
/// the per-stage oracle and RANSAC seeds. Frames run in parallel; records
/// come out in seed order. Stages not reached after a fatal failure are
/// reported as `skipped` with the last pose.
pub fn run_benchmark(
    cloud: &PointCloud,
    gt: &Pose,
    k: &CameraIntrinsics,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    validate_stages(&cfg.stages)?;
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("benchmark config", "no seeds"));
    }
    let n_stages = cfg.stages.len();
    let frames: Vec<(Pose, Vec<FrameRecord>, Pose)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let init = sample_initial_pose(gt, &cfg.stages[0].noise_range, seed);
            let stages: Vec<StageConfig> =
                cfg.stages.iter().enumerate().map(|(i, s)| s.reseeded(seed, i)).collect();
            let outcomes = iterative_localize(cloud, &init, k, &stages, Some(gt));
            let mut records = Vec::with_capacity(n_stages);
            let mut last = init;
            for i in 0..n_stages {
                let (pose, inliers, runtime_ms, status) = match outcomes.get(i) {
                    Some(o) => {
                        let status = match &o.status {
                            StageStatus::Ok => "ok",
                            StageStatus::NoConsensus => "no-consensus",
                            StageStatus::Failed(_) => "failed",
                        };
                        let inliers = o.result.as_ref().map_or(0, |r| r.inlier_indices.len());
                        (o.pose, inliers, o.runtime_ms, status)
                    }
                    None => (last, 0, 0.0, "skipped"),
                };
                last = pose;
                let (e_t, e_r) = pose_errors(gt, &pose);
                records.push(FrameRecord {
                    record: "frame",
                    seed,
                    stage: i + 1,
                    e_t,
                    e_r,
                    inliers,
                    runtime_ms: if cfg.record_timing { runtime_ms } else { 0.0 },
                    status: status.to_string(),
                });
            }
            (init, records, last)
        })
        .collect();

    let mut median_e_t = Vec::with_capacity(n_stages);
    let mut median_e_r = Vec::with_capacity(n_stages);
    for s in 0..n_stages {
        let mut et: Vec<f64> = frames.iter().map(|f| f.1[s].e_t).collect();
        let mut er: Vec<f64> = frames.iter().map(|f| f.1[s].e_r).collect();
        median_e_t.push(median(&mut et));
        median_e_r.push(median(&mut er));
    }
    let mut init_t: Vec<f64> = frames.iter().map(|f| pose_errors(gt, &f.0).0).collect();
    let mut init_r: Vec<f64> = frames.iter().map(|f| pose_errors(gt, &f.0).1).collect();
    let initial: Vec<(Pose, Pose)> = frames.iter().map(|f| (*gt, f.0)).collect();
    let finals: Vec<(Pose, Pose)> = frames.iter().map(|f| (*gt, f.2)).collect();
    let (msee, mrr) = match msee_mrr(&initial, &finals) {
        Ok((a, b)) => (Some(a), Some(b)),
        Err(_) => (None, None),
    };
    let failures = frames
        .iter()
        .filter(|f| f.1.iter().any(|r| r.status != "ok"))
        .count();
    let summary = BenchmarkSummary {
        record: "summary",
        frames: frames.len(),
        stages: n_stages,
        median_e_t,
        median_e_r,
        initial_median_e_t: median(&mut init_t),
        initial_median_e_r: median(&mut init_r),
        msee,
        mrr,
        failures,
    };
    Ok(BenchmarkReport {
        frames: frames.into_iter().flat_map(|f| f.1).collect(),
        summary,
    })
}
