//! Flow fields between a LiDAR-image and a camera image, and their conversion
//! into 2D-3D correspondences.
//!
//! A flow field stores, for every pixel of the LiDAR-image rendered at the
//! initial pose, the displacement to the pixel where the same map point
//! appears in the camera image, plus a per-axis uncertainty. The trained
//! matcher that would normally predict it is replaced here by
//! [`ground_truth_flow`] and the noisy [`oracle_match`].

use std::io::{Read, Write};

use nalgebra::{Point2, Point3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, Pose};
use crate::projection::{render_lidar_image, LidarImage, ProjectionConfig};

const FLOW_MAGIC: &[u8; 4] = b"FLOW";

/// Per-pixel displacement `(du, dv)` with uncertainties `(sigma_u, sigma_v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    width: u32,
    height: u32,
    pub du: Vec<f64>,
    pub dv: Vec<f64>,
    pub sigma_u: Vec<f64>,
    pub sigma_v: Vec<f64>,
    pub valid: Vec<u8>,
}

impl FlowField {
    pub fn zeros(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            du: vec![0.0; n],
            dv: vec![0.0; n],
            sigma_u: vec![1.0; n],
            sigma_v: vec![1.0; n],
            valid: vec![0; n],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width as usize, self.height as usize)
    }

    pub fn is_valid(&self, flat: usize) -> bool {
        self.valid[flat] != 0
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v != 0).count()
    }

    pub fn valid_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.valid.len()).filter(move |&i| self.valid[i] != 0)
    }

    fn invalidate(&mut self, flat: usize) {
        self.valid[flat] = 0;
    }

    /// Serialize as `FLOW`: magic, u32 width, u32 height, four f32 grids
    /// (du, dv, sigma_u, sigma_v) and one u8 valid grid, little-endian, row-major.
    pub fn write_flow<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.du.len() * 17);
        for grid in [&self.du, &self.dv, &self.sigma_u, &self.sigma_v] {
            for v in grid {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&self.valid);
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_flow<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        if &header[..4] != FLOW_MAGIC {
            return Err(Error::parse("FLOW", "bad magic"));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let n = width as usize * height as usize;
        let mut body = vec![0u8; n * 17];
        r.read_exact(&mut body)?;
        let grid = |k: usize| -> Vec<f64> {
            body[4 * k * n..4 * (k + 1) * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect()
        };
        let flow = Self {
            width,
            height,
            du: grid(0),
            dv: grid(1),
            sigma_u: grid(2),
            sigma_v: grid(3),
            valid: body[16 * n..].iter().map(|v| u8::from(*v != 0)).collect(),
        };
        for i in flow.valid_pixels() {
            let ok = flow.du[i].is_finite()
                && flow.dv[i].is_finite()
                && flow.sigma_u[i] > 0.0
                && flow.sigma_v[i] > 0.0;
            if !ok {
                return Err(Error::parse("FLOW", format!("pixel {i}: non-finite flow or non-positive sigma")));
            }
        }
        Ok(flow)
    }
}

/// Paired map points and image pixels with per-pair weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub points3d: Vec<Point3<f64>>,
    pub pixels: Vec<Point2<f64>>,
    pub weights: Vec<f64>,
}

impl CorrespondenceSet {
    pub fn new(points3d: Vec<Point3<f64>>, pixels: Vec<Point2<f64>>) -> Self {
        let weights = vec![1.0; points3d.len()];
        assert_eq!(points3d.len(), pixels.len(), "points and pixels must pair up");
        Self {
            points3d,
            pixels,
            weights,
        }
    }

    pub fn push(&mut self, point: Point3<f64>, pixel: Point2<f64>, weight: f64) {
        self.points3d.push(point);
        self.pixels.push(pixel);
        self.weights.push(weight);
    }

    pub fn len(&self) -> usize {
        self.points3d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points3d.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            points3d: indices.iter().map(|&i| self.points3d[i]).collect(),
            pixels: indices.iter().map(|&i| self.pixels[i]).collect(),
            weights: indices.iter().map(|&i| self.weights[i]).collect(),
        }
    }
}

/// Render the LiDAR-image at `init` and compute, for every kept point, the
/// displacement from its projection at `init` to its projection at `gt`.
///
/// Sigma channels are set to 1. Pixels whose point falls behind the camera at
/// `gt` are left invalid; projections that land outside the image are kept.
pub fn ground_truth_flow(
    cloud: &PointCloud,
    init: &Pose,
    gt: &Pose,
    k: &CameraIntrinsics,
    cfg: &ProjectionConfig,
) -> Result<(LidarImage, FlowField)> {
    let image = render_lidar_image(cloud, init, k, cfg)?;
    let mut flow = FlowField::zeros(image.width(), image.height());
    for flat in image.valid_pixels() {
        let p = &cloud.points[image.source_index()[flat] as usize];
        let Ok((u_gt, v_gt, _)) = k.project(&gt.transform_point(p)) else {
            continue;
        };
        let [u, v] = image.subpixel()[flat];
        flow.du[flat] = u_gt - u;
        flow.dv[flat] = v_gt - v;
        flow.valid[flat] = 1;
    }
    Ok((image, flow))
}

/// Noise model of the synthetic matcher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoiseConfig {
    /// Per-axis Gaussian noise on inlier displacements, pixels.
    pub gaussian_sigma: f64,
    /// Fraction of valid pixels whose displacement is replaced by a random one.
    pub outlier_fraction: f64,
    /// Outlier displacements are uniform in `[-outlier_range, outlier_range]`, pixels.
    pub outlier_range: f64,
    pub rng_seed: u64,
    /// Report unit sigmas everywhere instead of the inlier/outlier sigma model.
    pub blind: bool,
}

impl Default for OracleNoiseConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_range: 100.0,
            rng_seed: 0,
            blind: false,
        }
    }
}

impl OracleNoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) {
            return Err(Error::invalid("oracle noise", "gaussian_sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::invalid("oracle noise", "outlier_fraction must lie in [0, 1]"));
        }
        if !(self.outlier_range > 0.0) {
            return Err(Error::invalid("oracle noise", "outlier_range must be positive"));
        }
        Ok(())
    }
}

/// Corrupt a ground-truth flow the way an imperfect matcher would.
///
/// A seeded subset of `round(outlier_fraction * n)` valid pixels receives
/// uniform random displacements and large sigmas (uniform in
/// `[5 * gaussian_sigma + 1, outlier_range]`); the rest get Gaussian noise and
/// sigma `max(gaussian_sigma, 0.1)`. Output is a pure function of the input and seed.
pub fn oracle_match(gt_flow: &FlowField, noise: &OracleNoiseConfig) -> Result<FlowField> {
    noise.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
    let valid: Vec<usize> = gt_flow.valid_pixels().collect();
    let n = valid.len();
    let n_out = ((noise.outlier_fraction * n as f64).round() as usize).min(n);
    let mut is_outlier = vec![false; n];
    for i in index::sample(&mut rng, n, n_out) {
        is_outlier[i] = true;
    }

    let gauss = Normal::new(0.0, noise.gaussian_sigma).expect("sigma validated");
    let inlier_sigma = noise.gaussian_sigma.max(0.1);
    let (sig_lo, sig_hi) = {
        let lo = 5.0 * noise.gaussian_sigma + 1.0;
        (lo, noise.outlier_range.max(lo))
    };
    let range = noise.outlier_range;

    let mut out = gt_flow.clone();
    for (j, &flat) in valid.iter().enumerate() {
        if is_outlier[j] {
            out.du[flat] = rng.random_range(-range..=range);
            out.dv[flat] = rng.random_range(-range..=range);
            out.sigma_u[flat] = rng.random_range(sig_lo..=sig_hi);
            out.sigma_v[flat] = rng.random_range(sig_lo..=sig_hi);
        } else {
            if noise.gaussian_sigma > 0.0 {
                out.du[flat] += gauss.sample(&mut rng);
                out.dv[flat] += gauss.sample(&mut rng);
            }
            out.sigma_u[flat] = inlier_sigma;
            out.sigma_v[flat] = inlier_sigma;
        }
        if noise.blind {
            out.sigma_u[flat] = 1.0;
            out.sigma_v[flat] = 1.0;
        }
    }
    if noise.gaussian_sigma == 0.0 && n_out == 0 && !noise.blind {
        // noiseless oracle passes the sigma channels through as well
        out.sigma_u.clone_from(&gt_flow.sigma_u);
        out.sigma_v.clone_from(&gt_flow.sigma_v);
    }
    Ok(out)
}

/// Keep the `ceil(keep_quantile * n)` valid pixels with the smallest
/// `sigma_u + sigma_v`; ties are resolved by lower flat index.
pub fn filter_by_uncertainty(flow: &FlowField, keep_quantile: f64) -> Result<FlowField> {
    if !(keep_quantile > 0.0 && keep_quantile <= 1.0) {
        return Err(Error::invalid("keep_quantile", format!("{keep_quantile} outside (0, 1]")));
    }
    if keep_quantile == 1.0 {
        return Ok(flow.clone());
    }
    let mut ranked: Vec<(f64, usize)> = flow
        .valid_pixels()
        .map(|i| (flow.sigma_u[i] + flow.sigma_v[i], i))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = ((keep_quantile * ranked.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut out = flow.clone();
    for &(_, flat) in &ranked[keep.min(ranked.len())..] {
        out.invalidate(flat);
    }
    Ok(out)
}

/// Pair each valid pixel's map point with its matched image pixel
/// `p = (u_init, v_init) + (du, dv)`, weighted by `1 / (sigma_u + sigma_v)`.
pub fn to_correspondences(image: &LidarImage, flow: &FlowField, cloud: &PointCloud) -> Result<CorrespondenceSet> {
    if image.dims() != flow.dims() {
        return Err(Error::DimensionMismatch {
            expected: image.dims(),
            found: flow.dims(),
        });
    }
    let mut set = CorrespondenceSet::default();
    for flat in image.valid_pixels() {
        if !flow.is_valid(flat) {
            continue;
        }
        let idx = image.source_index()[flat] as usize;
        let point = *cloud.points.get(idx).ok_or_else(|| {
            Error::invalid("lidar image", format!("source index {idx} outside cloud of {}", cloud.len()))
        })?;
        let [u, v] = image.subpixel()[flat];
        set.push(
            point,
            Point2::new(u + flow.du[flat], v + flow.dv[flat]),
            1.0 / (flow.sigma_u[flat] + flow.sigma_v[flat]),
        );
    }
    Ok(set)
}

/// Nearest-neighbor upsampling of a flow predicted at reduced resolution.
/// Displacements and sigmas are multiplied by `factor`; invalid source pixels
/// stay invalid.
pub fn upscale_flow(flow: &FlowField, factor: u32) -> Result<FlowField> {
    if factor == 0 {
        return Err(Error::invalid("upscale factor", "must be >= 1"));
    }
    if factor == 1 {
        return Ok(flow.clone());
    }
    let (w, h) = (flow.width * factor, flow.height * factor);
    let f = factor as f64;
    let mut out = FlowField::zeros(w, h);
    for y in 0..h as usize {
        let sy = y / factor as usize;
        for x in 0..w as usize {
            let src = sy * flow.width as usize + x / factor as usize;
            let dst = y * w as usize + x;
            out.du[dst] = flow.du[src] * f;
            out.dv[dst] = flow.dv[src] * f;
            out.sigma_u[dst] = flow.sigma_u[src] * f;
            out.sigma_v[dst] = flow.sigma_v[src] * f;
            out.valid[dst] = flow.valid[src];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{UnitQuaternion, Vector3};
    use proptest::prelude::*;
    use rand::Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(300.0, 280.0, 160.2, 120.7, 320, 240).unwrap()
    }

    /// Wall plus floor in front of the camera, deterministic.
    fn scene() -> PointCloud {
        let mut pts = Vec::new();
        for i in 0..60 {
            for j in 0..40 {
                pts.push(Point3::new(-6.0 + 0.2 * i as f64, -4.0 + 0.2 * j as f64, 15.0 + 0.05 * i as f64));
                pts.push(Point3::new(-6.0 + 0.2 * i as f64, 1.5, 4.0 + 0.25 * j as f64));
            }
        }
        PointCloud::new(pts)
    }

    fn random_pose(rng: &mut ChaCha8Rng, t: f64, r: f64) -> Pose {
        Pose::new(
            UnitQuaternion::from_euler_angles(
                rng.random_range(-r..r),
                rng.random_range(-r..r),
                rng.random_range(-r..r),
            ),
            Vector3::new(rng.random_range(-t..t), rng.random_range(-t..t), rng.random_range(-t..t)),
        )
    }

    #[test]
    fn identical_poses_give_zero_flow() {
        let p = Pose::new(UnitQuaternion::from_euler_angles(0.01, -0.02, 0.03), Vector3::new(0.1, 0.0, -0.2));
        let (img, flow) = ground_truth_flow(&scene(), &p, &p, &k(), &ProjectionConfig::default()).unwrap();
        assert!(img.valid_count() > 100);
        assert_eq!(flow.valid_count(), img.valid_count());
        for i in flow.valid_pixels() {
            assert_eq!((flow.du[i], flow.dv[i]), (0.0, 0.0));
            assert_eq!((flow.sigma_u[i], flow.sigma_v[i]), (1.0, 1.0));
        }
    }

    #[test]
    fn camera_shift_closed_form() {
        let d = 12.0;
        let cloud = PointCloud::new(vec![Point3::new(0.4, -0.3, d)]);
        let init = Pose::identity();
        let (dx, dy) = (0.25, -0.1);
        // camera moves by (dx, dy, 0): points move by the opposite amount in camera coordinates
        let gt = Pose::from_translation(Vector3::new(-dx, -dy, 0.0)).compose(&init);
        let (img, flow) = ground_truth_flow(&cloud, &init, &gt, &k(), &ProjectionConfig::default()).unwrap();
        let flat = img.valid_pixels().next().unwrap();
        let kk = k();
        assert!((flow.du[flat] - (-kk.fx * dx / d)).abs() < 0.01);
        assert!((flow.dv[flat] - (-kk.fy * dy / d)).abs() < 0.01);
    }

    #[test]
    fn flow_lands_on_gt_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cloud = scene();
        let kk = k();
        for _ in 0..10 {
            let init = random_pose(&mut rng, 0.5, 0.05);
            let gt = random_pose(&mut rng, 0.5, 0.05);
            let (img, flow) = ground_truth_flow(&cloud, &init, &gt, &kk, &ProjectionConfig::default()).unwrap();
            for flat in flow.valid_pixels() {
                let p = cloud.points[img.source_index()[flat] as usize];
                let (u, v, _) = kk.project(&gt.transform_point(&p)).unwrap();
                let [ui, vi] = img.subpixel()[flat];
                assert!((ui + flow.du[flat] - u).abs() < 1e-9);
                assert!((vi + flow.dv[flat] - v).abs() < 1e-9);
            }
        }
    }

    fn synthetic_flow(n_side: u32) -> FlowField {
        let mut f = FlowField::zeros(n_side, n_side);
        for i in 0..f.valid.len() {
            let (x, y) = ((i % n_side as usize) as f64, (i / n_side as usize) as f64);
            f.du[i] = 0.3 * x - 0.1 * y + (0.7 * x).sin() * 4.0;
            f.dv[i] = -0.2 * y + (0.3 * y).cos() * 5.0;
            f.valid[i] = 1;
        }
        f
    }

    #[test]
    fn noiseless_oracle_is_identity() {
        let f = synthetic_flow(50);
        let out = oracle_match(&f, &OracleNoiseConfig::default()).unwrap();
        assert_eq!(out, f);
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        for (rank, i) in idx.into_iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }

    fn spearman(a: &[f64], b: &[f64]) -> f64 {
        let (ra, rb) = (ranks(a), ranks(b));
        let n = a.len() as f64;
        let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
        let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn all_outlier_oracle_is_uncorrelated() {
        let f = synthetic_flow(100);
        let cfg = OracleNoiseConfig {
            outlier_fraction: 1.0,
            outlier_range: 50.0,
            rng_seed: 11,
            ..Default::default()
        };
        let out = oracle_match(&f, &cfg).unwrap();
        assert_eq!(out.valid_count(), 10_000);
        assert!(spearman(&f.du, &out.du).abs() < 0.1);
        assert!(spearman(&f.dv, &out.dv).abs() < 0.1);
        for i in 0..out.du.len() {
            assert!(out.sigma_u[i] >= 1.0 && out.sigma_u[i] <= 50.0);
        }
    }

    #[test]
    fn gaussian_noise_has_requested_std() {
        let f = synthetic_flow(100);
        let cfg = OracleNoiseConfig {
            gaussian_sigma: 1.0,
            rng_seed: 5,
            ..Default::default()
        };
        let out = oracle_match(&f, &cfg).unwrap();
        for (noisy, clean) in [(&out.du, &f.du), (&out.dv, &f.dv)] {
            let e: Vec<f64> = noisy.iter().zip(clean).map(|(a, b)| a - b).collect();
            let n = e.len() as f64;
            let mean = e.iter().sum::<f64>() / n;
            let std = (e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((0.97..=1.03).contains(&std), "{std}");
        }
        assert!(out.sigma_u.iter().all(|s| *s == 1.0));
    }

    #[test]
    fn oracle_is_reproducible_and_blind_mode() {
        let f = synthetic_flow(40);
        let cfg = OracleNoiseConfig {
            gaussian_sigma: 2.0,
            outlier_fraction: 0.3,
            outlier_range: 80.0,
            rng_seed: 99,
            blind: false,
        };
        assert_eq!(oracle_match(&f, &cfg).unwrap(), oracle_match(&f, &cfg).unwrap());
        let blind = oracle_match(&f, &OracleNoiseConfig { blind: true, ..cfg }).unwrap();
        assert!(blind.sigma_u.iter().chain(&blind.sigma_v).all(|s| *s == 1.0));
        let other = oracle_match(&f, &OracleNoiseConfig { rng_seed: 100, ..cfg }).unwrap();
        assert_ne!(other.du, oracle_match(&f, &cfg).unwrap().du);
    }

    #[test]
    fn oracle_rejects_bad_config() {
        let f = synthetic_flow(4);
        for cfg in [
            OracleNoiseConfig { gaussian_sigma: -1.0, ..Default::default() },
            OracleNoiseConfig { outlier_fraction: 1.5, ..Default::default() },
            OracleNoiseConfig { outlier_range: 0.0, ..Default::default() },
        ] {
            assert!(oracle_match(&f, &cfg).is_err());
        }
    }

    #[test]
    fn filter_keep_all_is_identity() {
        let f = synthetic_flow(20);
        assert_eq!(filter_by_uncertainty(&f, 1.0).unwrap(), f);
        assert!(filter_by_uncertainty(&f, 0.0).is_err());
        assert!(filter_by_uncertainty(&f, 1.2).is_err());
    }

    #[test]
    fn filter_ties_keep_lowest_index() {
        let mut f = synthetic_flow(5);
        f.valid[3] = 0;
        let n = f.valid_count();
        assert_eq!(n, 24);
        let out = filter_by_uncertainty(&f, 0.5).unwrap();
        assert_eq!(out.valid_count(), n.div_ceil(2));
        let kept: Vec<usize> = out.valid_pixels().collect();
        let expected: Vec<usize> = f.valid_pixels().take(12).collect();
        assert_eq!(kept, expected);

        let mut odd = synthetic_flow(5);
        odd.valid[0] = 0;
        odd.valid[1] = 0;
        let out = filter_by_uncertainty(&odd, 0.5).unwrap();
        assert_eq!(out.valid_count(), 12); // ceil(23 / 2)
    }

    #[test]
    fn filter_prefers_inliers_when_outlier_sigmas_are_inflated() {
        let f = synthetic_flow(100);
        let cfg = OracleNoiseConfig {
            gaussian_sigma: 1.0,
            outlier_fraction: 0.2,
            outlier_range: 60.0,
            rng_seed: 21,
            blind: false,
        };
        let noisy = oracle_match(&f, &cfg).unwrap();
        let kept = filter_by_uncertainty(&noisy, 0.8).unwrap();
        // inliers carry sigma exactly max(gaussian_sigma, 0.1)
        let survivors: Vec<usize> = kept.valid_pixels().collect();
        let inliers = survivors.iter().filter(|&&i| noisy.sigma_u[i] == 1.0).count();
        assert!(inliers as f64 >= 0.95 * survivors.len() as f64);
    }

    #[test]
    fn correspondences_from_zero_flow() {
        let cloud = scene();
        let p = Pose::identity();
        let (img, mut flow) = ground_truth_flow(&cloud, &p, &p, &k(), &ProjectionConfig::default()).unwrap();
        flow.sigma_u.iter_mut().for_each(|s| *s = 0.5);
        let set = to_correspondences(&img, &flow, &cloud).unwrap();
        assert_eq!(set.len(), img.valid_count());
        for ((pix, q), (flat, w)) in set
            .pixels
            .iter()
            .zip(&set.points3d)
            .zip(img.valid_pixels().zip(&set.weights))
        {
            let [u, v] = img.subpixel()[flat];
            assert_eq!((pix.x, pix.y), (u, v));
            assert_eq!(*q, cloud.points[img.source_index()[flat] as usize]);
            assert_eq!(*w, 1.0 / 1.5);
        }
    }

    #[test]
    fn correspondences_reproject_at_gt() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cloud = scene();
        let kk = k();
        let init = random_pose(&mut rng, 0.4, 0.04);
        let gt = random_pose(&mut rng, 0.4, 0.04);
        let (img, flow) = ground_truth_flow(&cloud, &init, &gt, &kk, &ProjectionConfig::default()).unwrap();
        let set = to_correspondences(&img, &flow, &cloud).unwrap();
        assert!(!set.is_empty());
        for (q, p) in set.points3d.iter().zip(&set.pixels) {
            let (u, v, _) = kk.project(&gt.transform_point(q)).unwrap();
            assert!((u - p.x).abs() < 1e-9 && (v - p.y).abs() < 1e-9);
        }
    }

    #[test]
    fn correspondences_edge_cases() {
        let cloud = scene();
        let img = LidarImage::empty(320, 240);
        let flow = FlowField::zeros(320, 240);
        assert!(to_correspondences(&img, &flow, &cloud).unwrap().is_empty());
        let wrong = FlowField::zeros(10, 10);
        assert!(matches!(
            to_correspondences(&img, &wrong, &cloud),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn upscale_examples() {
        let f = synthetic_flow(6);
        assert_eq!(upscale_flow(&f, 1).unwrap(), f);
        let mut single = FlowField::zeros(4, 3);
        let src = 4 + 2; // (x=2, y=1)
        single.du[src] = 3.0;
        single.dv[src] = -1.0;
        single.sigma_u[src] = 0.5;
        single.valid[src] = 1;
        let up = upscale_flow(&single, 2).unwrap();
        assert_eq!((up.width(), up.height()), (8, 6));
        assert_eq!(up.valid_count(), 4);
        for (x, y) in [(4, 2), (5, 2), (4, 3), (5, 3)] {
            let i = y * 8 + x;
            assert_eq!((up.du[i], up.dv[i], up.sigma_u[i], up.valid[i]), (6.0, -2.0, 1.0, 1));
        }
        assert!(upscale_flow(&single, 0).is_err());
    }

    #[test]
    fn upscaled_half_resolution_flow_tracks_full_resolution() {
        // Dense smooth scene: a slanted wall.
        let mut pts = Vec::new();
        for i in 0..400 {
            for j in 0..300 {
                let x = -8.0 + 0.04 * i as f64;
                let y = -6.0 + 0.04 * j as f64;
                pts.push(Point3::new(x, y, 20.0 + 0.3 * x));
            }
        }
        let cloud = PointCloud::new(pts);
        let kk = k();
        let half = kk.scaled(0.5).unwrap();
        let init = Pose::identity();
        let gt = Pose::new(UnitQuaternion::from_euler_angles(0.01, -0.015, 0.02), Vector3::new(0.3, -0.2, 0.5));
        let cfg = ProjectionConfig::default();
        let (full_img, full) = ground_truth_flow(&cloud, &init, &gt, &kk, &cfg).unwrap();
        let (_, low) = ground_truth_flow(&cloud, &init, &gt, &half, &cfg).unwrap();
        let up = upscale_flow(&low, 2).unwrap();
        assert_eq!(up.dims(), full.dims());
        let mut errs: Vec<f64> = full_img
            .valid_pixels()
            .filter(|&i| full.is_valid(i) && up.is_valid(i))
            .map(|i| ((full.du[i] - up.du[i]).powi(2) + (full.dv[i] - up.dv[i]).powi(2)).sqrt())
            .collect();
        assert!(errs.len() > 10_000);
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        assert!(median < 1.0, "median {median}");
    }

    #[test]
    fn flow_round_trip() {
        let mut f = synthetic_flow(7);
        f.valid[5] = 0;
        let mut buf = Vec::new();
        f.write_flow(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 49 * 17);
        let back = FlowField::read_flow(buf.as_slice()).unwrap();
        assert_eq!(back.valid, f.valid);
        for i in 0..49 {
            assert_eq!(back.du[i], f.du[i] as f32 as f64);
        }
        assert!(FlowField::read_flow(&buf[..20]).is_err());
    }

    proptest! {
        #[test]
        fn filter_never_grows(q in 0.01..1.0f64, seed in 0u64..1000) {
            let f = synthetic_flow(12);
            let noisy = oracle_match(&f, &OracleNoiseConfig {
                gaussian_sigma: 1.0, outlier_fraction: 0.3, outlier_range: 40.0, rng_seed: seed, blind: false,
            }).unwrap();
            let once = filter_by_uncertainty(&noisy, q).unwrap();
            prop_assert!(once.valid_count() <= noisy.valid_count());
            let twice = filter_by_uncertainty(&once, q).unwrap();
            prop_assert!(twice.valid_count() <= once.valid_count());
            for i in once.valid_pixels() {
                prop_assert!(noisy.is_valid(i));
            }
        }
    }
}
