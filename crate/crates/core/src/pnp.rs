//! Camera pose from 2D-3D correspondences.
//!
//! [`epnp`] is the closed-form EPnP solver: world points are written as
//! barycentric combinations of four control points (three for planar
//! scenes), the camera-frame control points are recovered from the null
//! space of the projection constraints, and the null-space coefficients are
//! polished with Gauss-Newton on the control-point distances. [`ransac_pnp`]
//! wraps it in a seeded RANSAC loop whose hypotheses are scored in parallel,
//! and [`lm_refine`] minimizes the weighted reprojection error on SE(3).

use nalgebra::{
    DMatrix, DVector, Matrix2x6, Matrix3, Matrix4, Matrix6, Point2, Point3, SymmetricEigen, Vector3, Vector4, Vector6,
};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correspondence::CorrespondenceSet;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose, MIN_DEPTH};

/// Relative spread below which a point set counts as collinear (or a single point).
const COLLINEAR_RATIO: f64 = 1e-6;
/// Relative thickness below which a point set is solved with the planar variant.
const PLANAR_RATIO: f64 = 1e-4;
const GAUSS_NEWTON_ITERATIONS: usize = 50;
const POLISH_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Number of minimal samples drawn.
    pub iterations: usize,
    /// Inlier threshold on the reprojection error, pixels.
    pub reproj_threshold: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
    /// Run Levenberg-Marquardt on the final inlier set.
    pub refine_with_lm: bool,
    pub lm_max_iterations: usize,
    /// Stop sampling once this confidence of having drawn an all-inlier sample
    /// is reached. Hypotheses are evaluated in fixed blocks, so results stay
    /// deterministic. `None` always draws `iterations` samples.
    pub early_exit_confidence: Option<f64>,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            reproj_threshold: 2.0,
            min_inliers: 6,
            rng_seed: 0,
            refine_with_lm: false,
            lm_max_iterations: 50,
            early_exit_confidence: None,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("ransac config", "iterations must be >= 1"));
        }
        if !(self.reproj_threshold > 0.0) {
            return Err(Error::invalid("ransac config", "reproj_threshold must be positive"));
        }
        if self.min_inliers < 4 {
            return Err(Error::invalid("ransac config", "min_inliers must be >= 4"));
        }
        if let Some(c) = self.early_exit_confidence {
            if !(c > 0.0 && c < 1.0) {
                return Err(Error::invalid("ransac config", "early_exit_confidence must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpResult {
    /// Camera pose with respect to the map (map to camera).
    pub pose: Pose,
    /// Sorted indices of correspondences within the threshold under `pose`.
    pub inlier_indices: Vec<usize>,
    /// RMS reprojection error over the inliers, pixels.
    pub inlier_rms: f64,
    /// Number of non-degenerate minimal hypotheses that were scored.
    pub hypothesis_count: usize,
}

/// Per-correspondence reprojection error in pixels; points at or behind the
/// image plane get `+inf`.
pub fn reprojection_errors(pose: &Pose, corr: &CorrespondenceSet, k: &CameraIntrinsics) -> Vec<f64> {
    let (r, t) = (pose.rotation_matrix(), pose.translation());
    corr.points3d
        .par_iter()
        .zip(corr.pixels.par_iter())
        .map(|(q, p)| squared_error(&r, &t, q, p, k).sqrt())
        .collect()
}

/// Squared pixel error of one correspondence; every scoring path goes through
/// here so that inlier decisions agree bit for bit.
#[inline]
fn squared_error(r: &Matrix3<f64>, t: &Vector3<f64>, q: &Point3<f64>, p: &Point2<f64>, k: &CameraIntrinsics) -> f64 {
    let c = r * q.coords + t;
    if c.z <= MIN_DEPTH {
        return f64::INFINITY;
    }
    let du = k.fx * c.x / c.z + k.cx - p.x;
    let dv = k.fy * c.y / c.z + k.cy - p.y;
    du * du + dv * dv
}

/// Inlier indices and their RMS error under `pose`.
pub fn count_inliers(pose: &Pose, corr: &CorrespondenceSet, k: &CameraIntrinsics, threshold: f64) -> (Vec<usize>, f64) {
    let (r, t) = (pose.rotation_matrix(), pose.translation());
    let mut inliers = Vec::new();
    let mut sq = 0.0;
    for (i, (q, p)) in corr.points3d.iter().zip(&corr.pixels).enumerate() {
        let e2 = squared_error(&r, &t, q, p, k);
        if e2.sqrt() <= threshold {
            inliers.push(i);
            sq += e2;
        }
    }
    let rms = if inliers.is_empty() {
        f64::INFINITY
    } else {
        (sq / inliers.len() as f64).sqrt()
    };
    (inliers, rms)
}

/// Principal axes of a point set: eigenvalues in descending order (scaled by
/// 1/n) with matching unit eigenvectors.
fn principal_axes(points: &[Point3<f64>]) -> (Point3<f64>, [f64; 3], [Vector3<f64>; 3]) {
    let n = points.len() as f64;
    let centroid = Point3::from(points.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i].max(0.0));
    let vecs = order.map(|i| eig.eigenvectors.column(i).into_owned());
    (centroid, vals, vecs)
}

/// True when the points lie within `max_angle` of a common line, judged by the
/// ratio of the second to the first principal standard deviation.
pub fn is_near_collinear(points: &[Point3<f64>], max_angle_rad: f64) -> bool {
    let (_, vals, _) = principal_axes(points);
    vals[0] <= 0.0 || (vals[1] / vals[0]).sqrt() < max_angle_rad.tan()
}

/// EPnP pose estimate from at least four correspondences.
pub fn epnp(corr: &CorrespondenceSet, k: &CameraIntrinsics) -> Result<Pose> {
    let n = corr.len();
    if n < 4 {
        return Err(Error::TooFewPoints { needed: 4, got: n });
    }
    let (c0, vals, axes) = principal_axes(&corr.points3d);
    if vals[0] <= f64::MIN_POSITIVE || (vals[1] / vals[0]).sqrt() < COLLINEAR_RATIO {
        return Err(Error::DegenerateConfiguration("world points are collinear"));
    }
    let planar = (vals[2] / vals[0]).sqrt() < PLANAR_RATIO;
    let m = if planar { 3 } else { 4 };

    // control points: centroid plus principal directions scaled by their spread
    let mut ctrl_world = vec![c0];
    let mut scaled_axes = Vec::with_capacity(3);
    for j in 0..m - 1 {
        let s = vals[j].sqrt();
        ctrl_world.push(c0 + axes[j] * s);
        scaled_axes.push((axes[j], s));
    }

    let alphas: Vec<Vec<f64>> = corr
        .points3d
        .iter()
        .map(|p| {
            let d = p - c0;
            let mut a = Vec::with_capacity(m);
            let rest: Vec<f64> = scaled_axes.iter().map(|(e, s)| e.dot(&d) / s).collect();
            a.push(1.0 - rest.iter().sum::<f64>());
            a.extend(rest);
            a
        })
        .collect();

    // projection constraints on normalized image coordinates
    let cols = 3 * m;
    let mut mtm = DMatrix::<f64>::zeros(cols, cols);
    let mut row_u = DVector::<f64>::zeros(cols);
    let mut row_v = DVector::<f64>::zeros(cols);
    for (a, px) in alphas.iter().zip(&corr.pixels) {
        let x = (px.x - k.cx) / k.fx;
        let y = (px.y - k.cy) / k.fy;
        for j in 0..m {
            row_u[3 * j] = a[j];
            row_u[3 * j + 1] = 0.0;
            row_u[3 * j + 2] = -a[j] * x;
            row_v[3 * j] = 0.0;
            row_v[3 * j + 1] = a[j];
            row_v[3 * j + 2] = -a[j] * y;
        }
        mtm.ger(1.0, &row_u, &row_u, 1.0);
        mtm.ger(1.0, &row_v, &row_v, 1.0);
    }
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let kernel: Vec<DVector<f64>> = order[..m].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let rho: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| (ctrl_world[a] - ctrl_world[b]).norm_squared())
        .collect();
    // kernel differences per pair: diffs[pair][kernel vector]
    let diffs: Vec<Vec<Vector3<f64>>> = pairs
        .iter()
        .map(|&(a, b)| {
            kernel
                .iter()
                .map(|v| {
                    Vector3::new(
                        v[3 * a] - v[3 * b],
                        v[3 * a + 1] - v[3 * b + 1],
                        v[3 * a + 2] - v[3 * b + 2],
                    )
                })
                .collect()
        })
        .collect();

    // With few points the kernel is fully m-dimensional and its ordering is
    // arbitrary, so the approximations are tried on every cyclic ordering.
    let mut starts = Vec::new();
    for rot in 0..m {
        let rotated: Vec<Vec<Vector3<f64>>> = diffs
            .iter()
            .map(|d| (0..m).map(|j| d[(j + rot) % m]).collect())
            .collect();
        for b in initial_betas(&rotated, &rho, m) {
            let mut beta = vec![0.0; m];
            for j in 0..m {
                beta[(j + rot) % m] = b[j];
            }
            starts.push(beta);
        }
    }

    let mut best: Option<(f64, Pose)> = None;
    for beta0 in starts {
        let beta = gauss_newton_betas(&diffs, &rho, beta0);
        let Some(pose) = pose_from_betas(&beta, &kernel, &alphas, &corr.points3d, m) else {
            continue;
        };
        let (r, t) = (pose.rotation_matrix(), pose.translation());
        let err: f64 = corr
            .points3d
            .iter()
            .zip(&corr.pixels)
            .map(|(q, p)| squared_error(&r, &t, q, p, k).sqrt())
            .sum();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    let (err, pose) = best.ok_or(Error::DegenerateConfiguration("no finite EPnP solution"))?;
    // ill-conditioned minimal sets can leave GN on the betas short of the
    // exact solution; a few LM steps on the reprojection error close the gap
    if err > 0.0 {
        return Ok(lm_refine(&pose, corr, k, POLISH_ITERATIONS));
    }
    Ok(pose)
}

/// Least-squares solve restricted to the given product columns.
fn solve_products(diffs: &[Vec<Vector3<f64>>], rho: &[f64], products: &[(usize, usize)]) -> Option<Vec<f64>> {
    let rows = diffs.len();
    let mut l = DMatrix::<f64>::zeros(rows, products.len());
    for (r, d) in diffs.iter().enumerate() {
        for (c, &(a, b)) in products.iter().enumerate() {
            let f = if a == b { 1.0 } else { 2.0 };
            l[(r, c)] = f * d[a].dot(&d[b]);
        }
    }
    let rhs = DVector::from_column_slice(rho);
    let svd = l.svd(true, true);
    let x = svd.solve(&rhs, 1e-12).ok()?;
    Some(x.iter().copied().collect())
}

/// Starting coefficients from the linearized distance constraints, assuming
/// the solution lies in the span of the first one, two or three kernel vectors.
fn initial_betas(diffs: &[Vec<Vector3<f64>>], rho: &[f64], m: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();

    // span of v1: fit b11, b12, ..., b1m and read off beta_1 and the ratios
    let first_row: Vec<(usize, usize)> = (0..m).map(|j| (0, j)).collect();
    if let Some(b) = solve_products(diffs, rho, &first_row) {
        let mut beta = vec![0.0; m];
        if b[0] < 0.0 {
            beta[0] = (-b[0]).sqrt();
            for j in 1..m {
                beta[j] = -b[j] / beta[0];
            }
        } else if b[0] > 0.0 {
            beta[0] = b[0].sqrt();
            for j in 1..m {
                beta[j] = b[j] / beta[0];
            }
        }
        out.push(beta);
    }

    // span of v1, v2: fit b11, b12, b22
    if let Some(b) = solve_products(diffs, rho, &[(0, 0), (0, 1), (1, 1)]) {
        let mut beta = vec![0.0; m];
        if b[0] < 0.0 {
            beta[0] = (-b[0]).sqrt();
            beta[1] = if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 };
        } else {
            beta[0] = b[0].sqrt();
            beta[1] = if b[2] > 0.0 { b[2].sqrt() } else { 0.0 };
        }
        if b[1] < 0.0 {
            beta[0] = -beta[0];
        }
        out.push(beta);
    }

    // span of v1, v2, v3: fit b11, b12, b22, b13, b23
    if m == 4 {
        if let Some(b) = solve_products(diffs, rho, &[(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)]) {
            let mut beta = vec![0.0; m];
            if b[0] < 0.0 {
                beta[0] = (-b[0]).sqrt();
                beta[1] = if b[2] < 0.0 { (-b[2]).sqrt() } else { 0.0 };
            } else {
                beta[0] = b[0].sqrt();
                beta[1] = if b[2] > 0.0 { b[2].sqrt() } else { 0.0 };
            }
            if b[1] < 0.0 {
                beta[0] = -beta[0];
            }
            if beta[0] != 0.0 {
                beta[2] = b[3] / beta[0];
            }
            out.push(beta);
        }
    }
    out
}

/// Gauss-Newton on `‖Σ_k beta_k d_k‖² = rho` over all control-point pairs.
fn gauss_newton_betas(diffs: &[Vec<Vector3<f64>>], rho: &[f64], mut beta: Vec<f64>) -> Vec<f64> {
    let nb = beta.len();
    for _ in 0..GAUSS_NEWTON_ITERATIONS {
        // normal equations in a 4x4 system; unused rows stay identity
        let mut jtj = Matrix4::<f64>::identity();
        for c in 0..nb {
            jtj[(c, c)] = 0.0;
        }
        let mut jtr = Vector4::<f64>::zeros();
        for (d, r) in diffs.iter().zip(rho) {
            let s: Vector3<f64> = (0..nb).map(|k| d[k] * beta[k]).sum();
            let res = s.norm_squared() - r;
            let mut row = Vector4::zeros();
            for c in 0..nb {
                row[c] = 2.0 * s.dot(&d[c]);
            }
            jtj += row * row.transpose();
            jtr += row * res;
        }
        let Some(step) = jtj.lu().solve(&jtr) else {
            break;
        };
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        for c in 0..nb {
            beta[c] -= step[c];
        }
        let scale = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if step.norm() <= 1e-13 * scale {
            break;
        }
    }
    beta
}

fn pose_from_betas(
    beta: &[f64],
    kernel: &[DVector<f64>],
    alphas: &[Vec<f64>],
    world: &[Point3<f64>],
    m: usize,
) -> Option<Pose> {
    let mut ctrl = vec![Vector3::zeros(); m];
    for (b, v) in beta.iter().zip(kernel) {
        for (j, c) in ctrl.iter_mut().enumerate() {
            *c += *b * Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]);
        }
    }
    let mut cam: Vec<Point3<f64>> = alphas
        .iter()
        .map(|a| Point3::from(a.iter().zip(&ctrl).map(|(w, c)| *w * c).sum::<Vector3<f64>>()))
        .collect();
    let mean_z: f64 = cam.iter().map(|p| p.z).sum::<f64>() / cam.len() as f64;
    if !mean_z.is_finite() || mean_z == 0.0 {
        return None;
    }
    if mean_z < 0.0 {
        for p in &mut cam {
            p.coords = -p.coords;
        }
    }
    rigid_alignment(world, &cam)
}

/// Rotation and translation minimizing `Σ ‖R w_i + t - c_i‖²` (no scale).
pub fn rigid_alignment(world: &[Point3<f64>], cam: &[Point3<f64>]) -> Option<Pose> {
    let n = world.len() as f64;
    let wc = world.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let cc = cam.iter().map(|p| p.coords).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(cam) {
        h += (c.coords - cc) * (w.coords - wc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let d = (u * vt).determinant().signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt;
    if !r.iter().all(|v| v.is_finite()) {
        return None;
    }
    let pose = Pose::from_rotation_matrix(&r, Vector3::zeros());
    let t = cc - pose.rotation() * wc;
    Some(Pose::new(pose.rotation(), t))
}

/// Jacobian of the projected pixel of `point` with respect to a left
/// perturbation `exp(xi) * pose`, with `xi = (rho, omega)`.
pub fn projection_jacobian(pose: &Pose, point: &Point3<f64>, k: &CameraIntrinsics) -> Result<Matrix2x6<f64>> {
    let pc = pose.transform_point(point);
    if pc.z <= MIN_DEPTH {
        return Err(Error::NonPositiveDepth { depth: pc.z });
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    // d(u,v)/d(pc)
    let dproj = nalgebra::Matrix2x3::new(k.fx * iz, 0.0, -k.fx * x * iz2, 0.0, k.fy * iz, -k.fy * y * iz2);
    // d(pc)/d(xi) = [I | -[pc]x]
    let mut dp = nalgebra::Matrix3x6::zeros();
    dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-pc.coords.cross_matrix()));
    Ok(dproj * dp)
}

fn weighted_cost(pose: &Pose, corr: &CorrespondenceSet, active: &[usize], k: &CameraIntrinsics) -> f64 {
    let mut cost = 0.0;
    for &i in active {
        match k.project(&pose.transform_point(&corr.points3d[i])) {
            Ok((u, v, _)) => {
                let p = corr.pixels[i];
                cost += corr.weights[i] * ((u - p.x).powi(2) + (v - p.y).powi(2));
            }
            Err(_) => return f64::INFINITY,
        }
    }
    cost
}

/// Levenberg-Marquardt on `Σ w_i ‖π(H Q_i) - p_i‖²` over SE(3).
///
/// Correspondences behind the camera at the input pose are ignored, and steps
/// that push an active point behind the camera are rejected. The returned
/// cost is never above the input cost.
pub fn lm_refine(pose: &Pose, corr: &CorrespondenceSet, k: &CameraIntrinsics, max_iter: usize) -> Pose {
    let active: Vec<usize> = (0..corr.len())
        .filter(|&i| pose.transform_point(&corr.points3d[i]).z > MIN_DEPTH)
        .collect();
    if active.len() < 4 {
        return *pose;
    }
    let mut current = *pose;
    let mut cost = weighted_cost(&current, corr, &active, k);
    let mut lambda = 1e-3;
    for _ in 0..max_iter {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for &i in &active {
            let q = &corr.points3d[i];
            let Ok(jac) = projection_jacobian(&current, q, k) else {
                continue;
            };
            let (u, v, _) = k.project(&current.transform_point(q)).expect("depth checked by jacobian");
            let r = nalgebra::Vector2::new(u - corr.pixels[i].x, v - corr.pixels[i].y);
            let w = corr.weights[i];
            h += w * jac.transpose() * jac;
            g += w * jac.transpose() * r;
        }
        if g.norm() == 0.0 {
            break;
        }
        let mut accepted = false;
        while lambda < 1e12 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = Pose::exp(&step).compose(&current);
            let new_cost = weighted_cost(&candidate, corr, &active, k);
            if new_cost < cost {
                let rel = (cost - new_cost) / cost.max(f64::MIN_POSITIVE);
                current = candidate;
                cost = new_cost;
                lambda *= 0.1;
                accepted = true;
                if rel < 1e-10 {
                    return current;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    current
}

struct Hypothesis {
    count: usize,
    rms: f64,
    iteration: usize,
    pose: Pose,
}

impl Hypothesis {
    /// More inliers first, then lower RMS, then earlier iteration.
    fn beats(&self, other: &Hypothesis) -> bool {
        if self.count != other.count {
            return self.count > other.count;
        }
        if self.rms != other.rms {
            return self.rms < other.rms;
        }
        self.iteration < other.iteration
    }
}

fn score(pose: Pose, corr: &CorrespondenceSet, k: &CameraIntrinsics, threshold: f64, iteration: usize) -> Hypothesis {
    let (r, t) = (pose.rotation_matrix(), pose.translation());
    let mut count = 0usize;
    let mut sq = 0.0;
    for (q, p) in corr.points3d.iter().zip(&corr.pixels) {
        let e2 = squared_error(&r, &t, q, p, k);
        if e2.sqrt() <= threshold {
            count += 1;
            sq += e2;
        }
    }
    let rms = if count > 0 { (sq / count as f64).sqrt() } else { f64::INFINITY };
    Hypothesis {
        count,
        rms,
        iteration,
        pose,
    }
}

fn evaluate_iteration(
    corr: &CorrespondenceSet,
    k: &CameraIntrinsics,
    cfg: &RansacConfig,
    iteration: usize,
) -> Option<Hypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(iteration as u64);
    let sample: Vec<usize> = index::sample(&mut rng, corr.len(), 4).into_vec();
    let subset = corr.subset(&sample);
    if is_near_collinear(&subset.points3d, 1f64.to_radians()) {
        return None;
    }
    let pose = epnp(&subset, k).ok()?;
    Some(score(pose, corr, k, cfg.reproj_threshold, iteration))
}

fn pick_best(a: Option<Hypothesis>, b: Option<Hypothesis>) -> Option<Hypothesis> {
    match (a, b) {
        (Some(a), Some(b)) => Some(if b.beats(&a) { b } else { a }),
        (a, b) => a.or(b),
    }
}

/// Robust pose from correspondences with outliers.
///
/// Draws `iterations` seeded minimal samples of four correspondences
/// (near-collinear samples are skipped but still count), solves each with
/// EPnP and keeps the hypothesis with the most inliers, breaking ties by lower
/// inlier RMS and then by earlier iteration. The winner is re-estimated with
/// EPnP on all of its inliers and optionally refined with LM; a refinement is
/// kept only if it does not make the result worse. The result is a pure
/// function of the inputs and `rng_seed`.
pub fn ransac_pnp(corr: &CorrespondenceSet, k: &CameraIntrinsics, cfg: &RansacConfig) -> Result<PnpResult> {
    cfg.validate()?;
    let n = corr.len();
    if n < 4 {
        return Err(Error::TooFewPoints { needed: 4, got: n });
    }

    let (best, hypothesis_count) = match cfg.early_exit_confidence {
        None => {
            let (best, count) = (0..cfg.iterations)
                .into_par_iter()
                .map(|it| {
                    let h = evaluate_iteration(corr, k, cfg, it);
                    let c = usize::from(h.is_some());
                    (h, c)
                })
                .reduce(|| (None, 0), |(a, ca), (b, cb)| (pick_best(a, b), ca + cb));
            (best, count)
        }
        Some(confidence) => {
            const BLOCK: usize = 64;
            let mut best = None;
            let mut count = 0;
            let mut done = 0;
            let mut required = cfg.iterations;
            while done < required.min(cfg.iterations) {
                let end = (done + BLOCK).min(cfg.iterations);
                let (b, c) = (done..end)
                    .into_par_iter()
                    .map(|it| {
                        let h = evaluate_iteration(corr, k, cfg, it);
                        let c = usize::from(h.is_some());
                        (h, c)
                    })
                    .reduce(|| (None, 0), |(a, ca), (b, cb)| (pick_best(a, b), ca + cb));
                best = pick_best(best, b);
                count += c;
                done = end;
                if let Some(h) = &best {
                    let w = h.count as f64 / n as f64;
                    let miss = 1.0 - w.powi(4);
                    required = if miss <= 0.0 {
                        0
                    } else {
                        ((1.0 - confidence).ln() / miss.ln()).ceil() as usize
                    };
                }
            }
            (best, count)
        }
    };

    let Some(best) = best else {
        return Err(Error::NoConsensus {
            inliers: 0,
            required: cfg.min_inliers,
        });
    };
    if best.count < cfg.min_inliers {
        return Err(Error::NoConsensus {
            inliers: best.count,
            required: cfg.min_inliers,
        });
    }

    let threshold = cfg.reproj_threshold;
    let mut current = score(best.pose, corr, k, threshold, best.iteration);
    let (inliers, _) = count_inliers(&current.pose, corr, k, threshold);
    if let Ok(refit) = epnp(&corr.subset(&inliers), k) {
        let candidate = score(refit, corr, k, threshold, 0);
        if !current.beats(&Hypothesis { iteration: current.iteration, ..candidate }) {
            current = Hypothesis { iteration: current.iteration, ..candidate };
        }
    }
    if cfg.refine_with_lm {
        let (inliers, _) = count_inliers(&current.pose, corr, k, threshold);
        let refined = lm_refine(&current.pose, &corr.subset(&inliers), k, cfg.lm_max_iterations);
        let candidate = score(refined, corr, k, threshold, current.iteration);
        if candidate.count > 0 && candidate.rms <= current.rms {
            current = candidate;
        }
    }

    let (inlier_indices, inlier_rms) = count_inliers(&current.pose, corr, k, threshold);
    if inlier_indices.len() < cfg.min_inliers {
        return Err(Error::NoConsensus {
            inliers: inlier_indices.len(),
            required: cfg.min_inliers,
        });
    }
    Ok(PnpResult {
        pose: current.pose,
        inlier_indices,
        inlier_rms,
        hypothesis_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_errors;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;
    use rand::Rng;

    fn kitti() -> CameraIntrinsics {
        CameraIntrinsics::new(718.856, 718.856, 607.19, 185.21, 1242, 376).unwrap()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let q = UnitQuaternion::from_euler_angles(
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.5..1.5),
            rng.random_range(-3.0..3.0),
        );
        let t = Vector3::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        Pose::new(q, t)
    }

    /// Exact correspondences visible from `pose`; `planar` puts all points on z_cam-tilted plane.
    fn scene(rng: &mut impl Rng, pose: &Pose, k: &CameraIntrinsics, n: usize, planar: bool) -> CorrespondenceSet {
        let inv = pose.inverse();
        let mut pts = Vec::with_capacity(n);
        let mut pix = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.random_range(0.0..k.width as f64);
            let v = rng.random_range(0.0..k.height as f64);
            let depth = if planar {
                // plane z = 10 + 0.01 * x_pixel offset
                10.0 + 0.005 * (u - k.cx)
            } else {
                rng.random_range(4.0..40.0)
            };
            let pc = k.unproject(u, v, depth).unwrap();
            pts.push(inv.transform_point(&pc));
            pix.push(Point2::new(u, v));
        }
        CorrespondenceSet::new(pts, pix)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn epnp_recovers_exact_pose() {
        let k = kitti();
        let mut r = rng(1);
        for _ in 0..200 {
            let pose = random_pose(&mut r);
            let n = r.random_range(4..60);
            let corr = scene(&mut r, &pose, &k, n, false);
            let est = epnp(&corr, &k).unwrap();
            let (et, er) = pose_errors(&pose, &est);
            assert!(et < 1e-6 && er < 1e-6, "n={n} et={et} er={er}");
        }
    }

    #[test]
    fn epnp_minimal_sets() {
        let k = kitti();
        let mut r = rng(12);
        for _ in 0..1000 {
            let pose = random_pose(&mut r);
            let corr = scene(&mut r, &pose, &k, 4, false);
            let est = epnp(&corr, &k).unwrap();
            let (et, er) = pose_errors(&pose, &est);
            assert!(et < 1e-6 && er < 1e-6, "et={et} er={er}");
        }
    }

    #[test]
    fn epnp_planar_scene() {
        let k = kitti();
        let mut r = rng(2);
        for _ in 0..50 {
            let pose = random_pose(&mut r);
            let corr = scene(&mut r, &pose, &k, 30, true);
            let est = epnp(&corr, &k).unwrap();
            let (et, er) = pose_errors(&pose, &est);
            assert!(et < 1e-6 && er < 1e-6, "et={et} er={er}");
        }
    }

    #[test]
    fn epnp_rejects_small_and_collinear_sets() {
        let k = kitti();
        let corr = CorrespondenceSet::new(
            vec![Point3::new(0.0, 0.0, 5.0), Point3::new(1.0, 0.0, 5.0), Point3::new(0.0, 1.0, 5.0)],
            vec![Point2::new(0.0, 0.0); 3],
        );
        assert!(matches!(epnp(&corr, &k), Err(Error::TooFewPoints { needed: 4, got: 3 })));
        let line: Vec<_> = (0..6).map(|i| Point3::new(i as f64, 2.0 * i as f64, 10.0 + i as f64)).collect();
        let corr = CorrespondenceSet::new(line, vec![Point2::new(1.0, 1.0); 6]);
        assert!(matches!(epnp(&corr, &k), Err(Error::DegenerateConfiguration(_))));
        let corr = CorrespondenceSet::new(vec![Point3::new(1.0, 1.0, 1.0); 5], vec![Point2::new(1.0, 1.0); 5]);
        assert!(matches!(epnp(&corr, &k), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn reprojection_error_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let corr = CorrespondenceSet::new(
            vec![Point3::new(0.0, 0.0, 2.0), Point3::new(0.0, 0.0, -2.0)],
            vec![Point2::new(53.0, 54.0), Point2::new(50.0, 50.0)],
        );
        let e = reprojection_errors(&Pose::identity(), &corr, &k);
        assert!((e[0] - 5.0).abs() < 1e-12);
        assert_eq!(e[1], f64::INFINITY);
    }

    #[test]
    fn ransac_on_exact_data_keeps_everything() {
        let k = kitti();
        let mut r = rng(3);
        let pose = random_pose(&mut r);
        let corr = scene(&mut r, &pose, &k, 1000, false);
        let res = ransac_pnp(&corr, &k, &RansacConfig::default()).unwrap();
        assert_eq!(res.inlier_indices.len(), 1000);
        assert!(res.inlier_rms < 1e-6);
        let (et, er) = pose_errors(&pose, &res.pose);
        assert!(et < 1e-6 && er < 1e-6);
        assert!(res.hypothesis_count > 0 && res.hypothesis_count <= 1000);
    }

    fn with_outliers(corr: &mut CorrespondenceSet, r: &mut impl Rng, frac: f64, k: &CameraIntrinsics) -> Vec<usize> {
        let n = corr.len();
        let m = (frac * n as f64).round() as usize;
        let idx = index::sample(r, n, m).into_vec();
        for &i in &idx {
            corr.pixels[i] = Point2::new(r.random_range(0.0..k.width as f64), r.random_range(0.0..k.height as f64));
        }
        idx
    }

    #[test]
    fn ransac_with_outliers_and_noise() {
        let k = kitti();
        let mut r = rng(4);
        let pose = random_pose(&mut r);
        let mut corr = scene(&mut r, &pose, &k, 1000, false);
        for p in &mut corr.pixels {
            p.x += r.random_range(-0.5..0.5);
            p.y += r.random_range(-0.5..0.5);
        }
        let outliers = with_outliers(&mut corr, &mut r, 0.4, &k);
        let cfg = RansacConfig {
            rng_seed: 9,
            refine_with_lm: true,
            ..Default::default()
        };
        let res = ransac_pnp(&corr, &k, &cfg).unwrap();
        let (et, er) = pose_errors(&pose, &res.pose);
        assert!(et < 0.05 && er < 0.1, "et={et} er={er}");
        assert!(res.inlier_indices.len() >= 600);
        let wrong = res.inlier_indices.iter().filter(|i| outliers.contains(i)).count();
        assert!(wrong < 20, "{wrong} outliers accepted");
        assert!(res.inlier_indices.windows(2).all(|w| w[0] < w[1]));

        let (recount, rms) = count_inliers(&res.pose, &corr, &k, cfg.reproj_threshold);
        assert_eq!(recount, res.inlier_indices);
        assert_eq!(rms, res.inlier_rms);

        let no_lm = ransac_pnp(&corr, &k, &RansacConfig { refine_with_lm: false, ..cfg }).unwrap();
        assert!(res.inlier_rms <= no_lm.inlier_rms);
    }

    #[test]
    fn ransac_is_deterministic() {
        let k = kitti();
        let mut r = rng(5);
        let pose = random_pose(&mut r);
        let mut corr = scene(&mut r, &pose, &k, 300, false);
        with_outliers(&mut corr, &mut r, 0.5, &k);
        let cfg = RansacConfig {
            iterations: 200,
            rng_seed: 77,
            refine_with_lm: true,
            ..Default::default()
        };
        let a = ransac_pnp(&corr, &k, &cfg).unwrap();
        let b = ransac_pnp(&corr, &k, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.pose.wxyz(), b.pose.wxyz());
    }

    #[test]
    fn ransac_early_exit_stops_on_clean_data() {
        let k = kitti();
        let mut r = rng(6);
        let pose = random_pose(&mut r);
        let corr = scene(&mut r, &pose, &k, 200, false);
        let cfg = RansacConfig {
            early_exit_confidence: Some(0.999),
            ..Default::default()
        };
        let res = ransac_pnp(&corr, &k, &cfg).unwrap();
        assert!(res.hypothesis_count <= 64);
        assert_eq!(res.inlier_indices.len(), 200);
    }

    #[test]
    fn ransac_reports_no_consensus() {
        let k = kitti();
        let mut r = rng(7);
        let pts: Vec<_> = (0..200)
            .map(|_| Point3::new(r.random_range(-10.0..10.0), r.random_range(-5.0..5.0), r.random_range(5.0..50.0)))
            .collect();
        let pix: Vec<_> = (0..200)
            .map(|_| Point2::new(r.random_range(0.0..1242.0), r.random_range(0.0..376.0)))
            .collect();
        let cfg = RansacConfig {
            iterations: 100,
            min_inliers: 100,
            ..Default::default()
        };
        let err = ransac_pnp(&CorrespondenceSet::new(pts, pix), &k, &cfg).unwrap_err();
        assert!(matches!(err, Error::NoConsensus { required: 100, .. }));
        let few = CorrespondenceSet::new(vec![Point3::origin(); 3], vec![Point2::origin(); 3]);
        assert!(matches!(ransac_pnp(&few, &k, &cfg), Err(Error::TooFewPoints { .. })));
        let bad = RansacConfig { min_inliers: 3, ..cfg };
        assert!(matches!(ransac_pnp(&few, &k, &bad), Err(Error::Invalid { .. })));
    }

    #[test]
    fn lm_recovers_small_perturbation() {
        let k = kitti();
        let mut r = rng(8);
        for _ in 0..20 {
            let pose = random_pose(&mut r);
            let corr = scene(&mut r, &pose, &k, 200, false);
            let delta = Pose::new(
                UnitQuaternion::from_axis_angle(&Vector3::y_axis(), 0.2f64.to_radians()),
                Vector3::new(0.02, 0.0, 0.0),
            );
            let start = delta.compose(&pose);
            let refined = lm_refine(&start, &corr, &k, 50);
            let (et, er) = pose_errors(&pose, &refined);
            assert!(et < 1e-6 && er < 1e-6, "et={et} er={er}");
        }
    }

    #[test]
    fn lm_leaves_optimum_in_place() {
        let k = kitti();
        let mut r = rng(9);
        let pose = random_pose(&mut r);
        let corr = scene(&mut r, &pose, &k, 100, false);
        let refined = lm_refine(&pose, &corr, &k, 50);
        let (et, er) = pose_errors(&pose, &refined);
        assert!(et < 1e-9 && er.to_radians() < 1e-9);
    }

    #[test]
    fn lm_never_increases_cost() {
        let k = kitti();
        let mut r = rng(10);
        let pose = random_pose(&mut r);
        let mut corr = scene(&mut r, &pose, &k, 300, false);
        for (i, p) in corr.pixels.iter_mut().enumerate() {
            p.x += r.random_range(-2.0..2.0);
            p.y += r.random_range(-2.0..2.0);
            corr.weights[i] = r.random_range(0.1..2.0);
        }
        let all: Vec<usize> = (0..corr.len()).collect();
        let before = weighted_cost(&pose, &corr, &all, &k);
        let refined = lm_refine(&pose, &corr, &k, 50);
        assert!(weighted_cost(&refined, &corr, &all, &k) <= before);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let k = kitti();
        let mut r = rng(11);
        for _ in 0..100 {
            let pose = random_pose(&mut r);
            let corr = scene(&mut r, &pose, &k, 1, false);
            let q = corr.points3d[0];
            let jac = projection_jacobian(&pose, &q, &k).unwrap();
            let h = 1e-6;
            for c in 0..6 {
                let mut xi = Vector6::zeros();
                xi[c] = h;
                let (up, vp, _) = k.project(&Pose::exp(&xi).compose(&pose).transform_point(&q)).unwrap();
                xi[c] = -h;
                let (um, vm, _) = k.project(&Pose::exp(&xi).compose(&pose).transform_point(&q)).unwrap();
                let fd = [(up - um) / (2.0 * h), (vp - vm) / (2.0 * h)];
                for row in 0..2 {
                    let scale = 1.0f64.max(jac[(row, c)].abs());
                    assert!(
                        (fd[row] - jac[(row, c)]).abs() / scale < 1e-4,
                        "row {row} col {c}: fd {} analytic {}",
                        fd[row],
                        jac[(row, c)]
                    );
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn rigid_alignment_inverts_a_transform(seed in any::<u64>()) {
            let mut r = rng(seed);
            let pose = random_pose(&mut r);
            let world: Vec<_> = (0..10)
                .map(|_| Point3::new(r.random_range(-5.0..5.0), r.random_range(-5.0..5.0), r.random_range(-5.0..5.0)))
                .collect();
            let cam: Vec<_> = world.iter().map(|p| pose.transform_point(p)).collect();
            let est = rigid_alignment(&world, &cam).unwrap();
            let (et, er) = pose_errors(&pose, &est);
            prop_assert!(et < 1e-9 && er < 1e-7);
        }

        #[test]
        fn inliers_are_within_threshold(seed in 0u64..1000) {
            let k = kitti();
            let mut r = rng(seed);
            let pose = random_pose(&mut r);
            let mut corr = scene(&mut r, &pose, &k, 80, false);
            with_outliers(&mut corr, &mut r, 0.3, &k);
            let cfg = RansacConfig { iterations: 100, rng_seed: seed, ..Default::default() };
            if let Ok(res) = ransac_pnp(&corr, &k, &cfg) {
                let e = reprojection_errors(&res.pose, &corr, &k);
                for &i in &res.inlier_indices {
                    prop_assert!(e[i] <= cfg.reproj_threshold);
                }
                prop_assert_eq!(
                    res.inlier_indices.len(),
                    e.iter().filter(|&&x| x <= cfg.reproj_threshold).count()
                );
            }
        }
    }
}
