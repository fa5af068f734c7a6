//! Rendering a point-cloud map into a sparse depth image ("LiDAR-image").
//!
//! Each map point is moved into the camera frame, projected with the pinhole
//! model and binned to the nearest integer pixel. A z-buffer keeps the
//! closest point per pixel (ties go to the lower point index), and an optional
//! occlusion filter then removes points whose line of sight is blocked by
//! closer neighbors. The continuous projection of every kept point is stored
//! alongside the depth so that downstream flow and correspondences are
//! computed without quantization error.

use std::io::{Read, Write};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, PointCloud, Pose};

pub const EMPTY_INDEX: u32 = u32::MAX;
const LIMG_MAGIC: &[u8; 4] = b"LIMG";

/// Sparse depth image with per-pixel source point and continuous projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarImage {
    width: u32,
    height: u32,
    depth: Vec<f64>,
    source_index: Vec<u32>,
    subpixel: Vec<[f64; 2]>,
}

impl LidarImage {
    pub fn empty(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self {
            width,
            height,
            depth: vec![0.0; n],
            source_index: vec![EMPTY_INDEX; n],
            subpixel: vec![[f64::NAN; 2]; n],
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

    pub fn flat_index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn source_index(&self) -> &[u32] {
        &self.source_index
    }

    /// Continuous `(u, v)` projection of the point stored at each pixel (NaN when empty).
    pub fn subpixel(&self) -> &[[f64; 2]] {
        &self.subpixel
    }

    pub fn is_valid(&self, flat: usize) -> bool {
        self.depth[flat] > 0.0
    }

    /// The valid-pixel mask: 1 where a point is stored, 0 elsewhere.
    pub fn mask(&self) -> Vec<u8> {
        self.depth.iter().map(|d| u8::from(*d > 0.0)).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|d| **d > 0.0).count()
    }

    /// Flat indices of valid pixels in row-major order.
    pub fn valid_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.depth.len()).filter(move |&i| self.depth[i] > 0.0)
    }

    /// Indices of the map points that survived projection, in pixel order.
    pub fn visible_indices(&self) -> Vec<u32> {
        self.valid_pixels().map(|i| self.source_index[i]).collect()
    }

    fn set(&mut self, flat: usize, depth: f64, index: u32, uv: [f64; 2]) {
        self.depth[flat] = depth;
        self.source_index[flat] = index;
        self.subpixel[flat] = uv;
    }

    fn clear(&mut self, flat: usize) {
        self.set(flat, 0.0, EMPTY_INDEX, [f64::NAN; 2]);
    }

    /// Recompute the continuous projections from the source points, e.g.
    /// after reading an image from disk (which stores only pixel bins).
    pub fn refresh_subpixel(&mut self, cloud: &PointCloud, pose: &Pose, k: &CameraIntrinsics) -> Result<()> {
        for flat in 0..self.depth.len() {
            if self.depth[flat] <= 0.0 {
                continue;
            }
            let idx = self.source_index[flat] as usize;
            let p = cloud.points.get(idx).ok_or_else(|| {
                Error::invalid("lidar image", format!("source index {idx} outside cloud of {}", cloud.len()))
            })?;
            let (u, v, _) = k.project(&pose.transform_point(p))?;
            self.subpixel[flat] = [u, v];
        }
        Ok(())
    }

    /// Serialize as `LIMG`: magic, u32 width, u32 height, f32 depth grid,
    /// u32 source-index grid, all little-endian and row-major.
    pub fn write_limg<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(LIMG_MAGIC)?;
        w.write_all(&self.width.to_le_bytes())?;
        w.write_all(&self.height.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.depth.len() * 8);
        for d in &self.depth {
            buf.extend_from_slice(&(*d as f32).to_le_bytes());
        }
        for s in &self.source_index {
            buf.extend_from_slice(&s.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Read a `LIMG` stream. Continuous projections are set to pixel centers;
    /// use [`LidarImage::refresh_subpixel`] to restore them from the map.
    pub fn read_limg<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 12];
        r.read_exact(&mut header)?;
        if &header[..4] != LIMG_MAGIC {
            return Err(Error::parse("LIMG", "bad magic"));
        }
        let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let n = width as usize * height as usize;
        let mut body = vec![0u8; n * 8];
        r.read_exact(&mut body)?;
        let mut img = Self::empty(width, height);
        for i in 0..n {
            let d = f32::from_le_bytes(body[4 * i..4 * i + 4].try_into().unwrap()) as f64;
            let s = u32::from_le_bytes(body[4 * (n + i)..4 * (n + i) + 4].try_into().unwrap());
            if (d > 0.0) != (s != EMPTY_INDEX) {
                return Err(Error::parse("LIMG", format!("pixel {i}: depth and source index disagree")));
            }
            if d > 0.0 {
                let x = (i % width as usize) as f64;
                let y = (i / width as usize) as f64;
                img.set(i, d, s, [x, y]);
            }
        }
        Ok(img)
    }
}

/// How the sum of per-sector maxima is compared against the threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComparisonDirection {
    /// Point is visible when the cosine sum exceeds the threshold.
    #[default]
    VisibleIfGreater,
    /// Point is visible when the cosine sum is below the threshold.
    VisibleIfSmaller,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcclusionConfig {
    /// Odd window size in pixels.
    pub kernel_size: u32,
    /// Threshold on the sum of the four per-sector maximum cosines.
    pub threshold: f64,
    pub direction: ComparisonDirection,
}

impl Default for OcclusionConfig {
    fn default() -> Self {
        Self {
            kernel_size: 9,
            threshold: 3.0,
            direction: ComparisonDirection::VisibleIfGreater,
        }
    }
}

impl OcclusionConfig {
    /// Default window and threshold, with large cosine sums read as obstruction.
    pub fn obstruction() -> Self {
        Self {
            direction: ComparisonDirection::VisibleIfSmaller,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size < 3 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid(
                "occlusion config",
                format!("kernel size must be odd and >= 3, got {}", self.kernel_size),
            ));
        }
        if !(-4.0..=4.0).contains(&self.threshold) {
            return Err(Error::invalid(
                "occlusion config",
                format!("threshold {} outside [-4, 4]", self.threshold),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub max_depth: f64,
    pub occlusion: Option<OcclusionConfig>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            max_depth: 160.0,
            occlusion: None,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_depth > 0.0) {
            return Err(Error::invalid("projection config", "max_depth must be positive"));
        }
        if let Some(occ) = &self.occlusion {
            occ.validate()?;
        }
        Ok(())
    }
}

/// Render `cloud` seen from camera pose `pose` (map to camera) into a sparse depth image.
pub fn render_lidar_image(
    cloud: &PointCloud,
    pose: &Pose,
    k: &CameraIntrinsics,
    cfg: &ProjectionConfig,
) -> Result<LidarImage> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyProjection);
    }
    if cloud.len() >= EMPTY_INDEX as usize {
        return Err(Error::invalid("point cloud", "too many points for u32 indices"));
    }
    let img = zbuffer(cloud, pose, k, cfg.max_depth);
    let img = match &cfg.occlusion {
        Some(occ) => occlusion_filter(&img, cloud, pose, occ)?,
        None => img,
    };
    if img.valid_count() == 0 {
        return Err(Error::EmptyProjection);
    }
    Ok(img)
}

struct Candidate {
    flat: usize,
    depth: f64,
    index: u32,
    uv: [f64; 2],
}

fn zbuffer(cloud: &PointCloud, pose: &Pose, k: &CameraIntrinsics, max_depth: f64) -> LidarImage {
    let (w, h) = (k.width as i64, k.height as i64);
    let candidates: Vec<Candidate> = cloud
        .points
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let pc = pose.transform_point(p);
            if pc.z > max_depth {
                return None;
            }
            let (u, v, z) = k.project(&pc).ok()?;
            let (x, y) = (u.round(), v.round());
            if !(x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64) {
                return None;
            }
            Some(Candidate {
                flat: y as usize * w as usize + x as usize,
                depth: z,
                index: i as u32,
                uv: [u, v],
            })
        })
        .collect();

    let mut img = LidarImage::empty(k.width, k.height);
    for c in candidates {
        let cur = img.depth[c.flat];
        // (depth, index) is a total order, so the result is independent of point order
        let wins = cur == 0.0 || c.depth < cur || (c.depth == cur && c.index < img.source_index[c.flat]);
        if wins {
            img.set(c.flat, c.depth, c.index, c.uv);
        }
    }
    img
}

/// Sector of a window offset: 0 = N, 1 = E, 2 = S, 3 = W (image y grows downward).
/// The window is split by its diagonals; diagonal cells go to the clockwise neighbor.
pub(crate) fn sector(dx: i32, dy: i32) -> usize {
    let (ax, ay) = (dx.abs(), dy.abs());
    if ay > ax {
        if dy < 0 {
            0
        } else {
            2
        }
    } else if ax > ay {
        if dx > 0 {
            1
        } else {
            3
        }
    } else {
        match (dx > 0, dy > 0) {
            (true, false) => 1,
            (true, true) => 2,
            (false, true) => 3,
            (false, false) => 0,
        }
    }
}

/// Remove points whose line of sight to the camera is obstructed.
///
/// For every valid pixel holding point `P_i`, each valid neighbor `P_j` in the
/// `K x K` window contributes `alpha_ij = v_i · (P_j - P_i)/‖P_j - P_i‖`, where
/// `v_i` is the unit vector from `P_i` to the camera center. The window is split
/// into four sectors, the maximum `alpha` of each sector is taken (empty sectors
/// contribute 0) and their sum is compared against the threshold. A pixel with
/// no neighbors at all is always visible. All decisions are made against the
/// input image, so the result does not depend on evaluation order.
pub fn occlusion_filter(
    image: &LidarImage,
    cloud: &PointCloud,
    pose: &Pose,
    cfg: &OcclusionConfig,
) -> Result<LidarImage> {
    cfg.validate()?;
    let (w, h) = (image.width as i32, image.height as i32);
    let half = (cfg.kernel_size / 2) as i32;

    if let Some(bad) = image.source_index.iter().find(|&&s| s != EMPTY_INDEX && s as usize >= cloud.len()) {
        return Err(Error::invalid("lidar image", format!("source index {bad} outside cloud")));
    }
    let cam_points: Vec<Option<Point3<f64>>> = image
        .source_index
        .par_iter()
        .map(|&s| (s != EMPTY_INDEX).then(|| pose.transform_point(&cloud.points[s as usize])))
        .collect();

    let occluded: Vec<usize> = (0..image.depth.len())
        .into_par_iter()
        .filter(|&flat| {
            let Some(pi) = cam_points[flat] else {
                return false;
            };
            let to_camera: Vector3<f64> = -pi.coords.normalize();
            let (x, y) = ((flat % w as usize) as i32, (flat / w as usize) as i32);
            let mut max_alpha = [f64::NEG_INFINITY; 4];
            let mut any = false;
            for dy in -half..=half {
                let ny = y + dy;
                if ny < 0 || ny >= h {
                    continue;
                }
                for dx in -half..=half {
                    let nx = x + dx;
                    if (dx == 0 && dy == 0) || nx < 0 || nx >= w {
                        continue;
                    }
                    let Some(pj) = cam_points[ny as usize * w as usize + nx as usize] else {
                        continue;
                    };
                    let d = pj - pi;
                    let n = d.norm();
                    if n == 0.0 {
                        continue;
                    }
                    let alpha = to_camera.dot(&d) / n;
                    let s = sector(dx, dy);
                    max_alpha[s] = max_alpha[s].max(alpha);
                    any = true;
                }
            }
            if !any {
                return false;
            }
            let sum: f64 = max_alpha.iter().map(|a| if a.is_finite() { *a } else { 0.0 }).sum();
            let visible = match cfg.direction {
                ComparisonDirection::VisibleIfGreater => sum > cfg.threshold,
                ComparisonDirection::VisibleIfSmaller => sum < cfg.threshold,
            };
            !visible
        })
        .collect();

    let mut out = image.clone();
    for flat in occluded {
        out.clear(flat);
    }
    Ok(out)
}

/// Fourier feature mapping of a depth value:
/// `[d, sin(π d 2⁰), cos(π d 2⁰), …, sin(π d 2^{m-1}), cos(π d 2^{m-1})]`.
pub fn fourier_map(d: f64, m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * m + 1);
    out.push(d);
    for k in 0..m {
        let (s, c) = (d * std::f64::consts::PI * (1u64 << k) as f64).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// Horizontal mirror augmentation for a cloud in the robot convention
/// (X forward, Y left, Z up): negates Y and moves the principal point to
/// `cx' = width - cx`. Applying it twice is the identity.
pub fn mirror_augmentation(cloud: &PointCloud, k: &CameraIntrinsics) -> (PointCloud, CameraIntrinsics) {
    let mut mirrored = cloud.clone();
    for p in &mut mirrored.points {
        p.y = -p.y;
    }
    let mut k2 = *k;
    k2.cx = k.width as f64 - k.cx;
    (mirrored, k2)
}
