//! File formats and map building.
//!
//! Scans are raw little-endian `f32` quadruplets `(x, y, z, intensity)`.
//! Label files hold one little-endian `u32` per point whose lower 16 bits are
//! the semantic class. Trajectories are text, one pose per line: 12 reals
//! (row-major 3x4 sensor-to-map transform), optionally preceded by a
//! timestamp. Intrinsics and run configurations are TOML. Maps and colored
//! maps are exported as ASCII PLY.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, FrameConvention, PointCloud, Pose};
use crate::pipeline::{RgbImage, StageConfig};
use crate::projection::ProjectionConfig;

const ORTHONORMAL_TOLERANCE: f64 = 1e-5;

pub fn load_scan(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedScan {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    let n = bytes.len() / 16;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4 bytes"));
        points.push(Point3::new(f(0) as f64, f(1) as f64, f(2) as f64));
        intensity.push(f(3));
    }
    let mut cloud = PointCloud::new(points);
    cloud.intensity = Some(intensity);
    Ok(cloud)
}

/// Writes coordinates as `f32`; missing intensities are written as 0.
pub fn save_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, p) in cloud.points.iter().enumerate() {
        let intensity = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p.x as f32, p.y as f32, p.z as f32, intensity] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Semantic labels (lower 16 bits of each `u32`).
pub fn load_labels(path: &Path) -> Result<Vec<u32>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::parse(path.display().to_string(), "label file length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) & 0xFFFF)
        .collect())
}

/// Timestamped poses; each pose maps sensor coordinates into the map frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Map-to-camera pose of entry `i`, the inverse of the stored pose.
    pub fn camera_pose(&self, i: usize) -> Pose {
        self.entries[i].1.inverse()
    }
}

/// Parse 12 reals as a row-major 3x4 rigid transform.
pub fn pose_from_values(values: &[f64]) -> std::result::Result<Pose, String> {
    let m: [f64; 12] = values
        .try_into()
        .map_err(|_| format!("expected 12 values, got {}", values.len()))?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".into());
    }
    let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOLERANCE || r.determinant() <= 0.0 {
        return Err(format!("rotation block is not a proper rotation (orthonormality error {err:.3e})"));
    }
    Ok(Pose::from_row_major_3x4(&m))
}

/// Parse a pose given as 12 comma- or space-separated reals (row-major 3x4).
pub fn parse_pose(text: &str) -> Result<Pose> {
    let values: Vec<f64> = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|e| Error::parse("pose", format!("{t:?}: {e}"))))
        .collect::<Result<_>>()?;
    pose_from_values(&values).map_err(|m| Error::parse("pose", m))
}

pub fn parse_trajectory(text: &str, source: &str) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = |msg: String| Error::parse(format!("{source} line {}", lineno + 1), msg);
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| at(format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        let (timestamp, pose_values) = match values.len() {
            12 => (entries.len() as f64, &values[..]),
            13 => (values[0], &values[1..]),
            n => return Err(at(format!("expected 12 or 13 values, got {n}"))),
        };
        let pose = pose_from_values(pose_values).map_err(at)?;
        if let Some((prev, _)) = entries.last() {
            if !(timestamp > *prev) {
                return Err(at(format!("timestamp {timestamp} does not increase (previous {prev})")));
            }
        }
        entries.push((timestamp, pose));
    }
    Ok(Trajectory { entries })
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    parse_trajectory(&fs::read_to_string(path)?, &path.display().to_string())
}

/// Writes 13 columns: timestamp followed by the row-major 3x4 transform.
pub fn save_trajectory(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (t, pose) in &traj.entries {
        let m = pose.to_row_major_3x4();
        let cols: Vec<String> = std::iter::once(*t).chain(m).map(|v| v.to_string()).collect();
        writeln!(w, "{}", cols.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub frame: FrameConvention,
}

pub fn load_intrinsics(path: &Path) -> Result<(CameraIntrinsics, FrameConvention)> {
    let text = fs::read_to_string(path)?;
    let f: IntrinsicsFile = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let k = CameraIntrinsics::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height)?;
    Ok((k, f.frame))
}

pub fn save_intrinsics(path: &Path, k: &CameraIntrinsics, frame: FrameConvention) -> Result<()> {
    let f = IntrinsicsFile {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
        frame,
    };
    let text = toml::to_string(&f).map_err(|e| Error::invalid("intrinsics", e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridConfig {
    /// Voxel edge length, meters.
    pub voxel_size: f64,
}

impl Default for VoxelGridConfig {
    fn default() -> Self {
        Self { voxel_size: 0.1 }
    }
}

#[derive(Default)]
struct VoxelAccumulator {
    members: Vec<([f64; 3], f32)>,
}

/// Aggregate scans into a voxel-downsampled map.
///
/// Each scan is moved into the map frame with its sensor-to-map pose. When
/// labels are given, points whose label is in `dynamic_labels` are dropped
/// first. Every occupied voxel yields one point at the centroid of its
/// members, with averaged intensity when all scans carry intensities. Members
/// are summed in sorted order and voxels are emitted in index order, so the
/// result does not depend on the order of the scans.
pub fn build_map(
    scans: &[(PointCloud, Pose)],
    grid: &VoxelGridConfig,
    labels: Option<&[Vec<u32>]>,
    dynamic_labels: &[u32],
) -> Result<PointCloud> {
    if !(grid.voxel_size > 0.0) {
        return Err(Error::invalid("voxel grid", "voxel_size must be positive"));
    }
    if let Some(labels) = labels {
        if labels.len() != scans.len() {
            return Err(Error::invalid(
                "labels",
                format!("{} label arrays for {} scans", labels.len(), scans.len()),
            ));
        }
        for (i, (l, (c, _))) in labels.iter().zip(scans).enumerate() {
            if l.len() != c.len() {
                return Err(Error::LabelLengthMismatch {
                    scan: i,
                    points: c.len(),
                    labels: l.len(),
                });
            }
        }
    }
    let with_intensity = scans.iter().all(|(c, _)| c.intensity.is_some());
    let transformed: Vec<Vec<([f64; 3], f32)>> = scans
        .par_iter()
        .enumerate()
        .map(|(si, (cloud, pose))| {
            cloud
                .points
                .iter()
                .enumerate()
                .filter(|(i, _)| labels.is_none_or(|l| !dynamic_labels.contains(&l[si][*i])))
                .map(|(i, p)| {
                    let q = pose.transform_point(p);
                    let intensity = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
                    ([q.x, q.y, q.z], intensity)
                })
                .collect()
        })
        .collect();

    let s = grid.voxel_size;
    let mut voxels: BTreeMap<[i64; 3], VoxelAccumulator> = BTreeMap::new();
    for pts in transformed {
        for (p, intensity) in pts {
            let key = p.map(|c| (c / s).floor() as i64);
            voxels.entry(key).or_default().members.push((p, intensity));
        }
    }
    let reps: Vec<([f64; 3], f32)> = voxels
        .into_par_iter()
        .map(|(_, mut acc)| {
            acc.members.sort_by(|a, b| {
                a.0[0]
                    .total_cmp(&b.0[0])
                    .then(a.0[1].total_cmp(&b.0[1]))
                    .then(a.0[2].total_cmp(&b.0[2]))
                    .then(a.1.total_cmp(&b.1))
            });
            let n = acc.members.len() as f64;
            let mut sum = [0.0; 3];
            let mut isum = 0.0f64;
            for (p, i) in &acc.members {
                for c in 0..3 {
                    sum[c] += p[c];
                }
                isum += *i as f64;
            }
            (sum.map(|v| v / n), (isum / n) as f32)
        })
        .collect();
    let mut cloud = PointCloud::new(reps.iter().map(|(p, _)| Point3::new(p[0], p[1], p[2])).collect());
    if with_intensity {
        cloud.intensity = Some(reps.iter().map(|(_, i)| *i).collect());
    }
    Ok(cloud)
}

/// ASCII PLY with `x y z`, then `intensity` and `red green blue` when present.
/// Coordinates are written with round-trip precision.
pub fn export_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    cloud.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property double {name}")?;
    }
    if cloud.intensity.is_some() {
        writeln!(w, "property float intensity")?;
    }
    if cloud.colors.is_some() {
        for name in ["red", "green", "blue"] {
            writeln!(w, "property uchar {name}")?;
        }
    }
    writeln!(w, "end_header")?;
    for (i, p) in cloud.points.iter().enumerate() {
        write!(w, "{} {} {}", p.x, p.y, p.z)?;
        if let Some(v) = &cloud.intensity {
            write!(w, " {}", v[i])?;
        }
        if let Some(c) = &cloud.colors {
            write!(w, " {} {} {}", c[i][0], c[i][1], c[i][2])?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads ASCII PLY vertex data (x, y, z and optional intensity and colors).
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let what = path.display().to_string();
    let mut lines = BufReader::new(File::open(path)?).lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::parse(what.clone(), "unexpected end of file"))?
            .map_err(Error::from)
    };
    if next()?.trim() != "ply" {
        return Err(Error::parse(what.clone(), "missing ply magic"));
    }
    let mut n = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "ascii" => {
                return Err(Error::parse(what.clone(), format!("unsupported format {fmt}")));
            }
            ["element", "vertex", count] => {
                n = Some(count.parse::<usize>().map_err(|e| Error::parse(what.clone(), e))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", _, name] if in_vertex => props.push(name.to_string()),
            _ => {}
        }
    }
    let n = n.ok_or_else(|| Error::parse(what.clone(), "no vertex element"))?;
    let col = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::parse(what.clone(), "vertex lacks x, y or z")),
    };
    let ii = col("intensity");
    let rgb = match (col("red"), col("green"), col("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut points = Vec::with_capacity(n);
    let mut intensity = ii.map(|_| Vec::with_capacity(n));
    let mut colors = rgb.map(|_| Vec::with_capacity(n));
    for _ in 0..n {
        let line = next()?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::parse(what.clone(), format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() < props.len() {
            return Err(Error::parse(what.clone(), format!("vertex line has {} values", vals.len())));
        }
        points.push(Point3::new(vals[ix], vals[iy], vals[iz]));
        if let (Some(v), Some(i)) = (intensity.as_mut(), ii) {
            v.push(vals[i] as f32);
        }
        if let (Some(c), Some([r, g, b])) = (colors.as_mut(), rgb) {
            c.push([vals[r] as u8, vals[g] as u8, vals[b] as u8]);
        }
    }
    let mut cloud = PointCloud::new(points);
    cloud.intensity = intensity;
    cloud.colors = colors;
    Ok(cloud)
}

/// Load a map from PLY (by extension) or from the binary scan format.
pub fn load_map(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("ply") => read_ply(path),
        _ => load_scan(path),
    }
}

pub fn load_rgb_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)
        .map_err(|e| Error::parse(path.display().to_string(), e))?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let pixels = img.pixels().map(|p| p.0).collect();
    RgbImage::new(w, h, pixels)
}

pub fn save_rgb_image(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: Vec<u8> = img.pixels().iter().flatten().copied().collect();
    image::save_buffer(path, &buf, img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::invalid("image", e.to_string()))
}

/// Run configuration; relative paths are resolved against the file's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub intrinsics: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub projection: Option<ProjectionConfig>,
    pub record_timing: bool,
    pub stages: Vec<StageConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(source.to_string(), e))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid("run config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_toml(&fs::read_to_string(path)?, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.intrinsics, &mut cfg.map, &mut cfg.trajectory, &mut cfg.output]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for stage in &mut cfg.stages {
            if let crate::pipeline::MatcherConfig::External { flow_path, .. } = &mut stage.matcher {
                if flow_path.is_relative() {
                    *flow_path = base.join(&*flow_path);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.stages.is_empty() {
            crate::pipeline::validate_stages(&self.stages)?;
        }
        if let Some(p) = &self.projection {
            p.validate()?;
        }
        for p in [&self.intrinsics, &self.map, &self.trajectory, &self.output]
            .into_iter()
            .flatten()
        {
            if p.as_os_str().is_empty() {
                return Err(Error::invalid("run config", "empty path"));
            }
        }
        Ok(())
    }
}
