//! Rigid transforms, pinhole projection and point clouds.
//!
//! Poses map points *into* the frame they describe: a camera pose `H` takes
//! map coordinates to camera coordinates, `p_cam = R * p_map + t`. The camera
//! frame is the usual pinhole one (Z forward, X right, Y down). Clouds that
//! arrive in a robot frame (X forward, Y left, Z up) are converted with
//! [`FrameConvention::to_camera`] before projection.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Point3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer to the image plane than this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

/// Flip `q` so that `w >= 0` (and, for `w == 0`, the first nonzero vector
/// component is positive). `q` and `-q` encode the same rotation.
pub fn canonical_quaternion(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let c = q.quaternion().coords; // (x, y, z, w)
    let flip = if c.w != 0.0 {
        c.w < 0.0
    } else {
        [c.x, c.y, c.z]
            .into_iter()
            .find(|v| *v != 0.0)
            .is_some_and(|v| v < 0.0)
    };
    let q = if flip {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    };
    // renormalize to keep the unit-norm drift from compounding
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Rigid transform in SE(3): unit quaternion rotation plus translation in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical_quaternion(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Build from quaternion components `(w, x, y, z)`; the quaternion is normalized.
    pub fn from_wxyz(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = raw.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid("quaternion", format!("norm {n}")));
        }
        Ok(Self::new(UnitQuaternion::new_normalize(raw), translation))
    }

    /// Build from a rotation matrix, re-orthonormalized to the nearest rotation.
    pub fn from_rotation_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix(r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Build from the top three rows of a homogeneous transform, row-major.
    pub fn from_row_major_3x4(m: &[f64; 12]) -> Self {
        let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        Self::from_rotation_matrix(&r, Vector3::new(m[3], m[7], m[11]))
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = self.rotation_matrix();
        let t = self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Quaternion components as `[w, x, y, z]`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn inverse(&self) -> Self {
        let inv = self.rotation.inverse();
        Self::new(inv, -(inv * self.translation))
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v + self.translation
    }

    /// Logarithm map to the tangent space, stacked as `(rho, omega)`:
    /// translational part first (meters), rotational part second (radians).
    pub fn log(&self) -> Vector6<f64> {
        let omega = self.rotation.scaled_axis();
        let theta = omega.norm();
        let w = omega.cross_matrix();
        let v_inv = if theta < 1e-8 {
            Matrix3::identity() - 0.5 * w + (1.0 / 12.0) * w * w
        } else {
            let half = 0.5 * theta;
            let coeff = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
            Matrix3::identity() - 0.5 * w + coeff * w * w
        };
        let rho = v_inv * self.translation;
        Vector6::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z)
    }

    /// Exponential map from `(rho, omega)`; inverse of [`Pose::log`].
    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        let theta = omega.norm();
        let w = omega.cross_matrix();
        let v = if theta < 1e-8 {
            Matrix3::identity() + 0.5 * w + (1.0 / 6.0) * w * w
        } else {
            let t2 = theta * theta;
            Matrix3::identity()
                + ((1.0 - theta.cos()) / t2) * w
                + ((theta - theta.sin()) / (t2 * theta)) * w * w
        };
        Self::new(UnitQuaternion::from_scaled_axis(omega), v * rho)
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a Pose> for &'a Pose {
    type Output = Pose;

    fn mul(self, rhs: &'a Pose) -> Pose {
        self.compose(rhs)
    }
}

/// `‖log(a⁻¹·b)‖₂` with rotation (radians) and translation (meters) weighted equally.
pub fn se3_log_norm(a: &Pose, b: &Pose) -> f64 {
    se3_log_norm_weighted(a, b, 1.0)
}

/// As [`se3_log_norm`], with the rotational block scaled by `rotation_weight`
/// (meters per radian) before taking the norm.
pub fn se3_log_norm_weighted(a: &Pose, b: &Pose, rotation_weight: f64) -> f64 {
    let mut xi = a.inverse().compose(b).log();
    for k in 3..6 {
        xi[k] *= rotation_weight;
    }
    xi.norm()
}

/// Translation error in meters and rotation error in degrees between a
/// ground-truth and a predicted pose.
///
/// The rotation error is the full geodesic angle of `q_gt * q_pred⁻¹`, i.e.
/// twice `atan2(|v|, w)` of the sign-canonical relative quaternion, so it lies
/// in `[0°, 180°]`.
pub fn pose_errors(gt: &Pose, pred: &Pose) -> (f64, f64) {
    let et = (gt.translation - pred.translation).norm();
    let m = canonical_quaternion(gt.rotation * pred.rotation.inverse());
    let q = m.quaternion();
    let vec_norm = (q.i * q.i + q.j * q.j + q.k * q.k).sqrt();
    let er = 2.0 * vec_norm.atan2(q.w).to_degrees();
    (et, er)
}

/// Axis convention a point cloud is expressed in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameConvention {
    /// Pinhole camera frame: Z forward, X right, Y down.
    #[default]
    PinholeZForward,
    /// Robot/vehicle frame: X forward, Y left, Z up.
    RobotXForward,
}

impl FrameConvention {
    /// Rotation taking coordinates in this convention to the pinhole camera convention.
    pub fn to_camera(self) -> Pose {
        match self {
            FrameConvention::PinholeZForward => Pose::identity(),
            FrameConvention::RobotXForward => {
                // x_cam = -y_robot, y_cam = -z_robot, z_cam = x_robot
                let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
                Pose::from_rotation_matrix(&r, Vector3::zeros())
            }
        }
    }
}

/// Pinhole intrinsics plus image extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid(
                "intrinsics",
                format!("focal lengths must be positive, got fx={} fy={}", self.fx, self.fy),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("intrinsics", "image extent must be nonzero"));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(
                "intrinsics",
                format!(
                    "principal point ({}, {}) outside {}x{} image",
                    self.cx, self.cy, self.width, self.height
                ),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Project a camera-frame point to continuous pixel coordinates `(u, v, depth)`.
    pub fn project(&self, p: &Point3<f64>) -> Result<(f64, f64, f64)> {
        if p.z <= MIN_DEPTH {
            return Err(Error::NonPositiveDepth { depth: p.z });
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Point3<f64>> {
        if depth <= MIN_DEPTH {
            return Err(Error::NonPositiveDepth { depth });
        }
        Ok(Point3::new(
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        ))
    }

    /// Intrinsics for an image resampled by `scale` (0.5 halves the resolution).
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        Self::new(
            self.fx * scale,
            self.fy * scale,
            self.cx * scale,
            self.cy * scale,
            ((self.width as f64) * scale).round() as u32,
            ((self.height as f64) * scale).round() as u32,
        )
    }
}

/// A point cloud with optional per-point intensity and RGB color.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub intensity: Option<Vec<f32>>,
    pub colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self {
            points,
            intensity: None,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.points.iter().position(|p| !p.coords.iter().all(|c| c.is_finite())) {
            return Err(Error::invalid("point cloud", format!("point {i} is not finite")));
        }
        if self.intensity.as_ref().is_some_and(|v| v.len() != self.points.len()) {
            return Err(Error::invalid("point cloud", "intensity length differs from point count"));
        }
        if self.colors.as_ref().is_some_and(|v| v.len() != self.points.len()) {
            return Err(Error::invalid("point cloud", "color length differs from point count"));
        }
        Ok(())
    }

    /// Apply `pose` to every point; attributes are carried through unchanged.
    pub fn transformed(&self, pose: &Pose) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            intensity: self.intensity.clone(),
            colors: self.colors.clone(),
        }
    }

    /// Re-express a cloud given in `convention` in the pinhole camera convention.
    pub fn to_camera_convention(&self, convention: FrameConvention) -> PointCloud {
        match convention {
            FrameConvention::PinholeZForward => self.clone(),
            other => self.transformed(&other.to_camera()),
        }
    }
}

pub fn transform_points(pose: &Pose, cloud: &PointCloud) -> PointCloud {
    cloud.transformed(pose)
}
