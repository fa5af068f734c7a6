//! Seeded synthetic street scene: a ground plane between two building
//! facades, seen by a KITTI-like camera.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{CameraIntrinsics, PointCloud, Pose};

pub const CAMERA_HEIGHT: f64 = 1.7;
pub const STREET_HALF_WIDTH: f64 = 7.0;
pub const MIN_DEPTH: f64 = 5.0;
pub const MAX_DEPTH: f64 = 80.0;
const FACADE_TOP: f64 = -6.0;

#[derive(Clone, Debug)]
pub struct StreetScene {
    /// Map points in world coordinates.
    pub cloud: PointCloud,
    pub intrinsics: CameraIntrinsics,
    /// Map-to-camera pose the scene was built around.
    pub gt_pose: Pose,
}

pub fn kitti_intrinsics() -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 718.856,
        fy: 718.856,
        cx: 607.1928,
        cy: 185.2157,
        width: 1242,
        height: 376,
    }
}

/// Fixed ground-truth pose, a small offset from the map origin.
pub fn street_gt_pose() -> Pose {
    Pose::new(
        UnitQuaternion::from_euler_angles(0.02, -0.05, 0.01),
        Vector3::new(0.4, -0.2, 1.0),
    )
}

/// `n_points` points split 40/30/30 between the ground and the two facades.
///
/// Points are generated in the ground-truth camera frame (X right, Y down,
/// Z forward) with depths in [5, 80] m and then moved to the world frame.
pub fn synthetic_street(n_points: usize, seed: u64) -> StreetScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gt = street_gt_pose();
    let to_world = gt.inverse();
    let n_ground = n_points * 4 / 10;
    let n_left = (n_points - n_ground) / 2;
    let mut points = Vec::with_capacity(n_points);
    let mut intensity = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let z = rng.random_range(MIN_DEPTH..MAX_DEPTH);
        let p = if i < n_ground {
            Point3::new(rng.random_range(-STREET_HALF_WIDTH..STREET_HALF_WIDTH), CAMERA_HEIGHT, z)
        } else {
            let x = if i < n_ground + n_left { -STREET_HALF_WIDTH } else { STREET_HALF_WIDTH };
            Point3::new(x, rng.random_range(FACADE_TOP..CAMERA_HEIGHT), z)
        };
        points.push(to_world.transform_point(&p));
        intensity.push(rng.random::<f32>());
    }
    let mut cloud = PointCloud::new(points);
    cloud.intensity = Some(intensity);
    StreetScene {
        cloud,
        intrinsics: kitti_intrinsics(),
        gt_pose: gt,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depths_lie_in_range_at_gt() {
        let s = synthetic_street(10_000, 3);
        assert_eq!(s.cloud.len(), 10_000);
        s.intrinsics.validate().unwrap();
        for p in &s.cloud.points {
            let z = s.gt_pose.transform_point(p).z;
            assert!((MIN_DEPTH - 1e-9..=MAX_DEPTH + 1e-9).contains(&z));
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = synthetic_street(500, 9);
        let b = synthetic_street(500, 9);
        assert_eq!(a.cloud.points, b.cloud.points);
        assert_ne!(a.cloud.points, synthetic_street(500, 10).cloud.points);
    }
}
