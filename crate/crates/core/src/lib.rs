//! Geometry toolkit for matching camera images against LiDAR point-cloud maps.
//!
//! The crate covers everything around a learned point-to-pixel matcher:
//! rendering a map into a sparse depth image at a candidate pose
//! ([`projection`]), ground-truth and synthetic flow fields and their
//! conversion into 2D-3D correspondences ([`correspondence`]), robust camera
//! pose recovery with EPnP, RANSAC and Levenberg-Marquardt ([`pnp`]), the
//! staged refinement loop and calibration metrics ([`pipeline`]), and dataset
//! ingestion and export ([`io`]).

pub mod correspondence;
pub mod error;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod pnp;
pub mod projection;
pub mod scene;

pub use correspondence::{
    filter_by_uncertainty, ground_truth_flow, oracle_match, to_correspondences, upscale_flow, CorrespondenceSet,
    FlowField, OracleNoiseConfig,
};
pub use error::{Error, Result};
pub use geometry::{
    pose_errors, se3_log_norm, se3_log_norm_weighted, transform_points, CameraIntrinsics, FrameConvention,
    PointCloud, Pose,
};
pub use pipeline::{
    aggregate_extrinsics, calibrate_extrinsics, colorize_map, iterative_localize, msee_mrr, run_benchmark, run_stage, sample_initial_pose,
    AggregationResult, BenchmarkConfig, BenchmarkReport, MatcherConfig, NoiseRange, StageConfig, StageOutcome,
};
pub use pnp::{epnp, lm_refine, ransac_pnp, reprojection_errors, PnpResult, RansacConfig};
pub use projection::{
    fourier_map, mirror_augmentation, occlusion_filter, render_lidar_image, ComparisonDirection, LidarImage,
    OcclusionConfig, ProjectionConfig,
};
