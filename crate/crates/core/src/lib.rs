//! LiDAR odometry from matched keypoints on spherical range images.
//!
//! Scans are projected to range images, completed, equalized and run
//! through a SIFT-style detector. Matched keypoints are lifted back to their
//! exact 3D source points, giving an `m × 6` set of matched point pairs
//! from which frame-to-frame motion is estimated, either geometrically
//! (linearized least squares inside RANSAC) or with small point-set
//! networks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod fsutil;
pub mod geometry;
pub mod keypoints;
pub mod odometry;
pub mod pipeline;
pub mod pointcloud;
pub mod projection;
pub mod regression;
pub mod scene;

pub use error::{Error, Result};
pub use geometry::{Pose, UnitQuaternion};
pub use pointcloud::PointCloud;
