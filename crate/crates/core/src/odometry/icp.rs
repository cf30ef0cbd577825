//! Point-to-point ICP baseline driven by the twist solver.

use serde::{Deserialize, Serialize};

use super::kdtree::KdTree;
use super::twist::{twist_to_pose, TwistSystem};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::pointcloud::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpParams {
    pub max_iter: usize,
    /// Stop once the twist update norm drops below this.
    pub tol: f64,
    /// Correspondences farther apart than this (meters) are ignored.
    pub max_correspondence_distance: f64,
    /// Use every `subsample`-th source point.
    pub subsample: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tol: 1e-8,
            max_correspondence_distance: 2.0,
            subsample: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcpResult {
    /// Maps `cloud_a` coordinates into `cloud_b`.
    pub pose: Pose,
    pub iterations: usize,
    pub converged: bool,
    /// RMS correspondence distance at the last iteration.
    pub rmse: f64,
    pub correspondences: usize,
}

pub fn iterative_registration(
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    params: &IcpParams,
) -> Result<IcpResult> {
    iterative_registration_from(cloud_a, cloud_b, params, Pose::identity())
}

pub fn iterative_registration_from(
    cloud_a: &PointCloud,
    cloud_b: &PointCloud,
    params: &IcpParams,
    initial: Pose,
) -> Result<IcpResult> {
    if cloud_a.is_empty() || cloud_b.is_empty() {
        return Err(Error::InvalidInput("ICP needs two non-empty clouds".into()));
    }
    let tree = KdTree::build(&cloud_b.points);
    let source: Vec<_> = cloud_a
        .points
        .iter()
        .step_by(params.subsample.max(1))
        .collect();
    let gate = params.max_correspondence_distance * params.max_correspondence_distance;

    let mut pose = initial;
    let mut result = IcpResult {
        pose,
        iterations: 0,
        converged: false,
        rmse: f64::INFINITY,
        correspondences: 0,
    };
    for it in 1..=params.max_iter {
        let mut sys = TwistSystem::new();
        let mut sq = 0.0;
        for p in &source {
            let x = pose.apply(p);
            let Some((j, d2)) = tree.nearest(&x) else {
                continue;
            };
            if d2 <= gate {
                sys.accumulate_pair(&x, &cloud_b.points[j]);
                sq += d2;
            }
        }
        result.iterations = it;
        result.correspondences = sys.count;
        result.rmse = if sys.count > 0 {
            (sq / sys.count as f64).sqrt()
        } else {
            f64::INFINITY
        };
        let t = match sys.solve() {
            Ok(t) => t,
            Err(_) => break,
        };
        pose = twist_to_pose(&t).compose(&pose);
        result.pose = pose;
        if t.norm() < params.tol {
            result.converged = true;
            break;
        }
    }
    Ok(result)
}
