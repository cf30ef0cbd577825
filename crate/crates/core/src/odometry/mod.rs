//! Frame-to-frame motion from matched point pairs, plus pose bookkeeping.
//!
//! Estimators return the pose `E` with `E·xᵢ ≈ xᵢ₊₁`, i.e. it maps frame `i`
//! coordinates into frame `i+1`. Pose files store frame-to-world poses, so
//! the relative motion fed to [`accumulate_trajectory`] is `E⁻¹`.

pub mod icp;
pub mod kdtree;
pub mod ransac;
pub mod twist;

use nalgebra::{Matrix3, Vector3};

pub use icp::{iterative_registration, iterative_registration_from, IcpParams, IcpResult};
pub use kdtree::KdTree;
pub use ransac::{ransac_estimate, transfer_distances, RansacParams, RansacResult};
pub use twist::{fit_pose, fit_pose_all, solve_twist, twist_to_pose, TwistParams, TwistSystem};

use crate::error::{Error, Result};
use crate::geometry::{Pose, RecoveredQuaternion, UnitQuaternion};
use crate::keypoints::MkpSet;

pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.1;

/// Marks pairs whose transfer distance under `gt` is at most `threshold`.
pub fn label_mkps(mkps: &MkpSet, gt: &Pose, threshold: f64) -> Result<MkpSet> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidInput(
            "label threshold must be positive".into(),
        ));
    }
    let mut out = mkps.clone();
    out.labels = Some(
        transfer_distances(mkps, gt)
            .into_iter()
            .map(|d| u8::from(d <= threshold))
            .collect(),
    );
    Ok(out)
}

pub fn quat_from_pose(p: &Pose) -> UnitQuaternion {
    UnitQuaternion::from_pose(p)
}

pub fn quat_to_rotation(q: &UnitQuaternion) -> Matrix3<f64> {
    q.to_rotation()
}

pub fn quat_recover(vector_part: &Vector3<f64>) -> RecoveredQuaternion {
    UnitQuaternion::recover(vector_part)
}

/// Absolute frame-to-world poses; element 0 is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub timestamps: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Self {
        Self {
            poses,
            timestamps: None,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// `P_k⁻¹ P_{k+1}` for consecutive poses.
    pub fn relative(&self) -> Vec<Pose> {
        self.poses
            .windows(2)
            .map(|w| w[0].inverse().compose(&w[1]))
            .collect()
    }

    /// Cumulative distance travelled up to each pose.
    pub fn arc_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for (k, p) in self.poses.iter().enumerate() {
            if k > 0 {
                acc += (p.translation - self.poses[k - 1].translation).norm();
            }
            out.push(acc);
        }
        out
    }
}

pub fn accumulate_trajectory(relative: &[Pose]) -> Trajectory {
    let mut poses = Vec::with_capacity(relative.len() + 1);
    poses.push(Pose::identity());
    for r in relative {
        let last = *poses.last().expect("non-empty");
        poses.push(last.compose(r));
    }
    Trajectory::new(poses)
}
