//! Robust pose selection over MKPs.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::twist::fit_pose;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::keypoints::MkpSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Meters, compared against the transfer distance of each pair.
    pub inlier_threshold: f64,
    /// Capped at the number of pairs, so a minimal 3-pair set can succeed.
    pub min_inliers: usize,
    pub seed: u64,
    /// Refit-and-rescore rounds after the best hypothesis is found.
    pub refit_rounds: usize,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 0.1,
            min_inliers: 10,
            seed: 0,
            refit_rounds: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RansacResult {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
}

/// `‖R xᵢ + T − xᵢ₊₁‖` for every pair.
pub fn transfer_distances(mkps: &MkpSet, pose: &Pose) -> Vec<f64> {
    (0..mkps.len())
        .map(|i| (pose.apply(&mkps.left(i)) - mkps.right(i)).norm())
        .collect()
}

/// Inlier count and truncated squared cost; lower cost breaks count ties.
fn score(mkps: &MkpSet, pose: &Pose, threshold: f64) -> (usize, f64) {
    let t2 = threshold * threshold;
    let mut count = 0;
    let mut cost = 0.0;
    for i in 0..mkps.len() {
        let d2 = (pose.apply(&mkps.left(i)) - mkps.right(i)).norm_squared();
        if d2 <= t2 {
            count += 1;
            cost += d2;
        } else {
            cost += t2;
        }
    }
    (count, cost)
}

fn mask(mkps: &MkpSet, pose: &Pose, threshold: f64) -> Vec<bool> {
    transfer_distances(mkps, pose)
        .into_iter()
        .map(|d| d <= threshold)
        .collect()
}

/// Sample of iteration `k`. Each iteration draws from its own ChaCha stream,
/// so the hypotheses do not depend on evaluation order.
fn minimal_sample(seed: u64, k: usize, m: usize) -> [usize; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let s = sample(&mut rng, m, 3);
    [s.index(0), s.index(1), s.index(2)]
}

pub fn ransac_estimate(mkps: &MkpSet, params: &RansacParams) -> Result<RansacResult> {
    let m = mkps.len();
    if m < 3 {
        return Err(Error::InvalidInput(format!(
            "RANSAC needs at least 3 pairs, got {m}"
        )));
    }
    if !(params.inlier_threshold > 0.0) {
        return Err(Error::InvalidInput(
            "inlier threshold must be positive".into(),
        ));
    }
    let required = params.min_inliers.min(m).max(3);

    let mut best: Option<(Pose, usize, f64)> = None;
    for k in 0..params.iterations {
        let idx = minimal_sample(params.seed, k, m);
        let Ok(pose) = fit_pose(mkps, &idx) else {
            continue;
        };
        let (count, cost) = score(mkps, &pose, params.inlier_threshold);
        let better = match &best {
            None => true,
            Some((_, c, s)) => count > *c || (count == *c && cost < *s),
        };
        if better {
            best = Some((pose, count, cost));
        }
    }
    let Some((mut pose, count, _)) = best else {
        return Err(Error::RobustFailure { best: 0, required });
    };
    if count < required {
        return Err(Error::RobustFailure {
            best: count,
            required,
        });
    }

    let mut inliers = mask(mkps, &pose, params.inlier_threshold);
    for _ in 0..params.refit_rounds {
        let idx: Vec<usize> = (0..m).filter(|&i| inliers[i]).collect();
        let Ok(refit) = fit_pose(mkps, &idx) else {
            break;
        };
        let refit_mask = mask(mkps, &refit, params.inlier_threshold);
        let n = refit_mask.iter().filter(|&&b| b).count();
        if n < required {
            break;
        }
        let stable = refit_mask == inliers;
        pose = refit;
        inliers = refit_mask;
        if stable {
            break;
        }
    }
    let inlier_count = inliers.iter().filter(|&&b| b).count();
    Ok(RansacResult {
        pose,
        inliers,
        inlier_count,
    })
}
