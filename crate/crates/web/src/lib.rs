//! Browser demo: range images of a synthetic street, keypoint matching
//! between two frames, and RANSAC under injected outliers.

use lidar_odom::geometry::Pose;
use lidar_odom::keypoints::{extract_mkps, Frame};
use lidar_odom::odometry::{fit_pose_all, ransac_estimate, RansacParams};
use lidar_odom::pipeline::{build_scene, PipelineConfig};
use lidar_odom::projection::{depth_completion, histogram_equalize, project};
use lidar_odom::regression::synthetic_samples;
use lidar_odom::scene::SceneSpec;
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn js_err(e: lidar_odom::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[derive(Serialize)]
struct PoseError {
    rotation_deg: f64,
    translation_m: f64,
}

fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    let d = est.inverse().compose(gt);
    PoseError {
        rotation_deg: d.rotation_angle().to_degrees(),
        translation_m: d.translation.norm(),
    }
}

#[derive(Serialize)]
struct MatchLine {
    row_a: f64,
    col_a: f64,
    row_b: f64,
    col_b: f64,
}

#[derive(Serialize)]
struct MatchReport {
    keypoints_a: usize,
    keypoints_b: usize,
    matches: usize,
    fake_rejected: usize,
    mkps: usize,
    inliers: usize,
    error: PoseError,
    lines: Vec<MatchLine>,
}

#[derive(Serialize)]
struct RansacReport {
    pairs: usize,
    outliers: usize,
    inliers_found: usize,
    ransac: PoseError,
    least_squares: PoseError,
}

/// A synthetic street scanned along a straight, slightly turning path.
#[wasm_bindgen]
pub struct Demo {
    cfg: PipelineConfig,
    scene: SceneSpec,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsError> {
        let mut cfg = PipelineConfig::synthetic();
        cfg.set_seed(seed);
        cfg.synth.sequence.frames = 40;
        let scene = build_scene(&cfg).map_err(js_err)?;
        Ok(Demo { cfg, scene })
    }

    pub fn width(&self) -> usize {
        self.cfg.projection.width
    }

    pub fn height(&self) -> usize {
        self.cfg.projection.height
    }

    pub fn frames(&self) -> usize {
        self.cfg.synth.sequence.frames
    }

    fn sensor_pose(&self, frame: usize) -> Pose {
        let step = self.cfg.synth.sequence.step();
        (0..frame).fold(Pose::identity(), |p, _| p.compose(&step))
    }

    fn scan(&self, frame: usize) -> Result<lidar_odom::PointCloud, JsError> {
        let seed = self.cfg.synth.sequence.seed.wrapping_add(frame as u64);
        let scan = self
            .scene
            .at_frame(frame)
            .scan(seed, &self.sensor_pose(frame))
            .map_err(js_err)?;
        Ok(scan.cloud)
    }

    /// RGBA pixels of frame `frame`. `mode` is "raw" (sparse ranges),
    /// "completed" or "equalized".
    pub fn range_image(&self, frame: usize, mode: &str) -> Result<Vec<u8>, JsError> {
        let proj = &self.cfg.projection;
        let image = project(&self.scan(frame)?, proj).map_err(js_err)?;
        let gray: Vec<Option<u8>> = match mode {
            "raw" => image
                .depth
                .iter()
                .map(|&d| (d > 0.0).then(|| range_shade(d, proj.max_range)))
                .collect(),
            "completed" => depth_completion(&image)
                .map_err(js_err)?
                .depth
                .iter()
                .map(|&d| Some(range_shade(d, proj.max_range)))
                .collect(),
            "equalized" => {
                let c = depth_completion(&image).map_err(js_err)?;
                histogram_equalize(&c, proj)
                    .gray
                    .into_iter()
                    .map(Some)
                    .collect()
            }
            _ => return Err(JsError::new(&format!("unknown mode {mode:?}"))),
        };
        Ok(gray
            .into_iter()
            .flat_map(|g| match g {
                Some(v) => [v, v, v, 255],
                None => [40, 0, 60, 255],
            })
            .collect())
    }

    /// Matches frames `a` and `b`, estimates the motion with RANSAC and
    /// compares it against the ground truth. Returns JSON.
    pub fn match_frames(&self, a: usize, b: usize, max_lines: usize) -> Result<String, JsError> {
        let fa = Frame::prepare(self.scan(a)?, &self.cfg.projection, &self.cfg.detector)
            .map_err(js_err)?;
        let fb = Frame::prepare(self.scan(b)?, &self.cfg.projection, &self.cfg.detector)
            .map_err(js_err)?;
        let ex = extract_mkps(&fa, &fb, &self.cfg.matching, self.cfg.n_mkps).map_err(js_err)?;
        let est = ransac_estimate(&ex.mkps, &self.cfg.ransac).map_err(js_err)?;
        // Ground truth maps frame-a coordinates into frame b.
        let gt = self.sensor_pose(b).inverse().compose(&self.sensor_pose(a));
        let lines = ex
            .matches
            .iter()
            .take(max_lines)
            .map(|m| {
                let (ka, kb) = (&fa.keypoints[m.index_a], &fb.keypoints[m.index_b]);
                MatchLine {
                    row_a: ka.row,
                    col_a: ka.col,
                    row_b: kb.row,
                    col_b: kb.col,
                }
            })
            .collect();
        let report = MatchReport {
            keypoints_a: fa.keypoints.len(),
            keypoints_b: fb.keypoints.len(),
            matches: ex.total_matches,
            fake_rejected: ex.fake_rejected,
            mkps: ex.mkps.len(),
            inliers: est.inlier_count,
            error: pose_error(&est.pose, &gt),
            lines,
        };
        Ok(serde_json::to_string(&report).expect("report serializes"))
    }
}

fn range_shade(d: f64, max_range: f64) -> u8 {
    // Near is bright; square root spreads out the short ranges.
    (255.0 * (1.0 - (d / max_range).clamp(0.0, 1.0).sqrt())).round() as u8
}

/// RANSAC against a single least-squares fit on `pairs` synthetic MKPs
/// with the given outlier ratio. Returns JSON.
#[wasm_bindgen]
pub fn ransac_demo(
    pairs: usize,
    outlier_ratio: f64,
    threshold: f64,
    seed: u64,
) -> Result<String, JsError> {
    if !(0.0..1.0).contains(&outlier_ratio) || pairs < 3 {
        return Err(JsError::new(
            "need at least 3 pairs and an outlier ratio in [0, 1)",
        ));
    }
    let sample = synthetic_samples(1, pairs, outlier_ratio, seed).remove(0);
    let params = RansacParams {
        inlier_threshold: threshold,
        seed,
        ..RansacParams::default()
    };
    let r = ransac_estimate(&sample.mkps, &params).map_err(js_err)?;
    let ls = fit_pose_all(&sample.mkps).map_err(js_err)?;
    let outliers = sample
        .mkps
        .labels
        .as_ref()
        .map_or(0, |l| l.iter().filter(|&&v| v == 0).count());
    let report = RansacReport {
        pairs,
        outliers,
        inliers_found: r.inlier_count,
        ransac: pose_error(&r.pose, &sample.gt),
        least_squares: pose_error(&ls, &sample.gt),
    };
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ransac_beats_least_squares_with_outliers() {
        let json = ransac_demo(200, 0.3, 0.1, 4).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["outliers"], 60);
        let r = v["ransac"]["translation_m"].as_f64().unwrap();
        let ls = v["least_squares"]["translation_m"].as_f64().unwrap();
        assert!(r < 0.005 && r < ls, "{json}");
    }

    #[test]
    fn demo_images_and_matching() {
        let demo = Demo::new(2).unwrap();
        let n = demo.width() * demo.height() * 4;
        for mode in ["raw", "completed", "equalized"] {
            assert_eq!(demo.range_image(0, mode).unwrap().len(), n);
        }
        let v: serde_json::Value =
            serde_json::from_str(&demo.match_frames(0, 1, 50).unwrap()).unwrap();
        assert!(v["inliers"].as_u64().unwrap() >= 10, "{v}");
        assert!(v["error"]["rotation_deg"].as_f64().unwrap() < 0.2, "{v}");
        assert!(v["lines"].as_array().unwrap().len() <= 50);
    }
}
