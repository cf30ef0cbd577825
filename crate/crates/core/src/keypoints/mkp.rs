//! Matched keypoint pairs lifted back to 3D.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use super::matching::{match_descriptors, Match, MatchParams};
use super::sift::{detect_and_describe, DetectorParams, Keypoint};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic_str;
use crate::pointcloud::PointCloud;
use crate::projection::{
    back_project, depth_completion, histogram_equalize, project, CompletedImage, EqualizedImage,
    ProjectionConfig, SphericalImage,
};

/// `m × 6` matched point pairs `(xᵢ, yᵢ, zᵢ, xᵢ₊₁, yᵢ₊₁, zᵢ₊₁)` in meters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MkpSet {
    pub pairs: Vec<[f64; 6]>,
    pub weights: Option<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
}

impl MkpSet {
    pub fn new(pairs: Vec<[f64; 6]>) -> Self {
        Self {
            pairs,
            weights: None,
            labels: None,
        }
    }

    pub fn from_points(pairs: impl IntoIterator<Item = (Vector3<f64>, Vector3<f64>)>) -> Self {
        Self::new(
            pairs
                .into_iter()
                .map(|(a, b)| [a[0], a[1], a[2], b[0], b[1], b[2]])
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn left(&self, i: usize) -> Vector3<f64> {
        let p = &self.pairs[i];
        Vector3::new(p[0], p[1], p[2])
    }

    pub fn right(&self, i: usize) -> Vector3<f64> {
        let p = &self.pairs[i];
        Vector3::new(p[3], p[4], p[5])
    }

    /// Rows at `indices`, carrying weights and labels along.
    pub fn select(&self, indices: &[usize]) -> MkpSet {
        MkpSet {
            pairs: indices.iter().map(|&i| self.pairs[i]).collect(),
            weights: self
                .weights
                .as_ref()
                .map(|w| indices.iter().map(|&i| w[i]).collect()),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pairs.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput("non-finite MKP coordinate".into()));
        }
        if let Some(w) = &self.weights {
            if w.len() != self.len() || w.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(
                    "weights must be m values in [0,1]".into(),
                ));
            }
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() || l.iter().any(|&v| v > 1) {
                return Err(Error::InvalidInput(
                    "labels must be m values in {0,1}".into(),
                ));
            }
        }
        Ok(())
    }

    /// CSV with header `xi,yi,zi,xj,yj,zj[,weight,label]`. Floats are
    /// written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let extra = self.weights.is_some() || self.labels.is_some();
        let mut out = String::from("xi,yi,zi,xj,yj,zj");
        if extra {
            out.push_str(",weight,label");
        }
        out.push('\n');
        for (i, p) in self.pairs.iter().enumerate() {
            let cols: Vec<String> = p.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&cols.join(","));
            if extra {
                let w = self
                    .weights
                    .as_ref()
                    .map_or(String::new(), |w| format!("{:?}", w[i]));
                let l = self
                    .labels
                    .as_ref()
                    .map_or(String::new(), |l| l[i].to_string());
                let _ = write!(out, ",{w},{l}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty MKP file".into()))?;
        let extra = match header.trim() {
            "xi,yi,zi,xj,yj,zj" => false,
            "xi,yi,zi,xj,yj,zj,weight,label" => true,
            other => return Err(Error::Format(format!("unexpected MKP header `{other}`"))),
        };
        let mut set = MkpSet::default();
        let mut weights = Vec::new();
        let mut labels = Vec::new();
        let (mut any_w, mut any_l) = (false, false);
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let expected = if extra { 8 } else { 6 };
            if fields.len() != expected {
                return Err(Error::Format(format!(
                    "line {}: expected {expected} fields, found {}",
                    n + 1,
                    fields.len()
                )));
            }
            let mut row = [0.0; 6];
            for (k, f) in fields[..6].iter().enumerate() {
                row[k] = f
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad number `{f}`", n + 1)))?;
            }
            set.pairs.push(row);
            if extra {
                if !fields[6].is_empty() {
                    any_w = true;
                    weights.push(fields[6].parse().map_err(|_| {
                        Error::Format(format!("line {}: bad weight `{}`", n + 1, fields[6]))
                    })?);
                } else {
                    weights.push(0.0);
                }
                if !fields[7].is_empty() {
                    any_l = true;
                    labels.push(fields[7].parse().map_err(|_| {
                        Error::Format(format!("line {}: bad label `{}`", n + 1, fields[7]))
                    })?);
                } else {
                    labels.push(0);
                }
            }
        }
        let keep = |any: bool| extra && (any || set.pairs.is_empty());
        set.weights = keep(any_w).then_some(weights);
        set.labels = keep(any_l).then_some(labels);
        set.validate()?;
        Ok(set)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic_str(path, &self.to_csv())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }
}

/// A scan with its range images and keypoints, ready for matching.
#[derive(Debug, Clone)]
pub struct Frame {
    pub cloud: PointCloud,
    pub image: SphericalImage,
    pub completed: CompletedImage,
    pub equalized: EqualizedImage,
    pub keypoints: Vec<Keypoint>,
}

impl Frame {
    pub fn prepare(
        cloud: PointCloud,
        projection: &ProjectionConfig,
        detector: &DetectorParams,
    ) -> Result<Frame> {
        let image = project(&cloud, projection)?;
        let completed = depth_completion(&image)?;
        let equalized = histogram_equalize(&completed, projection);
        let keypoints = detect_and_describe(&equalized, detector)?;
        Ok(Frame {
            cloud,
            image,
            completed,
            equalized,
            keypoints,
        })
    }

    /// Integer pixel of keypoint `i`.
    pub fn keypoint_pixel(&self, i: usize) -> (usize, usize) {
        self.keypoints[i].pixel(self.image.height, self.image.width)
    }

    /// Source point behind keypoint `i`, if its pixel held a real return.
    pub fn keypoint_point(&self, i: usize) -> Option<Vector3<f64>> {
        back_project(&self.image, self.keypoint_pixel(i), &self.cloud)
    }
}

/// Outcome of pairing two frames.
#[derive(Debug, Clone)]
pub struct MkpExtraction {
    pub mkps: MkpSet,
    /// Matches backing each MKP row, in row order.
    pub matches: Vec<Match>,
    pub total_matches: usize,
    /// Matches dropped because a side landed on a completion-filled pixel.
    pub fake_rejected: usize,
    /// `requested − emitted` when fewer real matches than requested exist.
    pub shortfall: usize,
}

/// Matches two prepared frames and keeps the `n` best real matches.
pub fn extract_mkps(
    frame_i: &Frame,
    frame_j: &Frame,
    params: &MatchParams,
    n: usize,
) -> Result<MkpExtraction> {
    if frame_i.image.height != frame_j.image.height || frame_i.image.width != frame_j.image.width {
        return Err(Error::InvalidInput(
            "frames were projected with different image sizes".into(),
        ));
    }
    let params = MatchParams {
        image_width: frame_i.image.width,
        ..*params
    };
    let matches = match_descriptors(&frame_i.keypoints, &frame_j.keypoints, &params);
    let total_matches = matches.len();
    let mut kept = Vec::new();
    let mut pairs = Vec::new();
    let mut fake_rejected = 0;
    for m in matches {
        if kept.len() == n {
            break;
        }
        match (
            frame_i.keypoint_point(m.index_a),
            frame_j.keypoint_point(m.index_b),
        ) {
            (Some(a), Some(b)) => {
                pairs.push((a, b));
                kept.push(m);
            }
            _ => fake_rejected += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::DegenerateFramePair);
    }
    Ok(MkpExtraction {
        mkps: MkpSet::from_points(pairs),
        shortfall: n.saturating_sub(kept.len()),
        matches: kept,
        total_matches,
        fake_rejected,
    })
}
