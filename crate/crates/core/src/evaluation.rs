//! KITTI-style odometry metrics, pose files and trajectory plot export.
//!
//! # Segment metric
//!
//! For every start frame `i` and every length `L ∈ {100, 200, …, 800}` m,
//! the segment ends at the first frame `j` whose ground-truth arc length
//! reaches `dist[i] + L`. With `ΔG = G_i⁻¹ G_j` and `ΔE = E_i⁻¹ E_j`, the
//! segment error is `ΔE⁻¹ ΔG`; its translation norm divided by `L` is the
//! translational error and its rotation angle divided by `L` the rotational
//! error. `t_rel` (%) and `r_rel` (°/100 m) average these over every segment
//! that fits inside the sequence. Arc lengths come from the ground truth
//! only, so estimation errors never change which segments are evaluated.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic_str;
use crate::geometry::Pose;
use crate::odometry::Trajectory;

pub const SEGMENT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// Published KITTI sequence 09 figures (t_rel %, r_rel °/100 m) of the
/// learned MKP pipeline. Only reachable with the real dataset and trained
/// networks; kept for reference, never used as a gate.
pub const REFERENCE_SEQ09: (f64, f64) = (0.63, 0.35);

/// Rotation blocks deviating from orthonormal by more than this are reported.
pub const ORTHONORMALITY_WARNING: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub length: f64,
    pub segments: usize,
    /// Percent.
    pub t_rel: f64,
    /// Degrees per 100 m.
    pub r_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Average translational error over all segments, percent.
    pub t_rel: f64,
    /// Average rotational error over all segments, degrees per 100 m.
    pub r_rel: f64,
    /// One entry per segment length that fits in the sequence.
    pub breakdown: Vec<LengthStats>,
    pub frames: usize,
    /// Ground-truth path length in meters.
    pub path_length: f64,
    /// Set when no 100 m segment fits; `t_rel` and `r_rel` are then 0.
    pub short_path: bool,
    /// Mean and worst per-frame relative rotation error, degrees.
    pub rpe_rotation_mean_deg: f64,
    pub rpe_rotation_max_deg: f64,
    /// Mean per-frame relative translation error, meters.
    pub rpe_translation_mean: f64,
    /// `‖t_est − t_gt‖` at the last frame, meters.
    pub final_translation_error: f64,
}

impl EvalReport {
    /// Final-pose translation error as a percentage of the path length.
    pub fn final_translation_percent(&self) -> f64 {
        if self.path_length > 0.0 {
            100.0 * self.final_translation_error / self.path_length
        } else {
            0.0
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with one row per segment length and an average row.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>10}  {:>10}  {:>16}  {:>9}",
            "length(m)", "t_rel(%)", "r_rel(deg/100m)", "segments"
        );
        for b in &self.breakdown {
            let _ = writeln!(
                s,
                "{:>10.0}  {:>10.4}  {:>16.4}  {:>9}",
                b.length, b.t_rel, b.r_rel, b.segments
            );
        }
        let total: usize = self.breakdown.iter().map(|b| b.segments).sum();
        let _ = writeln!(
            s,
            "{:>10}  {:>10.4}  {:>16.4}  {:>9}",
            "average", self.t_rel, self.r_rel, total
        );
        let _ = writeln!(
            s,
            "frames {}  path {:.2} m  rpe rot mean {:.4} deg  max {:.4} deg  final trans err {:.4} m ({:.3}%){}",
            self.frames,
            self.path_length,
            self.rpe_rotation_mean_deg,
            self.rpe_rotation_max_deg,
            self.final_translation_error,
            self.final_translation_percent(),
            if self.short_path { "  [short path: no 100 m segment]" } else { "" }
        );
        s
    }
}

/// First frame at or beyond `dist[first] + length`, if any.
fn segment_end(dist: &[f64], first: usize, length: f64) -> Option<usize> {
    let target = dist[first] + length;
    (first + 1..dist.len()).find(|&j| dist[j] >= target)
}

pub fn kitti_metrics(est: &Trajectory, gt: &Trajectory) -> Result<EvalReport> {
    if est.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "trajectory lengths differ: {} estimated vs {} ground truth",
            est.len(),
            gt.len()
        )));
    }
    if gt.len() < 2 {
        return Err(Error::InvalidInput("need at least two poses".into()));
    }
    let dist = gt.arc_lengths();
    let path_length = *dist.last().expect("non-empty");

    let mut breakdown = Vec::new();
    let (mut t_sum, mut r_sum, mut n_all) = (0.0, 0.0, 0usize);
    for &length in &SEGMENT_LENGTHS {
        let (mut t_len, mut r_len, mut n) = (0.0, 0.0, 0usize);
        for first in 0..gt.len() {
            let Some(last) = segment_end(&dist, first, length) else {
                continue;
            };
            let dg = gt.poses[first].inverse().compose(&gt.poses[last]);
            let de = est.poses[first].inverse().compose(&est.poses[last]);
            let err = de.inverse().compose(&dg);
            t_len += err.translation.norm() / length;
            r_len += err.rotation_angle() / length;
            n += 1;
        }
        if n > 0 {
            breakdown.push(LengthStats {
                length,
                segments: n,
                t_rel: 100.0 * t_len / n as f64,
                r_rel: (r_len / n as f64).to_degrees() * 100.0,
            });
            t_sum += t_len;
            r_sum += r_len;
            n_all += n;
        }
    }

    let gt_rel = gt.relative();
    let est_rel = est.relative();
    let (mut rot_sum, mut rot_max, mut trans_sum) = (0.0, 0.0_f64, 0.0);
    for (e, g) in est_rel.iter().zip(&gt_rel) {
        let d = e.inverse().compose(g);
        let a = d.rotation_angle().to_degrees();
        rot_sum += a;
        rot_max = rot_max.max(a);
        trans_sum += d.translation.norm();
    }
    let steps = gt_rel.len() as f64;
    let last = gt.len() - 1;

    Ok(EvalReport {
        t_rel: if n_all > 0 {
            100.0 * t_sum / n_all as f64
        } else {
            0.0
        },
        r_rel: if n_all > 0 {
            (r_sum / n_all as f64).to_degrees() * 100.0
        } else {
            0.0
        },
        breakdown,
        frames: gt.len(),
        path_length,
        short_path: n_all == 0,
        rpe_rotation_mean_deg: rot_sum / steps,
        rpe_rotation_max_deg: rot_max,
        rpe_translation_mean: trans_sum / steps,
        final_translation_error: (est.poses[last].translation - gt.poses[last].translation).norm(),
    })
}

/// A frame whose rotation block is noticeably non-orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseWarning {
    pub frame: usize,
    pub error: f64,
}

/// Parses KITTI pose lines (12 row-major floats of `[R | t]`). Blank lines
/// are skipped.
pub fn parse_poses(text: &str) -> Result<(Trajectory, Vec<PoseWarning>)> {
    let mut poses = Vec::new();
    let mut warnings = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        let vals: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| {
            Error::Format(format!(
                "line {}: expected 12 values, found {}",
                n + 1,
                v.len()
            ))
        })?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("line {}: non-finite value", n + 1)));
        }
        let pose = Pose::from_row_major_3x4(&vals);
        let error = pose.orthonormality_error();
        if error > ORTHONORMALITY_WARNING {
            warnings.push(PoseWarning {
                frame: poses.len(),
                error,
            });
        }
        poses.push(pose);
    }
    Ok((Trajectory::new(poses), warnings))
}

/// Reads a pose file, logging a warning for every non-orthonormal frame.
pub fn read_pose_file(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (traj, warnings) = parse_poses(&text)?;
    for w in &warnings {
        warn!(
            "{}: frame {} rotation deviates from orthonormal by {:.3e}",
            path.display(),
            w.frame,
            w.error
        );
    }
    Ok(traj)
}

/// Formats poses with shortest round-trip float representations.
pub fn format_poses(traj: &Trajectory) -> String {
    let mut s = String::new();
    for p in &traj.poses {
        let vals = p.to_row_major_3x4();
        let line: Vec<String> = vals.iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

pub fn write_pose_file(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    write_atomic_str(path.as_ref(), &format_poses(traj))
}

pub fn write_report(report: &EvalReport, json_path: &Path, table_path: &Path) -> Result<()> {
    write_atomic_str(json_path, &report.to_json())?;
    write_atomic_str(table_path, &report.to_table())
}

/// CSV and SVG renderings of one or more trajectories.
#[derive(Debug, Clone)]
pub struct TrajectoryPlot {
    /// `trajectory,frame,x,z` rows.
    pub csv: String,
    pub svg: String,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Picks a 1-2-5 step close to a fifth of `span`.
fn nice_step(span: f64) -> f64 {
    let raw = (span / 5.0).max(1e-9);
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let m = if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    };
    m * mag
}

/// Top-down (x, z) plot in the KITTI ground plane.
pub fn export_trajectory_plot(trajs: &[(&str, &Trajectory)]) -> Result<TrajectoryPlot> {
    if trajs.is_empty() {
        return Err(Error::InvalidInput("nothing to plot".into()));
    }
    let mut csv = String::from("trajectory,frame,x,z\n");
    for (name, t) in trajs {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::InvalidInput(format!(
                "trajectory name {name:?} contains a separator"
            )));
        }
        for (k, p) in t.poses.iter().enumerate() {
            let _ = writeln!(
                csv,
                "{name},{k},{:?},{:?}",
                p.translation[0], p.translation[2]
            );
        }
    }

    let pts = || {
        trajs
            .iter()
            .flat_map(|(_, t)| t.poses.iter().map(|p| (p.translation[0], p.translation[2])))
    };
    let (mut x0, mut x1, mut z0, mut z1) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
    for (x, z) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        z0 = z0.min(z);
        z1 = z1.max(z);
    }
    let span = (x1 - x0).max(z1 - z0).max(1.0);
    let (cx, cz) = ((x0 + x1) / 2.0, (z0 + z1) / 2.0);
    let (size, margin) = (480.0, 40.0);
    let scale = (size - 2.0 * margin) / span;
    let to_px = |x: f64, z: f64| (size / 2.0 + (x - cx) * scale, size / 2.0 - (z - cz) * scale);

    let legend_h = 18.0 * trajs.len() as f64 + 8.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" viewBox="0 0 {size} {}" font-family="sans-serif" font-size="12">"#,
        size + legend_h,
        size + legend_h
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<rect x="{margin}" y="{margin}" width="{w}" height="{w}" fill="none" stroke="#bbb"/>"##,
        w = size - 2.0 * margin
    );

    let step = nice_step(span);
    let bar = step * scale;
    let _ = writeln!(
        svg,
        r#"<g class="scale"><line x1="{margin}" y1="{y}" x2="{x2}" y2="{y}" stroke="black" stroke-width="2"/><text x="{margin}" y="{ty}">{step} m</text></g>"#,
        y = size - margin / 2.0,
        x2 = margin + bar,
        ty = size - margin / 2.0 - 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end">x (m)</text>"#,
        size - margin,
        size - margin / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}">z (m)</text>"#,
        margin / 4.0,
        margin - 6.0
    );

    for (i, (name, t)) in trajs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = t
            .poses
            .iter()
            .map(|p| {
                let (u, v) = to_px(p.translation[0], p.translation[2]);
                format!("{u:.2},{v:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline data-name="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            xml_escape(name),
            points.join(" ")
        );
        let ly = size + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<g class="legend"><rect x="{margin}" y="{}" width="12" height="12" fill="{color}"/><text x="{}" y="{ly}">{}</text></g>"#,
            ly - 10.0,
            margin + 18.0,
            xml_escape(name)
        );
    }
    svg.push_str("</svg>\n");
    Ok(TrajectoryPlot { csv, svg })
}

/// Writes `<stem>.csv` and `<stem>.svg` into `dir`.
pub fn write_trajectory_plot(plot: &TrajectoryPlot, dir: &Path, stem: &str) -> Result<()> {
    write_atomic_str(&dir.join(format!("{stem}.csv")), &plot.csv)?;
    write_atomic_str(&dir.join(format!("{stem}.svg")), &plot.svg)
}
