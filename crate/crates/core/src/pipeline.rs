//! Config-driven runs: synthetic data generation, odometry over a scan
//! directory, training and evaluation.
//!
//! Scan directories hold KITTI `.bin` files processed in file-name order.
//! Pose files follow the KITTI layout (frame-to-world `[R | t]` per line).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{kitti_metrics, read_pose_file, write_pose_file, EvalReport};
use crate::fsutil::write_atomic_str;
use crate::geometry::Pose;
use crate::keypoints::{extract_mkps, DetectorParams, Frame, MatchParams, MkpSet};
use crate::odometry::{
    accumulate_trajectory, iterative_registration, label_mkps, ransac_estimate, IcpParams,
    RansacParams, Trajectory, DEFAULT_LABEL_THRESHOLD,
};
use crate::pointcloud::{load_kitti_scan, write_kitti_scan, PointCloud};
use crate::projection::ProjectionConfig;
use crate::regression::{
    load_checkpoint, loss_curve_csv, save_checkpoint, train, MlpSpec, TrainConfig, TrainOutcome,
    TrainSample,
};
use crate::scene::{synth_sequence, urban_scene, SceneSpec, SequenceConfig};

/// Frames prepared together before their pairs are estimated.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    #[default]
    ClosedFormRansac,
    IcpBaseline,
    Neural,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::ClosedFormRansac => "closed_form_ransac",
            Estimator::IcpBaseline => "icp_baseline",
            Estimator::Neural => "neural",
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form_ransac" => Ok(Estimator::ClosedFormRansac),
            "icp_baseline" => Ok(Estimator::IcpBaseline),
            "neural" => Ok(Estimator::Neural),
            _ => Err(Error::Config(format!(
                "unknown estimator {s:?} (expected closed_form_ransac, icp_baseline or neural)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Directory of KITTI `.bin` scans.
    pub scans_dir: Option<PathBuf>,
    /// Ground-truth pose file; enables metrics when set.
    pub poses: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Checkpoint path without extension (`<path>.json` + `<path>.bin`).
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Seed of the procedural street layout.
    pub scene_seed: u64,
    /// Optional TOML scene file replacing the procedural street.
    pub scene_file: Option<PathBuf>,
    pub sensor_height: f64,
    pub sequence: SequenceConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene_seed: 1,
            scene_file: None,
            sensor_height: 1.73,
            sequence: SequenceConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub estimator: Estimator,
    /// MKPs kept per frame pair.
    pub n_mkps: usize,
    /// Pairs kept by the selection network.
    pub select_k: usize,
    /// Transfer distance (m) below which a pair is labelled static.
    pub label_threshold: f64,
    /// Abort on the first failing frame pair instead of substituting identity.
    pub strict: bool,
    pub projection: ProjectionConfig,
    pub detector: DetectorParams,
    pub matching: MatchParams,
    pub ransac: RansacParams,
    pub icp: IcpParams,
    pub network: MlpSpec,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            estimator: Estimator::default(),
            n_mkps: 1000,
            select_k: 100,
            label_threshold: DEFAULT_LABEL_THRESHOLD,
            strict: false,
            projection: ProjectionConfig::default(),
            detector: DetectorParams::default(),
            matching: MatchParams::default(),
            ransac: RansacParams::default(),
            icp: IcpParams {
                subsample: 4,
                ..IcpParams::default()
            },
            network: MlpSpec::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            paths: PathsConfig {
                output_dir: PathBuf::from("out"),
                ..PathsConfig::default()
            },
        }
    }
}

impl PipelineConfig {
    /// Defaults tuned for the synthetic street: a 2× upsampled first octave
    /// and a low contrast threshold, since the smooth synthetic surfaces
    /// produce far fewer strong extrema than real scans.
    pub fn synthetic() -> Self {
        let mut cfg = Self::default();
        cfg.detector.upsample = true;
        cfg.detector.contrast_threshold = 0.001;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Overrides every seed (scene, scans, RANSAC, training).
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.scene_seed = seed;
        self.synth.sequence.seed = seed;
        self.ransac.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if !(self.n_mkps >= self.select_k && self.select_k >= 3) {
            return Err(Error::Config(format!(
                "need n_mkps >= select_k >= 3, got n_mkps = {} and select_k = {}",
                self.n_mkps, self.select_k
            )));
        }
        if !(self.label_threshold > 0.0) {
            return Err(Error::Config("label_threshold must be positive".into()));
        }
        if !(self.ransac.inlier_threshold > 0.0) || self.ransac.iterations == 0 {
            return Err(Error::Config(
                "ransac needs iterations > 0 and inlier_threshold > 0".into(),
            ));
        }
        if self.detector.octaves == 0 || self.detector.scales_per_octave == 0 {
            return Err(Error::Config(
                "detector needs at least one octave and one scale".into(),
            ));
        }
        Ok(())
    }
}

fn require_dir(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path
        .clone()
        .ok_or_else(|| Error::Config(format!("paths.{what} is not set")))?;
    if !p.is_dir() {
        return Err(Error::io(
            &p,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        ));
    }
    Ok(p)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `.bin` files of `dir`, sorted by name.
pub fn list_scans(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    out.sort();
    Ok(out)
}

/// Written by [`run_synth`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub scans_dir: PathBuf,
    pub poses: PathBuf,
    pub config: PathBuf,
    pub frames: usize,
}

pub fn build_scene(cfg: &PipelineConfig) -> Result<SceneSpec> {
    let mut scene = match &cfg.synth.scene_file {
        Some(p) => SceneSpec::load(p)?,
        None => {
            let seq = &cfg.synth.sequence;
            let length = seq.frames as f64 * seq.forward.abs().max(seq.lateral.abs());
            urban_scene(cfg.synth.scene_seed, length, cfg.synth.sensor_height)
        }
    };
    scene.scanner.projection = cfg.projection;
    scene.validate()?;
    Ok(scene)
}

/// Scans the synthetic scene along the configured motion and writes
/// `scans/NNNNNN.bin`, `poses.txt` and a `config.toml` pointing at both.
pub fn run_synth(cfg: &PipelineConfig, out: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    let scene = build_scene(cfg)?;
    let seq = synth_sequence(&scene, &cfg.synth.sequence)?;
    let scans_dir = out.join("scans");
    create_dir(&scans_dir)?;
    for (k, scan) in seq.scans.iter().enumerate() {
        write_kitti_scan(&scan.cloud, scans_dir.join(format!("{k:06}.bin")))?;
    }
    let poses = out.join("poses.txt");
    write_pose_file(&Trajectory::new(seq.poses.clone()), &poses)?;

    let mut next = cfg.clone();
    next.paths.scans_dir = Some(scans_dir.clone());
    next.paths.poses = Some(poses.clone());
    next.paths.output_dir = out.join("run");
    let config = out.join("config.toml");
    write_atomic_str(&config, &next.to_toml())?;
    info!("wrote {} scans to {}", seq.scans.len(), scans_dir.display());
    Ok(SynthOutput {
        scans_dir,
        poses,
        config,
        frames: seq.scans.len(),
    })
}

/// Per-pair record of an odometry run.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLog {
    /// Index of the later frame of the pair.
    pub frame: usize,
    pub mkps: usize,
    pub inliers: usize,
    /// `None` on success, otherwise the error that forced an identity step.
    pub failure: Option<String>,
    pub prepare_ms: f64,
    pub estimate_ms: f64,
}

#[derive(Debug, Clone)]
pub struct OdometryRun {
    pub trajectory: Trajectory,
    pub log: Vec<FrameLog>,
    pub report: Option<EvalReport>,
}

impl OdometryRun {
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("frame,mkps,inliers,status,prepare_ms,estimate_ms\n");
        for l in &self.log {
            let status = l.failure.as_deref().map_or("ok".to_string(), |e| {
                format!("failed: {}", e.replace(',', ";"))
            });
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3},{:.3}",
                l.frame, l.mkps, l.inliers, status, l.prepare_ms, l.estimate_ms
            );
        }
        s
    }
}

/// What an estimator needs from a frame.
struct Prepared {
    frame: Option<Frame>,
    cloud: PointCloud,
    ms: f64,
}

/// Estimates the pose mapping frame `a` coordinates into frame `b`, plus
/// the MKP and inlier counts behind it.
struct Estimate {
    pose: Pose,
    mkps: usize,
    inliers: usize,
}

/// Everything `estimate_pair` needs besides the two frames.
pub struct Estimation<'a> {
    pub cfg: &'a PipelineConfig,
    pub model: Option<&'a crate::regression::RegressionModel>,
}

fn estimate_pair(ctx: &Estimation, a: &Prepared, b: &Prepared) -> Result<Estimate> {
    let cfg = ctx.cfg;
    match cfg.estimator {
        Estimator::IcpBaseline => {
            let r = iterative_registration(&a.cloud, &b.cloud, &cfg.icp)?;
            if !r.converged {
                warn!(
                    "ICP did not converge in {} iterations (rmse {:.3})",
                    r.iterations, r.rmse
                );
            }
            Ok(Estimate {
                pose: r.pose,
                mkps: 0,
                inliers: r.correspondences,
            })
        }
        Estimator::ClosedFormRansac | Estimator::Neural => {
            let (fa, fb) = (
                a.frame.as_ref().expect("prepared"),
                b.frame.as_ref().expect("prepared"),
            );
            let ex = extract_mkps(fa, fb, &cfg.matching, cfg.n_mkps)?;
            if ex.shortfall > 0 {
                log::debug!(
                    "{} of {} requested MKPs available",
                    ex.mkps.len(),
                    cfg.n_mkps
                );
            }
            if cfg.estimator == Estimator::Neural {
                let model = ctx
                    .model
                    .ok_or_else(|| Error::Config("neural estimator needs a checkpoint".into()))?;
                let (pose, clamped) = model.estimate(&ex.mkps, cfg.select_k)?;
                if clamped {
                    warn!("rotation output left the unit ball and was clamped");
                }
                return Ok(Estimate {
                    pose,
                    mkps: ex.mkps.len(),
                    inliers: cfg.select_k.min(ex.mkps.len()),
                });
            }
            let r = ransac_estimate(&ex.mkps, &cfg.ransac)?;
            Ok(Estimate {
                pose: r.pose,
                mkps: ex.mkps.len(),
                inliers: r.inlier_count,
            })
        }
    }
}

fn prepare(cloud: PointCloud, cfg: &PipelineConfig) -> Result<Prepared> {
    let t = Instant::now();
    let frame = match cfg.estimator {
        Estimator::IcpBaseline => None,
        _ => Some(Frame::prepare(
            cloud.clone(),
            &cfg.projection,
            &cfg.detector,
        )?),
    };
    Ok(Prepared {
        frame,
        cloud,
        ms: t.elapsed().as_secs_f64() * 1e3,
    })
}

/// Frame-to-frame odometry over in-memory clouds. Returns the trajectory
/// (frame 0 at the identity) and one log entry per pair.
pub fn odometry_on_clouds(
    clouds: Vec<PointCloud>,
    cfg: &PipelineConfig,
    model: Option<&crate::regression::RegressionModel>,
) -> Result<(Trajectory, Vec<FrameLog>)> {
    cfg.validate()?;
    if clouds.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 scans, got {}",
            clouds.len()
        )));
    }
    if cfg.estimator == Estimator::Neural && model.is_none() {
        return Err(Error::Config("neural estimator needs a checkpoint".into()));
    }
    let ctx = Estimation { cfg, model };
    let mut relative = Vec::with_capacity(clouds.len() - 1);
    let mut log = Vec::with_capacity(clouds.len() - 1);
    let mut pending = clouds.into_iter().enumerate().peekable();
    // `frames[0]` is frame `base`; the last frame of a chunk is carried over
    // so pairs straddling chunk boundaries are estimated too.
    let mut frames: Vec<Option<Prepared>> = Vec::new();
    let mut base = 0;
    while pending.peek().is_some() {
        let batch: Vec<(usize, PointCloud)> = pending.by_ref().take(CHUNK).collect();
        let prepared: Vec<(usize, Result<Prepared>)> = batch
            .into_par_iter()
            .map(|(k, c)| (k, prepare(c, cfg)))
            .collect();
        for (k, p) in prepared {
            frames.push(match p {
                Ok(p) => Some(p),
                Err(e) if cfg.strict => return Err(frame_error(k, e)),
                Err(e) => {
                    warn!("frame {k}: {e}");
                    None
                }
            });
        }
        let results: Vec<(f64, Result<Estimate>)> = (0..frames.len() - 1)
            .into_par_iter()
            .map(|i| {
                let t = Instant::now();
                let r = match (&frames[i], &frames[i + 1]) {
                    (Some(a), Some(b)) => estimate_pair(&ctx, a, b),
                    _ => Err(Error::InvalidInput("scan could not be prepared".into())),
                };
                (t.elapsed().as_secs_f64() * 1e3, r)
            })
            .collect();
        for (i, (ms, r)) in results.into_iter().enumerate() {
            let frame = base + i + 1;
            let prepare_ms = frames[i + 1].as_ref().map_or(0.0, |f| f.ms);
            let entry = match r {
                Ok(est) => {
                    relative.push(est.pose.inverse());
                    FrameLog {
                        frame,
                        mkps: est.mkps,
                        inliers: est.inliers,
                        failure: None,
                        prepare_ms,
                        estimate_ms: ms,
                    }
                }
                Err(e) if cfg.strict => return Err(frame_error(frame, e)),
                Err(e) => {
                    warn!("frame {frame}: {e}; substituting identity motion");
                    relative.push(Pose::identity());
                    FrameLog {
                        frame,
                        mkps: 0,
                        inliers: 0,
                        failure: Some(e.to_string()),
                        prepare_ms,
                        estimate_ms: ms,
                    }
                }
            };
            log.push(entry);
        }
        base += frames.len() - 1;
        frames.drain(..frames.len() - 1);
    }
    Ok((accumulate_trajectory(&relative), log))
}

fn frame_error(frame: usize, e: Error) -> Error {
    Error::Frame {
        frame,
        source: Box::new(e),
    }
}

/// Reads the scans, runs odometry, and writes `poses.txt`, `timing.csv`
/// and (with ground truth) `report.json` / `report.txt` into the output
/// directory.
pub fn run_odometry(cfg: &PipelineConfig) -> Result<OdometryRun> {
    cfg.validate()?;
    let scans_dir = require_dir(&cfg.paths.scans_dir, "scans_dir")?;
    let files = list_scans(&scans_dir)?;
    if files.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{} holds {} scans; at least 2 are needed",
            scans_dir.display(),
            files.len()
        )));
    }
    let gt = match &cfg.paths.poses {
        Some(p) => Some(read_pose_file(p)?),
        None => None,
    };
    let model = match (&cfg.estimator, &cfg.paths.checkpoint) {
        (Estimator::Neural, Some(p)) => Some(load_checkpoint_path(p)?),
        (Estimator::Neural, None) => {
            return Err(Error::Config(
                "neural estimator needs paths.checkpoint".into(),
            ))
        }
        _ => None,
    };
    let clouds = files
        .iter()
        .map(load_kitti_scan)
        .collect::<Result<Vec<_>>>()?;
    let (trajectory, log) = odometry_on_clouds(clouds, cfg, model.as_ref())?;

    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    write_pose_file(&trajectory, out.join("poses.txt"))?;
    let mut run = OdometryRun {
        trajectory,
        log,
        report: None,
    };
    write_atomic_str(&out.join("timing.csv"), &run.timing_csv())?;
    if let Some(gt) = gt {
        let report = kitti_metrics(&run.trajectory, &gt)?;
        crate::evaluation::write_report(
            &report,
            &out.join("report.json"),
            &out.join("report.txt"),
        )?;
        run.report = Some(report);
    }
    Ok(run)
}

pub fn run_eval(est_path: &Path, gt_path: &Path) -> Result<EvalReport> {
    let est = read_pose_file(est_path)?;
    let gt = read_pose_file(gt_path)?;
    kitti_metrics(&est, &gt)
}

fn split_checkpoint(path: &Path) -> Result<(PathBuf, String)> {
    let stem = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad checkpoint path {}", path.display())))?
        .to_string_lossy()
        .into_owned();
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok((dir, stem))
}

pub fn load_checkpoint_path(path: &Path) -> Result<crate::regression::RegressionModel> {
    let (dir, stem) = split_checkpoint(path)?;
    load_checkpoint(&dir, &stem)
}

/// Labelled MKPs for every consecutive scan pair, using ground-truth poses.
/// Pairs that yield no MKPs are skipped with a warning.
pub fn training_samples(
    clouds: Vec<PointCloud>,
    gt: &Trajectory,
    cfg: &PipelineConfig,
) -> Result<Vec<TrainSample>> {
    if clouds.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "{} scans but {} poses",
            clouds.len(),
            gt.len()
        )));
    }
    let frames = clouds
        .into_par_iter()
        .map(|c| Frame::prepare(c, &cfg.projection, &cfg.detector))
        .collect::<Result<Vec<_>>>()?;
    let rel = gt.relative();
    let samples: Vec<Option<TrainSample>> = (0..rel.len())
        .into_par_iter()
        .map(|k| {
            let e = rel[k].inverse();
            match extract_mkps(&frames[k], &frames[k + 1], &cfg.matching, cfg.n_mkps) {
                Ok(ex) => label_mkps(&ex.mkps, &e, cfg.label_threshold)
                    .ok()
                    .map(|mkps| TrainSample { mkps, gt: e }),
                Err(err) => {
                    warn!("pair {k}: {err}; skipped");
                    None
                }
            }
        })
        .collect();
    let samples: Vec<TrainSample> = samples.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(Error::DegenerateFramePair);
    }
    Ok(samples)
}

/// Trains on the scans and ground truth in `cfg.paths`, writing
/// `model.json`/`model.bin` and `loss.csv` into the output directory.
pub fn run_train(cfg: &PipelineConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scans_dir = require_dir(&cfg.paths.scans_dir, "scans_dir")?;
    let poses = cfg
        .paths
        .poses
        .clone()
        .ok_or_else(|| Error::Config("training needs paths.poses".into()))?;
    let gt = read_pose_file(&poses)?;
    let clouds = list_scans(&scans_dir)?
        .iter()
        .map(load_kitti_scan)
        .collect::<Result<Vec<_>>>()?;
    let samples = training_samples(clouds, &gt, cfg)?;
    info!("training on {} frame pairs", samples.len());
    let outcome = train(&samples, &cfg.train, &cfg.network, cfg.select_k)?;
    let out = &cfg.paths.output_dir;
    create_dir(out)?;
    save_checkpoint(&outcome.model, out, "model")?;
    write_atomic_str(&out.join("loss.csv"), &loss_curve_csv(&outcome.curve))?;
    Ok(outcome)
}

/// MKPs between two scans, for inspection.
pub fn mkps_between(a: PointCloud, b: PointCloud, cfg: &PipelineConfig) -> Result<MkpSet> {
    let fa = Frame::prepare(a, &cfg.projection, &cfg.detector)?;
    let fb = Frame::prepare(b, &cfg.projection, &cfg.detector)?;
    Ok(extract_mkps(&fa, &fb, &cfg.matching, cfg.n_mkps)?.mkps)
}
