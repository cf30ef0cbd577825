use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lidar_odom::evaluation::{
    export_trajectory_plot, read_pose_file, write_report, write_trajectory_plot,
};
use lidar_odom::odometry::ransac_estimate;
use lidar_odom::pipeline::{self, Estimator, PipelineConfig};
use lidar_odom::pointcloud::load_kitti_scan;
use lidar_odom::projection::{
    depth_completion, depth_to_pgm, equalized_to_pgm, histogram_equalize, project,
    write_index_map_csv, write_pgm,
};
use lidar_odom::Error;

/// LiDAR odometry from SIFT keypoints matched on spherical range images.
#[derive(Parser)]
#[command(name = "lidar-odom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline configuration. Unset keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scan sequence with ground-truth poses.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of frames.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Write the range image, equalized image and index map of one scan.
    Project {
        scan: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Match keypoints between two scans and write the MKPs as CSV.
    Mkps {
        scan_a: PathBuf,
        scan_b: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Also print the RANSAC pose estimate.
        #[arg(long)]
        estimate: bool,
    },
    /// Estimate the trajectory of a scan directory.
    Odometry {
        #[command(flatten)]
        common: Common,
        /// Directory of KITTI `.bin` scans.
        #[arg(long)]
        scans: Option<PathBuf>,
        /// Ground-truth pose file; enables metrics.
        #[arg(long)]
        poses: Option<PathBuf>,
        /// closed_form_ransac, icp_baseline or neural.
        #[arg(long)]
        estimator: Option<Estimator>,
        /// Checkpoint path without extension (neural estimator).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Abort on the first failing frame.
        #[arg(long)]
        strict: bool,
    },
    /// Train the selection and regression networks.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scans: Option<PathBuf>,
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare an estimated pose file against ground truth.
    Eval {
        estimate: PathBuf,
        ground_truth: PathBuf,
        /// Also write report.json and report.txt here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Export a top-down trajectory plot (CSV and SVG).
    Plot {
        /// Pose files, drawn in order.
        #[arg(required = true)]
        poses: Vec<PathBuf>,
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "trajectory")]
        stem: String,
    },
}

/// Exit codes: 0 success, 1 usage or missing input, 2 bad data, 3 estimation failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Frame { source, .. } => exit_code(source),
        Error::Config(_) => 1,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 1,
        Error::Io { .. } | Error::Format(_) | Error::InvalidPose(_) | Error::InvalidInput(_) => 2,
        Error::AllVoid
        | Error::DegenerateGeometry(_)
        | Error::DegenerateFramePair
        | Error::RobustFailure { .. }
        | Error::Diverged { .. } => 3,
    }
}

fn load_config(common: &Common) -> lidar_odom::Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::synthetic(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.paths.output_dir = out.clone();
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> lidar_odom::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn run(cli: Cli) -> lidar_odom::Result<()> {
    match cli.command {
        Command::Synth { common, frames } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = frames {
                cfg.synth.sequence.frames = n;
            }
            let out = common.out.unwrap_or_else(|| PathBuf::from("synth"));
            let s = pipeline::run_synth(&cfg, &out)?;
            println!("{} scans in {}", s.frames, s.scans_dir.display());
            println!("ground truth: {}", s.poses.display());
            println!("config: {}", s.config.display());
        }
        Command::Project { scan, common } => {
            let cfg = load_config(&common)?;
            let cloud = load_kitti_scan(&scan)?;
            let image = project(&cloud, &cfg.projection)?;
            let equalized = histogram_equalize(&depth_completion(&image)?, &cfg.projection);
            let out = &cfg.paths.output_dir;
            create_dir(out)?;
            write_pgm(
                &out.join("range.pgm"),
                &depth_to_pgm(&image, &cfg.projection),
            )?;
            write_pgm(&out.join("equalized.pgm"), &equalized_to_pgm(&equalized))?;
            write_index_map_csv(&out.join("index_map.csv"), &image)?;
            println!(
                "wrote range.pgm, equalized.pgm and index_map.csv to {}",
                out.display()
            );
        }
        Command::Mkps {
            scan_a,
            scan_b,
            common,
            estimate,
        } => {
            let cfg = load_config(&common)?;
            let mkps =
                pipeline::mkps_between(load_kitti_scan(&scan_a)?, load_kitti_scan(&scan_b)?, &cfg)?;
            let out = &cfg.paths.output_dir;
            create_dir(out)?;
            mkps.write_csv(&out.join("mkps.csv"))?;
            println!(
                "{} MKPs written to {}",
                mkps.len(),
                out.join("mkps.csv").display()
            );
            if estimate {
                let r = ransac_estimate(&mkps, &cfg.ransac)?;
                println!("inliers: {} / {}", r.inlier_count, mkps.len());
                let m = r.pose.to_row_major_3x4();
                for row in m.chunks(4) {
                    println!(
                        "{:>12.6} {:>12.6} {:>12.6} {:>12.6}",
                        row[0], row[1], row[2], row[3]
                    );
                }
            }
        }
        Command::Odometry {
            common,
            scans,
            poses,
            estimator,
            checkpoint,
            strict,
        } => {
            let mut cfg = load_config(&common)?;
            if scans.is_some() {
                cfg.paths.scans_dir = scans;
            }
            if poses.is_some() {
                cfg.paths.poses = poses;
            }
            if checkpoint.is_some() {
                cfg.paths.checkpoint = checkpoint;
            }
            if let Some(e) = estimator {
                cfg.estimator = e;
            }
            cfg.strict |= strict;
            let run = pipeline::run_odometry(&cfg)?;
            let failed = run.log.iter().filter(|l| l.failure.is_some()).count();
            println!(
                "{} poses written to {} ({} failed pairs)",
                run.trajectory.len(),
                cfg.paths.output_dir.join("poses.txt").display(),
                failed
            );
            if let Some(r) = run.report {
                print!("{}", r.to_table());
            }
        }
        Command::Train {
            common,
            scans,
            poses,
            epochs,
        } => {
            let mut cfg = load_config(&common)?;
            if scans.is_some() {
                cfg.paths.scans_dir = scans;
            }
            if poses.is_some() {
                cfg.paths.poses = poses;
            }
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            let outcome = pipeline::run_train(&cfg)?;
            if let Some(last) = outcome.curve.last() {
                println!("final epoch: {last:?}");
            }
            println!(
                "checkpoint written to {}",
                cfg.paths.output_dir.join("model.json").display()
            );
        }
        Command::Eval {
            estimate,
            ground_truth,
            out,
        } => {
            let report = pipeline::run_eval(&estimate, &ground_truth)?;
            print!("{}", report.to_table());
            if let Some(dir) = out {
                create_dir(&dir)?;
                write_report(&report, &dir.join("report.json"), &dir.join("report.txt"))?;
            }
        }
        Command::Plot { poses, out, stem } => {
            let trajs = poses
                .iter()
                .map(read_pose_file)
                .collect::<lidar_odom::Result<Vec<_>>>()?;
            let names: Vec<String> = poses
                .iter()
                .map(|p| p.with_extension("").to_string_lossy().into_owned())
                .collect();
            let pairs: Vec<(&str, _)> =
                names.iter().map(String::as_str).zip(trajs.iter()).collect();
            let plot = export_trajectory_plot(&pairs)?;
            create_dir(&out)?;
            write_trajectory_plot(&plot, &out, &stem)?;
            println!("wrote {stem}.csv and {stem}.svg to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
