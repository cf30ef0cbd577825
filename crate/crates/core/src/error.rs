use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("image has no valid pixels")]
    AllVoid,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("degenerate frame pair: no matched keypoints survived")]
    DegenerateFramePair,
    #[error("robust estimation failed: best model had {best} inliers, {required} required")]
    RobustFailure { best: usize, required: usize },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
