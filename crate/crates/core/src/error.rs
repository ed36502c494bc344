use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("waypoint {index} lies outside the scenario bounds")]
    WaypointOutOfBounds { index: usize },

    #[error("delay of TRP {trp} at frame {frame} ({delay_samples:.2} samples) exceeds the {n_fft}-sample window")]
    DelayOutOfWindow {
        trp: usize,
        frame: usize,
        delay_samples: f64,
        n_fft: usize,
    },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("gradient tape is stale (tape generation {tape}, model generation {model})")]
    StaleTape { tape: u64, model: u64 },

    #[error("frame {frame} is unobservable: {unmasked} unmasked TDoA(s), at least 2 required")]
    Unobservable { frame: usize, unmasked: usize },

    #[error("no admissible pair within {epsilon_s} s")]
    NoAdmissiblePair { epsilon_s: f64 },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("affine design is rank deficient (rank {rank}, need 4)")]
    RankDeficient { rank: usize },

    #[error("truncation at C={c} cuts the peak of TRP {trp} in frame {frame}")]
    Truncation { frame: usize, trp: usize, c: usize },

    #[error("file format error in {path:?}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True when the failure is numeric (divergence) rather than a data problem.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}
