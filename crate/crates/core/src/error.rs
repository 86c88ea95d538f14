use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("mesh error: {0}")]
    Mesh(String),

    #[error("degenerate tendon route: waypoints {index} and {} coincide", index + 1)]
    DegenerateRoute { index: usize },

    #[error("no-overlap: no object surface points inside the gripper bounding box")]
    NoOverlap,

    #[error("ungraspable: object wider than the finger span in every sampled direction")]
    Ungraspable,

    #[error("initialization-failed: residual penetration {penetration:.3e} m")]
    InitializationFailed { penetration: f64 },

    #[error("simulation diverged: non-finite {quantity} ({phase} phase, frame {frame})")]
    Divergence {
        quantity: String,
        phase: String,
        frame: usize,
    },

    #[error("shape mismatch for {role}: expected {expected}, got {actual}")]
    ShapeMismatch {
        role: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite training loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("empty candidate list")]
    EmptyCandidates,

    #[error("optimisation failed at iteration {iteration}, object {object}: {message}")]
    Optimization {
        iteration: usize,
        object: usize,
        message: String,
    },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("bad model file: {0}")]
    ModelFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
