use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0} pool is empty")]
    EmptyPool(&'static str),

    #[error("budget {requested} exceeds the {available} available samples")]
    Budget { requested: usize, available: usize },

    #[error("index {0} is not in the unlabeled pool")]
    NotUnlabeled(usize),

    #[error("index {0} selected more than once")]
    DuplicateIndex(usize),

    #[error("non-finite value {value} at ({row}, {col})")]
    NonFiniteValue { row: usize, col: usize, value: f64 },

    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { what: &'static str, epoch: usize },

    #[error("{path}: {msg}")]
    Csv { path: PathBuf, msg: String },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("seed {seed}, strategy {strategy}, stage {stage}: {source}")]
    Stage {
        seed: u64,
        strategy: String,
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::Parse { .. } | Error::Csv { .. }
        )
    }
}
