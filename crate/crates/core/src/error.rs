use std::path::PathBuf;

use thiserror::Error;
use triplex_tensor::TensorError;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("spot ids missing from counts: {missing_in_counts:?}; missing from spots: {missing_in_spots:?}")]
    MissingSpots {
        missing_in_counts: Vec<String>,
        missing_in_spots: Vec<String>,
    },
    #[error("slide {slide_id}: grid cell ({grid_x}, {grid_y}) is occupied twice")]
    DuplicateGridCell {
        slide_id: String,
        grid_x: i64,
        grid_y: i64,
    },
    #[error("{stage} already applied or out of order (dataset is {current})")]
    Stage {
        stage: &'static str,
        current: &'static str,
    },
    #[error("{path}: bad feature file: {reason}")]
    FeatureFile { path: PathBuf, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("model predicts {model} genes but the data has {data}")]
    GeneCountMismatch { model: usize, data: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
}

impl CoreError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    /// True for errors caused by user input (bad files, bad config) rather
    /// than by a failure while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Self::Io { .. }
                | Self::Parse { .. }
                | Self::MissingSpots { .. }
                | Self::DuplicateGridCell { .. }
                | Self::FeatureFile { .. }
                | Self::Checkpoint(_)
                | Self::GeneCountMismatch { .. }
                | Self::Config(_)
        )
    }
}
