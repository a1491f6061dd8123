use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible array shapes, tagged with the operation that rejected them.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Invalid configuration or argument value.
    #[error("invalid config: {0}")]
    Config(String),

    /// An operation that requires data received none.
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    /// Otsu thresholding found all scores in a single histogram bin, so no
    /// separating threshold exists at the requested resolution.
    #[error("degenerate score histogram: all {count} scores fall in one bin")]
    DegenerateHistogram { count: usize },

    /// A loss became NaN or infinite during training.
    #[error("non-finite loss in {phase} at epoch {epoch}")]
    NonFiniteLoss { phase: &'static str, epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    /// Malformed CSV content encountered while importing artifacts.
    #[error("csv parse error at line {line}: {detail}")]
    CsvParse { line: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
