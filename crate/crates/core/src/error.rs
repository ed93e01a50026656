use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} on {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("layer {layer_index}: {detail}")]
    LayerShape { layer_index: usize, detail: String },

    #[error("dropout layer {layer_index} in feature part; dropout must stay in the head")]
    SplitViolation { layer_index: usize },

    #[error("unsupported loss/head pairing: {0}")]
    UnsupportedLossHead(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("labels must be 0 or 1, got {0}")]
    Label(f64),

    #[error("training diverged at iteration {iteration} (lr = {learning_rate}): mean batch loss is not finite")]
    Diverged {
        iteration: usize,
        learning_rate: f64,
    },

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad file format: {detail}")]
    Format { path: String, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("reports are not comparable: {0}")]
    Comparability(String),

    #[error("correctness check failed: {0}")]
    Correctness(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
