use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },

    #[error("matrix dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("operand is the zero matrix")]
    ZeroMatrix,

    #[error("matrix too large for the SVD oracle: min dimension {dim} exceeds {cap}")]
    TooLarge { dim: usize, cap: usize },

    #[error("spectral norm estimate must be positive, got {0}")]
    NonPositiveSigma(f64),

    #[error("degenerate random draw (spectral norm {0:e}) after all resampling attempts")]
    DegenerateDraw(f64),

    #[error("msign operand G + lambda*Theta vanishes at lambda = {0}")]
    ZeroOperand(f64),

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    DivergenceDetected { step: usize, loss: f64 },

    #[error("module `{name}`: {source}")]
    Module {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn in_module(self, name: &str) -> Self {
        Error::Module {
            name: name.to_string(),
            source: Box::new(self),
        }
    }

    /// Strips any module wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::Module { source, .. } => source.root(),
            other => other,
        }
    }
}
