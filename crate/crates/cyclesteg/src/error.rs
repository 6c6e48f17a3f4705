use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("non-integral output extent for conv: input {input}, kernel {kernel}, stride {stride}, padding {padding}")]
    BadConvGeometry {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward called on an already-consumed graph")]
    GraphConsumed,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("training aborted: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("attack aborted: non-finite gradient at step {0}")]
    NonFiniteGradient(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
