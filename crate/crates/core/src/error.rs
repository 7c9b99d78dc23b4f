use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("insufficient data: {0}")]
    Data(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(alloc::vec::Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("model is untrained: {0}")]
    Untrained(String),

    #[error("diverged at step {step}: loss is not finite (step size {step_size})")]
    Diverged { step: usize, step_size: f64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
