use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FwpError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },
    #[error("rule `{0}` is not supported here")]
    UnsupportedRule(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
}

pub type Result<T, E = FwpError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> FwpError {
    FwpError::Config(msg.into())
}
