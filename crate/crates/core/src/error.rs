use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("orbit left the phase space at step {step}: {detail}")]
    DomainEscape { step: u64, detail: String },

    #[error("point lies on the critical set: {0}")]
    CriticalHit(String),

    #[error("jacobian is singular at {0}")]
    SingularJacobian(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("[{module}] {source}")]
    Module { module: &'static str, source: Box<Error> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidParameter(msg.into()))
}

/// Tags an error with the module it came from.
pub fn in_module(module: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Module { .. } => e,
        e => Error::Module { module, source: Box::new(e) },
    }
}
