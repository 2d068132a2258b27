//! Process exit codes and the error type that carries them.

use std::fmt;

use transdeeplab_core::Error;

pub const OK: u8 = 0;
/// A verification suite failed, or any other runtime failure.
pub const FAILURE: u8 = 1;
pub const CONFIG: u8 = 2;
pub const DATASET: u8 = 3;
/// Dataset and model disagree on the number of classes.
pub const MISMATCH: u8 = 4;
pub const CHECKPOINT: u8 = 5;

/// An error annotated with the exit code it should produce.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    pub fn msg(code: u8, msg: impl fmt::Display) -> Self {
        Self::new(code, anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Debug for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

/// Default exit code for a core error.
pub fn classify(e: &Error) -> u8 {
    match e {
        Error::Config(_) => CONFIG,
        Error::Dataset { .. } | Error::LabelOutOfRange { .. } => DATASET,
        Error::Corrupt { .. } | Error::Truncated { .. } | Error::ParamShape { .. } => CHECKPOINT,
        _ => FAILURE,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::new(classify(&e), e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let code = e.downcast_ref::<Error>().map_or(FAILURE, classify);
        Self { code, error: e }
    }
}

pub trait WithCode<T> {
    /// Forces the exit code, adding `context` to the message.
    fn code(self, code: u8, context: impl fmt::Display) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> WithCode<T> for Result<T, E> {
    fn code(self, code: u8, context: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(code, e.into().context(context.to_string())))
    }
}
