use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("size mismatch for {what}: expected {expected}, got {actual}")]
    Size {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("invalid configuration: {0}")]
    Spec(String),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
}

impl Error {
    /// True for errors that come from the numbers rather than from the shape
    /// or syntax of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::NonFinite(_) | Error::Degenerate(_) | Error::Numerical(_) | Error::UndefinedMetric(_)
        )
    }
}

pub(crate) fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
