use thiserror::Error;

/// Errors raised by the library.
///
/// The variants are grouped so a front end can map them onto exit codes:
/// input problems ([`Error::Validation`], [`Error::Mismatch`],
/// [`Error::InvalidArgument`], [`Error::Parse`], [`Error::Io`]) versus
/// numerical failures ([`Error::Solver`], [`Error::Unsupported`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("size mismatch for {what}: expected {expected}, got {got}")]
    Mismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Validation(_)
                | Error::Mismatch { .. }
                | Error::InvalidArgument(_)
                | Error::Parse(_)
                | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Mismatch {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
