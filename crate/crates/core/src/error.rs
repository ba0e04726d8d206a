use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed graph or sheaf data (bad indices, shapes, non-SPD Grams).
    #[error("structural error: {0}")]
    Structure(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An operation was called on inputs it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("state diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, found })
    }
}
