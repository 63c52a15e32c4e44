//! Error classification behind the process exit code.

use std::fmt;
use std::path::Path;

/// A command failure: bad input from the caller (exit 2) or something that
/// went wrong while doing valid work (exit 1).
#[derive(Debug)]
pub enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(e) => write!(f, "{e:#}"),
            Failure::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<gbert::Error> for Failure {
    fn from(e: gbert::Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<gbert::ontology::OntologyError> for Failure {
    fn from(e: gbert::ontology::OntologyError) -> Self {
        gbert::Error::from(e).into()
    }
}

impl From<gbert::numerics::NumericsError> for Failure {
    fn from(e: gbert::numerics::NumericsError) -> Self {
        gbert::Error::from(e).into()
    }
}

pub fn invalid(msg: impl fmt::Display) -> Failure {
    Failure::Validation(anyhow::anyhow!("{msg}"))
}

pub fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(anyhow::anyhow!("{}: {e}", path.display()))
}

/// Missing inputs are the caller's mistake, not a runtime failure.
pub fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(invalid(format!("{}: no such file", path.display())))
    }
}
