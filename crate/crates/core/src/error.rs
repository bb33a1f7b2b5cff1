use thiserror::Error;

use crate::meter::MemClass;

#[derive(Debug, Error)]
pub enum PgfError {
    #[error("non-finite value in {what} at flat index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("stream source exhausted in block {block}: wanted {wanted} steps, got {got}")]
    SourceExhausted {
        block: usize,
        wanted: usize,
        got: usize,
    },

    #[error("non-finite state in block {block} at step {step}")]
    NonFiniteState { block: usize, step: usize },

    #[error("normalizer q.z = {value:e} below guard at step {step}")]
    DivisionGuard { step: usize, value: f64 },

    #[error("regression needs at least 3 points with distinct x (got {0})")]
    DegenerateRegression(usize),

    #[error("unbalanced release of {bytes} bytes in class {class:?} (live {live})")]
    UnbalancedRelease {
        class: MemClass,
        bytes: usize,
        live: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PgfError> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(PgfError::Shape {
            what,
            expected,
            got,
        })
    }
}

pub(crate) fn check_finite<T: crate::Scalar>(what: &'static str, xs: &[T]) -> Result<()> {
    match crate::scalar::first_non_finite(xs) {
        None => Ok(()),
        Some(index) => Err(PgfError::NonFinite { what, index }),
    }
}
