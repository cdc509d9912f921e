// SPDX-License-Identifier: Apache-2.0

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("cannot project the zero vector onto the sphere")]
    ZeroVector,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("no positive KKT point (dominant NCF value {value:e})")]
    NoPositiveKkt { value: f64 },
    #[error("no step size gave descent after {tries} tries (loss before {loss_before:e}, last probe {loss_probe:e})")]
    DeltaExhausted { tries: usize, loss_before: f64, loss_probe: f64 },
    #[error("not stationary: gradient norm {grad_norm:e} exceeds {tol:e}")]
    NotStationary { grad_norm: f64, tol: f64 },
    #[error("top singular value is not simple (gap {gap:e})")]
    SingularValueTie { gap: f64 },
    #[error("remainder is numerically zero at every delta")]
    RemainderZero,
    #[error("unknown task `{0}`")]
    UnknownTask(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
