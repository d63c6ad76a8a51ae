use alloc::string::String;

use crate::data::DataError;
use crate::family::FamilyError;
use crate::linalg::LinalgError;
use crate::quadrature::QuadratureError;
use crate::spline::SplineError;

/// Crate-level error. Each module has its own error enum; this one wraps them
/// for the fitting and prediction entry points.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error(transparent)]
    Family(#[from] FamilyError),
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error("linear algebra: {0}")]
    Linalg(#[from] LinalgError),
    #[error("model specification: {0}")]
    Spec(String),
    #[error("{0}")]
    Estimation(String),
    #[error("prediction: {0}")]
    Prediction(String),
}

impl Error {
    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }
}
