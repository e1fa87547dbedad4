use thiserror::Error;

use crate::autodiff::AutodiffError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("Hessian is singular or ill-conditioned (condition estimate {condition:e})")]
    SingularHessian { condition: f64 },
    #[error("{params} lower-level parameters exceed the dense-Hessian limit of {limit}")]
    DimensionGuard { params: usize, limit: usize },
    #[error("negative curvature {curvature:e} at conjugate-gradient iteration {iteration}")]
    NegativeCurvature { iteration: usize, curvature: f64 },
    #[error("Neumann series diverged at term {term}")]
    SeriesDivergence { term: usize },
    #[error("unroll depth {steps} exceeds limit {limit}")]
    UnrollTooDeep { steps: usize, limit: usize },
    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;
