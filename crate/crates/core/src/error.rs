use alloc::boxed::Box;
use alloc::string::String;

use crate::sdp::StageSdpSolution;

/// Errors produced by the estimation, optimization and control kernels.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("call order violated: {0}")]
    CallOrder(&'static str),

    #[error("{0} must be nonnegative")]
    NegativeInput(&'static str),

    #[error("measurement is singular at this state: {0}")]
    SingularMeasurement(&'static str),

    #[error("stage SDP did not converge after {iterations} iterations (gap estimate {gap:e})")]
    Convergence {
        iterations: usize,
        gap: f64,
        best: Box<StageSdpSolution>,
    },

    #[error("stage {stage}: {source}")]
    AtStage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("certificate recursion diverged (effective radius {radius:e})")]
    CertificateDiverged { radius: f64 },

    #[error("interior-point solver failed: {0}")]
    Barrier(&'static str),

    #[error("unknown system id `{0}`")]
    UnknownSystem(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn at_stage(self, stage: usize) -> Error {
        match self {
            e @ Error::AtStage { .. } => e,
            e => Error::AtStage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True when the root cause is a numerical solver failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Convergence { .. } | Error::Barrier(_) | Error::CertificateDiverged { .. } => true,
            Error::AtStage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
