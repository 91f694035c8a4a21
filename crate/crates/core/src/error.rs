use alloc::boxed::Box;
use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A model right-hand side produced a non-finite component.
    #[error("model evaluation produced a non-finite `{component}`")]
    ModelEvaluation { component: &'static str },

    #[error("integration produced a non-finite value at stage {stage}")]
    Integration { stage: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("filter diverged: covariance trace {trace:e} exceeds cap")]
    FilterDivergence { trace: f64 },

    #[error("numerical failure: {0}")]
    Numerical(&'static str),

    #[error("filter failed at sample {index}: {source}")]
    FilterStep { index: usize, source: Box<Error> },

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid protocol: {0}")]
    Protocol(String),
}

impl Error {
    pub(crate) fn at_sample(self, index: usize) -> Self {
        Error::FilterStep {
            index,
            source: Box::new(self),
        }
    }
}
