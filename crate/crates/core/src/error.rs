use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input outside the domain of a physical relation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    /// Integration or propagation produced a non-finite or unphysical state.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Every repetition of a measurement lost the particle.
    #[error("particle lost: {0}")]
    ParticleLost(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
