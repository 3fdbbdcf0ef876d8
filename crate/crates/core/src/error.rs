use thiserror::Error;

/// Errors produced by model construction, evaluation, and fitting.
#[derive(Debug, Error)]
pub enum Error {
    /// Inputs have inconsistent shapes or violate a documented precondition.
    #[error("validation: {0}")]
    Validation(String),

    /// A value lies outside the mathematical domain of an operation.
    #[error("domain: {0}")]
    Domain(String),

    /// A matrix of the form I - Sigma*Lambda is (numerically) singular,
    /// i.e. some sigma^2 * lambda^2 >= 1.
    #[error("singular: {0}")]
    Singular(String),

    /// Every taxon in some sample has been masked out, leaving the
    /// multinomial with empty support.
    #[error("degenerate support: {0}")]
    DegenerateSupport(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("non-finite: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
