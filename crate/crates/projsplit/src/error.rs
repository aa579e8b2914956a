use thiserror::Error;

/// Errors surfaced by solver configuration, block updates, and reference solvers.
#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had a different length than the context requires.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A parameter was outside its valid range. The message names the field.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {context} at iteration {iter}")]
    NonFinite { context: &'static str, iter: usize },

    /// The stepsize search shrank past its retry budget without acceptance.
    #[error(
        "backtracking for block {block} at iteration {iter} exhausted {trials} trials \
         (last stepsize {last_stepsize:.3e}); check the declared smoothness of the forward map"
    )]
    BacktrackExhausted {
        block: usize,
        iter: usize,
        trials: usize,
        last_stepsize: f64,
    },

    /// A reference solver could not certify a solution.
    #[error("reference solve failed: {0}")]
    Reference(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
