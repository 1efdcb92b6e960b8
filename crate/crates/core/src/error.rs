//! Error type shared by all numeric and training modules.

use thiserror::Error;

/// Errors produced by the numeric kernels, models, losses and the training
/// loop.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Matrix or batch dimensions do not line up for the requested operation.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A vector with (near-)zero norm where a direction is required.
    #[error("degenerate vector: norm {norm:.3e} is below the 1e-12 threshold")]
    DegenerateVector { norm: f64 },

    /// Pearson correlation of a (near-)constant sequence is undefined.
    #[error("degenerate variance: {var:.3e} is below the 1e-12 threshold")]
    DegenerateVariance { var: f64 },

    /// Normal equations could not be factorized.
    #[error("singular normal equations; use a ridge penalty rho > 0")]
    SingularSystem,

    /// Flat parameter vector does not match the model layout.
    #[error("parameter vector length {got} does not match layout length {expected}")]
    ParamLength { expected: usize, got: usize },

    /// Non-finite data fed into a container that requires finite entries.
    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: &'static str, index: usize },

    /// Both objective streams were empty, leaving nothing to optimize.
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    /// Training diverged; reports the iteration and component losses.
    #[error(
        "non-finite loss at iteration {iter}: total={total} anchor_mse={anchor_mse:?} \
         anchor_nce={anchor_nce:?} semantic_nce={semantic_nce:?}"
    )]
    NonFiniteLoss {
        iter: usize,
        total: f64,
        anchor_mse: Option<f64>,
        anchor_nce: Option<f64>,
        semantic_nce: Option<f64>,
    },

    /// Invalid configuration value, with the offending field named.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Retrieval pool outside the valid range for the given batch.
    #[error("invalid retrieval pool size {pool} for batch of {batch}")]
    InvalidPool { pool: usize, batch: usize },

    /// Finite-difference step too small: the Jacobian probe is dominated by
    /// round-off and its ratio is unstable across h and 2h.
    #[error("unstable jvp: ratios {r_h:.6e} (h) vs {r_2h:.6e} (2h) disagree beyond tolerance")]
    UnstableJvp { r_h: f64, r_2h: f64 },
}
