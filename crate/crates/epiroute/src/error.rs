use thiserror::Error;

/// Errors produced by model construction, integration, and search.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A parameter or initial condition violates a model invariant.
    #[error("invalid model input: {0}")]
    InvalidInput(String),

    /// A control or penalty vector has the wrong length.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Integration produced a state outside the admissible set even after
    /// step refinement.
    #[error("inadmissible state at t = {t}: {detail}")]
    Inadmissible { t: f64, detail: String },

    /// Integration produced a NaN or infinity.
    #[error("non-finite value encountered at t = {t}")]
    NonFinite { t: f64 },

    /// No policy in the searched set meets the mandated delivery probability.
    /// Carries the best delivery probability seen across the sweep.
    #[error("no feasible policy found (best delivery probability {max_delivery})")]
    Infeasible { max_delivery: f64 },

    /// The zero-control horizon is undefined because no initial infective can
    /// ever reach the destination.
    #[error("infeasible under zero control: no initial infectives with transmit energy")]
    InfeasibleZeroControl,

    /// A metric that requires the throughput constraint to hold with equality
    /// was evaluated on a trajectory where it does not.
    #[error("throughput constraint not active at the terminal time (slack {slack})")]
    ConstraintNotActive { slack: f64 },

    /// The verifier only accepts threshold-form candidates.
    #[error("operation requires a threshold-form policy")]
    NonThresholdPolicy,

    /// The two algebraic forms of the Hamiltonian disagree, which indicates
    /// an inconsistent state/co-state pair.
    #[error("Hamiltonian forms disagree by {deviation} (tolerance {tolerance})")]
    HamiltonianMismatch { deviation: f64, tolerance: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
