//! Scalar functionals of trajectories: delivery probability, the equivalent
//! throughput constraint, terminal energy costs, and the zero-control horizon.
//!
//! With destination contact rate `β₀`, the probability that the message has
//! reached the destination by the trajectory's end is
//! `1 - exp(-β₀ E(T))`, where `E` is the accumulated exposure. A mandated
//! delivery probability `p` is therefore the throughput constraint
//! `E(T) >= -ln(1 - p) / β₀`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, StateVector, Trajectory};

/// Absolute tolerance on `E(T)` when a metric requires the throughput
/// constraint to hold with equality.
pub const CONSTRAINT_ACTIVITY_TOL: f64 = 1e-6;

/// Slack used when testing the throughput constraint itself.
pub const THROUGHPUT_SLACK: f64 = 1e-12;

/// Increasing, differentiable penalty on the terminal time of the
/// stopping-time problem, with an analytic derivative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum StoppingPenalty {
    /// `f(T) = scale * T^exponent` with `scale > 0`, `exponent > 0`.
    PowerLaw { exponent: f64, scale: f64 },
}

impl Default for StoppingPenalty {
    fn default() -> Self {
        Self::PowerLaw { exponent: 2.0, scale: 1.0 }
    }
}

impl StoppingPenalty {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::PowerLaw { exponent, scale } => {
                if !(*exponent > 0.0 && *scale > 0.0) {
                    return Err(Error::InvalidInput(
                        "stopping penalty requires positive scale and exponent".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            Self::PowerLaw { exponent, scale } => scale * t.powf(*exponent),
        }
    }

    /// `f'(t)`, positive for all `t > 0`.
    pub fn slope(&self, t: f64) -> f64 {
        match self {
            Self::PowerLaw { exponent, scale } => scale * exponent * t.powf(exponent - 1.0),
        }
    }
}

/// The exposure level at which the throughput constraint becomes satisfied:
/// `-ln(1 - p) / β₀`.
pub fn required_exposure(params: &ModelParams) -> f64 {
    -(1.0 - params.mandated_delivery).ln() / params.destination_contact_rate
}

/// `1 - exp(-β₀ E(T))` for the trajectory's terminal exposure.
pub fn delivery_probability(traj: &Trajectory, params: &ModelParams) -> f64 {
    1.0 - (-params.destination_contact_rate * traj.final_state().exposure).exp()
}

/// Whether the trajectory meets the mandated delivery probability.
pub fn throughput_ok(traj: &Trajectory, params: &ModelParams) -> bool {
    traj.final_state().exposure >= required_exposure(params) - THROUGHPUT_SLACK
}

/// Terminal penalty `Σ a_i (S_i + I_i)` of a state.
pub fn energy_cost(state: &StateVector, params: &ModelParams) -> f64 {
    params
        .penalties
        .iter()
        .zip(state.susceptible.iter().zip(state.infective.iter()))
        .map(|(a, (s, i))| a * (s + i))
        .sum()
}

/// Terminal energy cost minus the initial one. Forwarding only moves mass to
/// lower levels, so this is non-negative for any policy.
pub fn unbiased_cost(traj: &Trajectory, params: &ModelParams) -> f64 {
    energy_cost(traj.final_state(), params) - energy_cost(traj.initial_state(), params)
}

/// `f(T) + Σ a_i (S_i(T) + I_i(T))` for a stopping-time candidate.
///
/// The terminal time must satisfy the throughput constraint with equality
/// (within [`CONSTRAINT_ACTIVITY_TOL`]); candidates that overshoot the
/// mandated probability are not stationary for the stopping-time problem.
pub fn stopping_objective(
    traj: &Trajectory,
    params: &ModelParams,
    penalty: &StoppingPenalty,
) -> Result<f64> {
    penalty.validate()?;
    let slack = traj.final_state().exposure - required_exposure(params);
    if slack.abs() > CONSTRAINT_ACTIVITY_TOL {
        return Err(Error::ConstraintNotActive { slack });
    }
    Ok(penalty.value(traj.end_time()) + energy_cost(traj.final_state(), params))
}

/// The horizon `T₀` at which the throughput constraint holds with equality
/// when no copies are ever forwarded: `-ln(1 - p) / (β₀ Σ_{i>=s} I_i(0))`.
pub fn zero_control_horizon(params: &ModelParams, init: &StateVector) -> Result<f64> {
    if params.mandated_delivery == 0.0 {
        return Ok(0.0);
    }
    let q = init.transmitter_fraction(params);
    if q <= 0.0 {
        return Err(Error::InfeasibleZeroControl);
    }
    Ok(required_exposure(params) / q)
}
