//! Energy-stratified epidemic forwarding in delay-tolerant networks.
//!
//! This crate models a population of mobile relays with integer battery
//! levels that forward a single message opportunistically. It provides:
//!
//! - the deterministic mean-field dynamics of the susceptible/infective
//!   fractions per energy level ([`model`]),
//! - a closed family of forwarding policies, from per-level threshold rules
//!   to flooding and direct-delivery baselines ([`policy`]),
//! - delivery and energy metrics with the throughput-constraint formulation
//!   of a mandated delivery probability ([`metrics`]),
//! - derivative-free search for the best threshold schedule at a fixed
//!   terminal time, for the optimal stopping time, and within each heuristic
//!   class ([`optimize`]),
//! - first-order optimality checks built from the adjoint system, switching
//!   functions, and the Hamiltonian ([`pmp`]),
//! - an event-driven agent simulator with exponential and truncated
//!   power-law contact processes plus clock and energy error models
//!   ([`mcsim`]),
//! - scripted validation, sweep, robustness, and multi-message experiments
//!   ([`experiments`]).
//!
//! The narrative guide lives in the `book/` directory of the repository; its
//! code listings compile and run as this crate's doctests (see [`guide`]).

pub mod error;
pub mod experiments;
pub mod guide;
pub mod mcsim;
pub mod metrics;
pub mod model;
pub mod optimize;
pub mod pmp;
pub mod policy;

pub use error::{Error, Result};
pub use model::{IntegrationConfig, ModelParams, StateVector, Trajectory};
pub use policy::ForwardingPolicy;
