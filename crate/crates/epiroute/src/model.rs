//! Domain types and the mean-field dynamics of energy-stratified epidemic
//! forwarding.
//!
//! The population is split into susceptible fractions `S_0..S_B` and infective
//! (message-carrying) fractions `I_0..I_B`, indexed by residual energy level.
//! A transmission costs `s` units at the sender and `r` units at the receiver,
//! so a susceptible at level `j >= r` that accepts a copy becomes an infective
//! at level `j - r`, and an infective at level `i >= s` that forwards drops to
//! level `i - s`. Level-dependent forwarding probabilities `u_s..u_B` drive
//! the flow between compartments; the accumulated exposure
//! `E(t) = ∫ Σ_{i>=s} I_i dτ` determines the delivery probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{CompiledPolicy, ForwardingPolicy};

/// Tolerance on `|Σ (S_i + I_i) - 1|` along a trajectory.
pub const NORMALIZATION_TOL: f64 = 1e-9;
/// Slack allowed below zero for individual state components.
pub const NEGATIVITY_SLACK: f64 = 1e-12;

/// Network and cost constants shared by every operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Maximum energy capacity `B` (levels are `0..=B`).
    pub max_energy: usize,
    /// Energy units consumed by the transmitter per forwarded copy (`s`).
    pub transmit_cost: usize,
    /// Energy units consumed by the receiver per accepted copy (`r`).
    pub receive_cost: usize,
    /// Aggregate pairwise contact rate `β` (per unit time).
    pub contact_rate: f64,
    /// Aggregate node-destination contact rate `β₀` (per unit time).
    pub destination_contact_rate: f64,
    /// Terminal time / message TTL `T`.
    pub horizon: f64,
    /// Terminal penalties `a_0..a_B`, strictly decreasing in the level.
    pub penalties: Vec<f64>,
    /// Mandated delivery probability `p` in `[0, 1)`.
    pub mandated_delivery: f64,
}

impl ModelParams {
    pub fn new(
        max_energy: usize,
        transmit_cost: usize,
        receive_cost: usize,
        contact_rate: f64,
        destination_contact_rate: f64,
        horizon: f64,
        penalties: Vec<f64>,
        mandated_delivery: f64,
    ) -> Result<Self> {
        let params = Self {
            max_energy,
            transmit_cost,
            receive_cost,
            contact_rate,
            destination_contact_rate,
            horizon,
            penalties,
            mandated_delivery,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::InvalidInput(msg));
        if self.max_energy < 1 {
            return invalid("max energy level must be at least 1".into());
        }
        if !(1 <= self.receive_cost
            && self.receive_cost <= self.transmit_cost
            && self.transmit_cost <= self.max_energy)
        {
            return invalid(format!(
                "energy costs must satisfy 1 <= r <= s <= B, got r = {}, s = {}, B = {}",
                self.receive_cost, self.transmit_cost, self.max_energy
            ));
        }
        if !(self.contact_rate > 0.0 && self.contact_rate.is_finite()) {
            return invalid(format!("contact rate must be positive, got {}", self.contact_rate));
        }
        if !(self.destination_contact_rate > 0.0 && self.destination_contact_rate.is_finite()) {
            return invalid(format!(
                "destination contact rate must be positive, got {}",
                self.destination_contact_rate
            ));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return invalid(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.penalties.len() != self.max_energy + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.max_energy + 1,
                got: self.penalties.len(),
            });
        }
        if self.penalties.windows(2).any(|w| !(w[1] < w[0])) {
            return invalid("penalties must be strictly decreasing in the energy level".into());
        }
        if !self.penalties.iter().all(|a| a.is_finite()) {
            return invalid("penalties must be finite".into());
        }
        if !(0.0..1.0).contains(&self.mandated_delivery) {
            return invalid(format!(
                "mandated delivery probability must lie in [0, 1), got {}",
                self.mandated_delivery
            ));
        }
        Ok(())
    }

    /// Number of controlled levels (`s..=B`).
    pub fn num_controls(&self) -> usize {
        self.max_energy - self.transmit_cost + 1
    }

    /// The controlled energy levels `s..=B`.
    pub fn control_levels(&self) -> std::ops::RangeInclusive<usize> {
        self.transmit_cost..=self.max_energy
    }

    /// Whether the penalty sequence is strictly convex
    /// (`a_{i-1} - a_i < a_{i-2} - a_{i-1}` for every `2 <= i <= B`).
    pub fn penalties_strictly_convex(&self) -> bool {
        self.penalties
            .windows(3)
            .all(|w| (w[1] - w[2]) < (w[0] - w[1]))
    }

    pub(crate) fn dims(&self) -> Dims {
        Dims {
            b: self.max_energy,
            s: self.transmit_cost,
            r: self.receive_cost,
            beta: self.contact_rate,
        }
    }
}

/// Population fractions per energy level plus the accumulated exposure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    /// Susceptible fractions `S_0..S_B`.
    pub susceptible: Vec<f64>,
    /// Infective fractions `I_0..I_B`.
    pub infective: Vec<f64>,
    /// Accumulated exposure `E(t) = ∫ Σ_{i>=s} I_i dτ`.
    pub exposure: f64,
}

impl StateVector {
    /// A fresh state with zero exposure.
    pub fn new(susceptible: Vec<f64>, infective: Vec<f64>) -> Result<Self> {
        if susceptible.len() != infective.len() {
            return Err(Error::DimensionMismatch {
                expected: susceptible.len(),
                got: infective.len(),
            });
        }
        Ok(Self { susceptible, infective, exposure: 0.0 })
    }

    pub fn num_levels(&self) -> usize {
        self.susceptible.len()
    }

    /// Checks non-negativity (within [`NEGATIVITY_SLACK`]) and normalization
    /// (within [`NORMALIZATION_TOL`]).
    pub fn validate(&self) -> Result<()> {
        if self.susceptible.len() != self.infective.len() {
            return Err(Error::DimensionMismatch {
                expected: self.susceptible.len(),
                got: self.infective.len(),
            });
        }
        let mut total = 0.0;
        for v in self.susceptible.iter().chain(self.infective.iter()) {
            if !v.is_finite() {
                return Err(Error::NonFinite { t: f64::NAN });
            }
            if *v < -NEGATIVITY_SLACK {
                return Err(Error::InvalidInput(format!("negative fraction {v}")));
            }
            total += v;
        }
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidInput(format!(
                "fractions sum to {total}, expected 1 within {NORMALIZATION_TOL}"
            )));
        }
        if !(self.exposure >= 0.0) {
            return Err(Error::InvalidInput(format!("exposure must be >= 0, got {}", self.exposure)));
        }
        Ok(())
    }

    /// `Σ_{i>=s} I_i`: the fraction of nodes able to push the message onward.
    pub fn transmitter_fraction(&self, params: &ModelParams) -> f64 {
        self.infective[params.transmit_cost..].iter().sum()
    }

    /// `Σ_{i>=r} S_i`: the fraction of nodes able to accept a copy.
    pub fn receptive_fraction(&self, params: &ModelParams) -> f64 {
        self.susceptible[params.receive_cost..].iter().sum()
    }

    /// `Σ_{i>=s} I_i + Σ_{i>=r} S_i`, which never increases along a trajectory.
    pub fn forwarding_mass(&self, params: &ModelParams) -> f64 {
        self.transmitter_fraction(params) + self.receptive_fraction(params)
    }

    pub(crate) fn flat_len(num_levels: usize) -> usize {
        2 * num_levels + 1
    }

    pub(crate) fn to_flat(&self) -> Vec<f64> {
        let n = self.num_levels();
        let mut y = Vec::with_capacity(Self::flat_len(n));
        y.extend_from_slice(&self.susceptible);
        y.extend_from_slice(&self.infective);
        y.push(self.exposure);
        y
    }

    pub(crate) fn from_flat(y: &[f64]) -> Self {
        let n = (y.len() - 1) / 2;
        Self {
            susceptible: y[..n].to_vec(),
            infective: y[n..2 * n].to_vec(),
            exposure: y[2 * n],
        }
    }
}

/// Time derivative of a [`StateVector`] under a given control.
#[derive(Debug, Clone, PartialEq)]
pub struct StateDerivative {
    pub susceptible: Vec<f64>,
    pub infective: Vec<f64>,
    pub exposure: f64,
}

/// Geometry of the compartment system, copied out of [`ModelParams`] for the
/// inner loops.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub b: usize,
    pub s: usize,
    pub r: usize,
    pub beta: f64,
}

/// Flat right-hand side. `y = [S_0..S_B, I_0..I_B, E]`, `u` covers levels
/// `s..=B`. Any interaction referencing a level above `B` contributes zero.
#[inline]
pub(crate) fn rhs_flat(d: Dims, y: &[f64], u: &[f64], dy: &mut [f64]) {
    let b = d.b;
    let n = b + 1;
    let (su, rest) = y.split_at(n);
    let inf = &rest[..n];

    // Weighted transmitting infectives, receptive susceptibles, transmitters.
    let mut weighted_tx = 0.0;
    let mut transmitters = 0.0;
    for i in d.s..=b {
        weighted_tx += u[i - d.s] * inf[i];
        transmitters += inf[i];
    }
    let mut receptive = 0.0;
    for i in d.r..=b {
        receptive += su[i];
    }

    let beta = d.beta;
    for i in 0..=b {
        dy[i] = if i >= d.r { -beta * su[i] * weighted_tx } else { 0.0 };
        let mut di = 0.0;
        if i >= d.s {
            di -= beta * u[i - d.s] * inf[i] * receptive;
        }
        if i + d.r <= b {
            di += beta * su[i + d.r] * weighted_tx;
        }
        if i + d.s <= b {
            // Level i + s maps to control index (i + s) - s = i.
            di += beta * u[i] * inf[i + d.s] * receptive;
        }
        dy[n + i] = di;
    }
    dy[2 * n] = transmitters;
}

/// Evaluates the mean-field right-hand side at one state and control.
///
/// Returns `(dS, dI, dE)` with `dE = Σ_{i>=s} I_i`; the compartment
/// derivatives sum to zero.
pub fn ode_rhs(state: &StateVector, u: &[f64], params: &ModelParams) -> Result<StateDerivative> {
    params.validate()?;
    if state.num_levels() != params.max_energy + 1 {
        return Err(Error::DimensionMismatch {
            expected: params.max_energy + 1,
            got: state.num_levels(),
        });
    }
    if u.len() != params.num_controls() {
        return Err(Error::DimensionMismatch { expected: params.num_controls(), got: u.len() });
    }
    if u.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("controls must lie in [0, 1]".into()));
    }
    state.validate()?;
    let y = state.to_flat();
    let mut dy = vec![0.0; y.len()];
    rhs_flat(params.dims(), &y, u, &mut dy);
    let n = params.max_energy + 1;
    Ok(StateDerivative {
        susceptible: dy[..n].to_vec(),
        infective: dy[n..2 * n].to_vec(),
        exposure: dy[2 * n],
    })
}

pub(crate) struct Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Scratch {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            tmp: vec![0.0; len],
        }
    }
}

/// One classical 4th-order step of length `h` with constant control `u`.
#[inline]
pub(crate) fn rk4_step(d: Dims, y: &mut [f64], u: &[f64], h: f64, sc: &mut Scratch) {
    let n = y.len();
    rhs_flat(d, y, u, &mut sc.k1);
    for i in 0..n {
        sc.tmp[i] = y[i] + 0.5 * h * sc.k1[i];
    }
    rhs_flat(d, &sc.tmp, u, &mut sc.k2);
    for i in 0..n {
        sc.tmp[i] = y[i] + 0.5 * h * sc.k2[i];
    }
    rhs_flat(d, &sc.tmp, u, &mut sc.k3);
    for i in 0..n {
        sc.tmp[i] = y[i] + h * sc.k3[i];
    }
    rhs_flat(d, &sc.tmp, u, &mut sc.k4);
    let w = h / 6.0;
    for i in 0..n {
        y[i] += w * (sc.k1[i] + 2.0 * sc.k2[i] + 2.0 * sc.k3[i] + sc.k4[i]);
    }
}

/// Integrates `y` in place over a span of length `len` with constant control,
/// without admissibility checks. Used by the search inner loops.
#[inline]
pub(crate) fn rk4_span(d: Dims, y: &mut [f64], u: &[f64], len: f64, steps: usize, sc: &mut Scratch) {
    let h = len / steps as f64;
    for _ in 0..steps {
        rk4_step(d, y, u, h, sc);
    }
}

pub(crate) fn check_admissible_flat(y: &[f64], t: f64) -> Result<()> {
    let n = (y.len() - 1) / 2;
    let mut total = 0.0;
    for &v in &y[..2 * n] {
        if !v.is_finite() {
            return Err(Error::NonFinite { t });
        }
        if v < -NEGATIVITY_SLACK {
            return Err(Error::Inadmissible { t, detail: format!("component {v} below -{NEGATIVITY_SLACK}") });
        }
        total += v;
    }
    if (total - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Inadmissible { t, detail: format!("fractions sum to {total}") });
    }
    if !y[2 * n].is_finite() {
        return Err(Error::NonFinite { t });
    }
    Ok(())
}

/// Step count and retry policy for [`integrate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    /// Total steps spread across the horizon (each control segment gets at
    /// least one and a proportional share).
    pub steps: usize,
    /// How many times the step count is doubled when an admissibility check
    /// fails before giving up.
    pub max_retries: usize,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self { steps: 2000, max_retries: 4 }
    }
}

/// A deterministic grid solution of the forwarding dynamics.
///
/// The grid contains every control breakpoint, so the piecewise-constant
/// control is exact within each stored segment. `controls[k]` is the control
/// on `[times[k], times[k + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<StateVector>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &StateVector {
        self.states.last().expect("trajectory has at least the initial point")
    }

    pub fn initial_state(&self) -> &StateVector {
        &self.states[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least the initial point")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Solves the forwarding dynamics under `policy` from `init` to `end_time`
/// with the default step configuration.
pub fn integrate(
    policy: &ForwardingPolicy,
    params: &ModelParams,
    init: &StateVector,
    end_time: f64,
) -> Result<Trajectory> {
    integrate_with(policy, params, init, end_time, IntegrationConfig::default())
}

/// [`integrate`] with explicit step configuration.
pub fn integrate_with(
    policy: &ForwardingPolicy,
    params: &ModelParams,
    init: &StateVector,
    end_time: f64,
    cfg: IntegrationConfig,
) -> Result<Trajectory> {
    params.validate()?;
    policy.validate(params)?;
    if init.num_levels() != params.max_energy + 1 {
        return Err(Error::DimensionMismatch {
            expected: params.max_energy + 1,
            got: init.num_levels(),
        });
    }
    init.validate()?;
    if init.exposure != 0.0 {
        return Err(Error::InvalidInput("initial exposure must be zero".into()));
    }
    if !(end_time >= 0.0 && end_time.is_finite()) {
        return Err(Error::InvalidInput(format!("end time must be non-negative, got {end_time}")));
    }

    let compiled = policy.compile(params, init, end_time)?;
    let mut steps = cfg.steps.max(1);
    let mut attempt = 0;
    loop {
        match integrate_compiled(params, init, &compiled, end_time, steps) {
            Ok(traj) => return Ok(traj),
            Err(e @ (Error::Inadmissible { .. } | Error::NonFinite { .. })) => {
                if attempt >= cfg.max_retries {
                    return Err(e);
                }
                attempt += 1;
                steps *= 2;
            }
            Err(e) => return Err(e),
        }
    }
}

fn integrate_compiled(
    params: &ModelParams,
    init: &StateVector,
    compiled: &CompiledPolicy,
    end_time: f64,
    total_steps: usize,
) -> Result<Trajectory> {
    let d = params.dims();
    let mut y = init.to_flat();
    let mut sc = Scratch::new(y.len());

    let mut times = vec![0.0];
    let mut states = vec![init.clone()];
    let mut controls: Vec<Vec<f64>> = Vec::new();
    check_admissible_flat(&y, 0.0)?;

    if end_time == 0.0 {
        return Ok(Trajectory { times, states, controls });
    }

    for seg in compiled.segments(end_time) {
        let len = seg.end - seg.start;
        if len <= 0.0 {
            continue;
        }
        let n = ((total_steps as f64 * len / end_time).ceil() as usize).max(1);
        let h = len / n as f64;
        for k in 0..n {
            rk4_step(d, &mut y, seg.control, h, &mut sc);
            // Land exactly on the segment end despite accumulated rounding.
            let t = if k + 1 == n { seg.end } else { seg.start + (k + 1) as f64 * h };
            check_admissible_flat(&y, t)?;
            times.push(t);
            states.push(StateVector::from_flat(&y));
            controls.push(seg.control.to_vec());
        }
    }
    Ok(Trajectory { times, states, controls })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ForwardingPolicy;

    fn small_params() -> ModelParams {
        ModelParams::new(2, 2, 1, 2.0, 2.0, 10.0, vec![4.0, 1.0, 0.0], 0.9).unwrap()
    }

    /// The six-level instance used throughout the convex-penalty examples.
    pub(crate) fn convex_instance() -> (ModelParams, StateVector) {
        let params = ModelParams::new(
            5,
            2,
            1,
            2.0,
            2.0,
            10.0,
            (0..=5).map(|i| ((5 - i) as f64).powi(2)).collect(),
            0.9,
        )
        .unwrap();
        let init = StateVector::new(
            vec![0.0, 0.0, 0.0, 0.55, 0.3, 0.1],
            vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.05],
        )
        .unwrap();
        (params, init)
    }

    #[test]
    fn params_reject_bad_costs() {
        assert!(ModelParams::new(2, 1, 2, 1.0, 1.0, 1.0, vec![2.0, 1.0, 0.0], 0.5).is_err());
        assert!(ModelParams::new(2, 3, 1, 1.0, 1.0, 1.0, vec![2.0, 1.0, 0.0], 0.5).is_err());
        assert!(ModelParams::new(2, 2, 0, 1.0, 1.0, 1.0, vec![2.0, 1.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn params_reject_non_decreasing_penalties() {
        assert!(ModelParams::new(2, 2, 1, 1.0, 1.0, 1.0, vec![1.0, 1.0, 0.0], 0.5).is_err());
        assert!(ModelParams::new(2, 2, 1, 1.0, 1.0, 1.0, vec![0.0, 1.0, 2.0], 0.5).is_err());
    }

    #[test]
    fn params_reject_delivery_probability_of_one() {
        assert!(ModelParams::new(2, 2, 1, 1.0, 1.0, 1.0, vec![2.0, 1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn rhs_matches_hand_evaluation() {
        // B = 2, s = 2, r = 1, β = 2, S = (0, 0.5, 0.3), I = (0, 0, 0.2), u₂ = 1.
        let params = small_params();
        let state =
            StateVector::new(vec![0.0, 0.5, 0.3], vec![0.0, 0.0, 0.2]).unwrap();
        let d = ode_rhs(&state, &[1.0], &params).unwrap();
        let tol = 1e-15;
        assert!((d.susceptible[0] - 0.0).abs() < tol);
        assert!((d.susceptible[1] - -0.2).abs() < tol);
        assert!((d.susceptible[2] - -0.12).abs() < tol);
        assert!((d.infective[0] - 0.52).abs() < tol);
        assert!((d.infective[1] - 0.12).abs() < tol);
        assert!((d.infective[2] - -0.32).abs() < tol);
        assert!((d.exposure - 0.2).abs() < tol);
        let sum: f64 =
            d.susceptible.iter().chain(d.infective.iter()).sum();
        assert!(sum.abs() < 1e-15);
    }

    #[test]
    fn rhs_is_zero_under_zero_control() {
        let params = small_params();
        let state = StateVector::new(vec![0.1, 0.4, 0.2], vec![0.05, 0.05, 0.2]).unwrap();
        let d = ode_rhs(&state, &[0.0], &params).unwrap();
        assert!(d.susceptible.iter().all(|v| *v == 0.0));
        assert!(d.infective.iter().all(|v| *v == 0.0));
        assert!((d.exposure - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rhs_is_zero_without_infectives() {
        let params = small_params();
        let state = StateVector::new(vec![0.2, 0.5, 0.3], vec![0.0, 0.0, 0.0]).unwrap();
        let d = ode_rhs(&state, &[0.7], &params).unwrap();
        assert!(d.susceptible.iter().all(|v| *v == 0.0));
        assert!(d.infective.iter().all(|v| *v == 0.0));
        assert_eq!(d.exposure, 0.0);
    }

    #[test]
    fn rhs_rejects_dimension_mismatch() {
        let params = small_params();
        let state = StateVector::new(vec![0.2, 0.5, 0.3], vec![0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            ode_rhs(&state, &[0.5, 0.5], &params),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rhs_conserves_mass_on_random_states() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let b = rng.gen_range(1..=6usize);
            let s = rng.gen_range(1..=b);
            let r = rng.gen_range(1..=s);
            let penalties: Vec<f64> = (0..=b).map(|i| (b - i) as f64 + 1.0).collect();
            let params =
                ModelParams::new(b, s, r, rng.gen_range(0.1..5.0), 1.0, 1.0, penalties, 0.0)
                    .unwrap();
            let mut raw: Vec<f64> = (0..2 * (b + 1)).map(|_| rng.gen_range(0.0..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|v| *v /= total);
            let state = StateVector::new(raw[..b + 1].to_vec(), raw[b + 1..].to_vec()).unwrap();
            let u: Vec<f64> = (0..params.num_controls()).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let d = ode_rhs(&state, &u, &params).unwrap();
            let sum: f64 = d.susceptible.iter().chain(d.infective.iter()).sum();
            assert!(sum.abs() <= 1e-12, "zero-sum violated: {sum}");
        }
    }

    #[test]
    fn zero_policy_freezes_states() {
        let (params, init) = convex_instance();
        let traj = integrate(&ForwardingPolicy::Zero, &params, &init, 10.0).unwrap();
        let q0 = init.transmitter_fraction(&params);
        for state in &traj.states {
            for i in 0..=params.max_energy {
                assert!((state.susceptible[i] - init.susceptible[i]).abs() < 1e-12);
                assert!((state.infective[i] - init.infective[i]).abs() < 1e-12);
            }
        }
        let expected_exposure = 10.0 * q0;
        assert!((traj.final_state().exposure - expected_exposure).abs() < 1e-9);
    }

    #[test]
    fn all_one_policy_trajectory_is_admissible_and_monotone() {
        let (params, init) = convex_instance();
        let traj = integrate(&ForwardingPolicy::One, &params, &init, 10.0).unwrap();
        let mut prev_mass = f64::INFINITY;
        let mut prev_s = init.susceptible.clone();
        let mut prev_e = -1.0;
        for state in &traj.states {
            let total: f64 =
                state.susceptible.iter().chain(state.infective.iter()).sum();
            assert!((total - 1.0).abs() <= NORMALIZATION_TOL);
            for (i, v) in state.susceptible.iter().enumerate() {
                assert!(*v >= -NEGATIVITY_SLACK);
                assert!(*v <= prev_s[i] + 1e-12, "S_{i} increased");
            }
            for v in &state.infective {
                assert!(*v >= -NEGATIVITY_SLACK);
            }
            let mass = state.forwarding_mass(&params);
            assert!(mass <= prev_mass + 1e-12, "forwarding mass increased");
            assert!(state.exposure >= prev_e);
            prev_mass = mass;
            prev_s = state.susceptible.clone();
            prev_e = state.exposure;
        }
        // Strictly decreasing while the forwarding pool and spread are alive.
        let first = traj.states[0].forwarding_mass(&params);
        let last = traj.final_state().forwarding_mass(&params);
        assert!(last < first);
    }

    #[test]
    fn step_halving_changes_terminal_state_below_tolerance() {
        let (params, init) = convex_instance();
        let coarse = integrate_with(
            &ForwardingPolicy::One,
            &params,
            &init,
            10.0,
            IntegrationConfig { steps: 2000, max_retries: 0 },
        )
        .unwrap();
        let fine = integrate_with(
            &ForwardingPolicy::One,
            &params,
            &init,
            10.0,
            IntegrationConfig { steps: 4000, max_retries: 0 },
        )
        .unwrap();
        let a = coarse.final_state();
        let b = fine.final_state();
        assert!((a.exposure - b.exposure).abs() <= 1e-6);
        for i in 0..=params.max_energy {
            assert!((a.susceptible[i] - b.susceptible[i]).abs() <= 1e-6);
            assert!((a.infective[i] - b.infective[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn integrate_rejects_nonzero_initial_exposure() {
        let (params, mut init) = convex_instance();
        init.exposure = 0.5;
        assert!(integrate(&ForwardingPolicy::Zero, &params, &init, 1.0).is_err());
    }

    #[test]
    fn integrate_at_zero_horizon_returns_single_point() {
        let (params, init) = convex_instance();
        let traj = integrate(&ForwardingPolicy::One, &params, &init, 0.0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.end_time(), 0.0);
    }
}
