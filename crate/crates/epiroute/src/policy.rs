//! The closed family of forwarding policies.
//!
//! The central member is the threshold policy: a node holding the message at
//! residual level `i` forwards copies until the message age passes a cutoff
//! `t_i`, then stops. The remaining variants are the heuristic classes used
//! as comparison baselines, plus a general piecewise-constant container for
//! verification inputs.
//!
//! Feedback variants (probability / infection threshold) latch: once the
//! control drops it never rises again. Because the mean-field system is
//! deterministic, their crossing instant is a fixed time, so every policy
//! compiles to a piecewise-constant control schedule that the integrator
//! resolves exactly. Controls are right-continuous: at a breakpoint the
//! post-jump value applies.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, IntegrationConfig, ModelParams, StateVector};

/// Per-level step schedule: `values[k]` applies on `[breaks[k-1], breaks[k])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSchedule {
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

/// A forwarding rule mapping (time, state) to per-level forwarding
/// probabilities over the controlled levels `s..=B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum ForwardingPolicy {
    /// Forward at probability one until the per-level cutoff time, then stop.
    Threshold(Vec<f64>),
    /// One common control for all levels: `value` until `jump`, then zero.
    StaticEnergy { jump: f64, value: f64 },
    /// Constant per-level controls over the whole horizon.
    StaticTime(Vec<f64>),
    /// All ones until the delivery probability reaches `q`, then zero
    /// (latching).
    ProbabilityThreshold(f64),
    /// All ones until the transmitter fraction `Σ_{i>=s} I_i` reaches `c`,
    /// then zero (latching).
    InfectionThreshold(f64),
    /// Flood at every opportunity.
    One,
    /// Never forward to relays (direct delivery only).
    Zero,
    /// General per-level step schedules, used as verification inputs.
    PiecewiseConstant(Vec<LevelSchedule>),
}

/// Caller-owned latch for the feedback variants.
#[derive(Debug, Clone, Default)]
pub struct EvalContext {
    latched: bool,
}

impl EvalContext {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ForwardingPolicy {
    /// An all-ones threshold policy expressed as cutoffs at the horizon.
    pub fn ones_threshold(params: &ModelParams) -> Self {
        Self::Threshold(vec![params.horizon; params.num_controls()])
    }

    /// A zero threshold policy (all cutoffs at time zero).
    pub fn zeros_threshold(params: &ModelParams) -> Self {
        Self::Threshold(vec![0.0; params.num_controls()])
    }

    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let m = params.num_controls();
        let horizon = params.horizon;
        let in_time = |t: f64| (0.0..=horizon).contains(&t);
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        match self {
            Self::Threshold(t) => {
                if t.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, got: t.len() });
                }
                if !t.iter().all(|v| in_time(*v)) {
                    return Err(Error::InvalidInput("threshold times must lie in [0, horizon]".into()));
                }
            }
            Self::StaticEnergy { jump, value } => {
                if !in_time(*jump) {
                    return Err(Error::InvalidInput("jump time must lie in [0, horizon]".into()));
                }
                if !in_unit(*value) {
                    return Err(Error::InvalidInput("control value must lie in [0, 1]".into()));
                }
            }
            Self::StaticTime(v) => {
                if v.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, got: v.len() });
                }
                if !v.iter().all(|x| in_unit(*x)) {
                    return Err(Error::InvalidInput("control values must lie in [0, 1]".into()));
                }
            }
            Self::ProbabilityThreshold(q) => {
                if !in_unit(*q) {
                    return Err(Error::InvalidInput("probability threshold must lie in [0, 1]".into()));
                }
            }
            Self::InfectionThreshold(c) => {
                if !in_unit(*c) {
                    return Err(Error::InvalidInput("infection threshold must lie in [0, 1]".into()));
                }
            }
            Self::One | Self::Zero => {}
            Self::PiecewiseConstant(levels) => {
                if levels.len() != m {
                    return Err(Error::DimensionMismatch { expected: m, got: levels.len() });
                }
                for lvl in levels {
                    if lvl.values.len() != lvl.breaks.len() + 1 {
                        return Err(Error::DimensionMismatch {
                            expected: lvl.breaks.len() + 1,
                            got: lvl.values.len(),
                        });
                    }
                    if !lvl.breaks.windows(2).all(|w| w[0] < w[1]) {
                        return Err(Error::InvalidInput("breakpoints must be strictly increasing".into()));
                    }
                    if !lvl.breaks.iter().all(|t| in_time(*t)) {
                        return Err(Error::InvalidInput("breakpoints must lie in [0, horizon]".into()));
                    }
                    if !lvl.values.iter().all(|v| in_unit(*v)) {
                        return Err(Error::InvalidInput("control values must lie in [0, 1]".into()));
                    }
                }
            }
        }
        Ok(())
    }

    /// The control vector at time `t`. Feedback variants consult `state` and
    /// the caller-owned latch in `ctx`; all other variants ignore both.
    pub fn control_at(
        &self,
        t: f64,
        state: &StateVector,
        params: &ModelParams,
        ctx: &mut EvalContext,
    ) -> Vec<f64> {
        let m = params.num_controls();
        match self {
            Self::Threshold(cutoffs) => {
                cutoffs.iter().map(|&ti| if t < ti { 1.0 } else { 0.0 }).collect()
            }
            Self::StaticEnergy { jump, value } => {
                let v = if t < *jump { *value } else { 0.0 };
                vec![v; m]
            }
            Self::StaticTime(values) => values.clone(),
            Self::ProbabilityThreshold(q) => {
                if !ctx.latched {
                    let delivered = 1.0 - (-params.destination_contact_rate * state.exposure).exp();
                    if delivered >= *q {
                        ctx.latched = true;
                    }
                }
                vec![if ctx.latched { 0.0 } else { 1.0 }; m]
            }
            Self::InfectionThreshold(c) => {
                if !ctx.latched && state.transmitter_fraction(params) >= *c {
                    ctx.latched = true;
                }
                vec![if ctx.latched { 0.0 } else { 1.0 }; m]
            }
            Self::One => vec![1.0; m],
            Self::Zero => vec![0.0; m],
            Self::PiecewiseConstant(levels) => levels
                .iter()
                .map(|lvl| {
                    let idx = lvl.breaks.iter().take_while(|b| **b <= t).count();
                    lvl.values[idx]
                })
                .collect(),
        }
    }

    /// Every time in `(0, horizon)` at which the compiled control vector
    /// changes. Feedback variants locate their crossing by integrating the
    /// all-ones control; one that never crosses yields an empty list.
    pub fn breakpoints(&self, params: &ModelParams, init: &StateVector) -> Result<Vec<f64>> {
        Ok(self.compile(params, init, params.horizon)?.boundaries)
    }

    /// If the policy is equivalent to a per-level cutoff vector, that vector.
    ///
    /// The agent simulator carries cutoffs in the message header, so it only
    /// accepts policies with such a form.
    pub fn as_threshold_vector(
        &self,
        params: &ModelParams,
        init: &StateVector,
        end_time: f64,
    ) -> Result<Vec<f64>> {
        let m = params.num_controls();
        match self {
            Self::Threshold(t) => Ok(t.clone()),
            Self::One => Ok(vec![end_time; m]),
            Self::Zero => Ok(vec![0.0; m]),
            Self::StaticEnergy { jump, value } if *value == 1.0 => Ok(vec![*jump; m]),
            Self::StaticEnergy { .. } | Self::StaticTime(_) | Self::PiecewiseConstant(_) => {
                Err(Error::NonThresholdPolicy)
            }
            Self::ProbabilityThreshold(_) | Self::InfectionThreshold(_) => {
                let compiled = self.compile(params, init, end_time)?;
                match compiled.boundaries.as_slice() {
                    [] => {
                        let all_on = compiled.controls[0].iter().all(|v| *v == 1.0);
                        Ok(vec![if all_on { end_time } else { 0.0 }; m])
                    }
                    [drop] => Ok(vec![*drop; m]),
                    _ => Err(Error::NonThresholdPolicy),
                }
            }
        }
    }

    /// Lowers the policy to the exact piecewise-constant schedule the
    /// integrator consumes.
    pub(crate) fn compile(
        &self,
        params: &ModelParams,
        init: &StateVector,
        end_time: f64,
    ) -> Result<CompiledPolicy> {
        self.validate(params)?;
        let m = params.num_controls();
        let interior = |t: f64| t > 0.0 && t < end_time;
        let compiled = match self {
            Self::Threshold(cutoffs) => {
                let mut boundaries: Vec<f64> = cutoffs.iter().copied().filter(|t| interior(*t)).collect();
                boundaries.sort_by(f64::total_cmp);
                boundaries.dedup();
                let mut controls = Vec::with_capacity(boundaries.len() + 1);
                let mut start = 0.0;
                for k in 0..=boundaries.len() {
                    controls.push(
                        cutoffs.iter().map(|&ti| if ti > start { 1.0 } else { 0.0 }).collect(),
                    );
                    if k < boundaries.len() {
                        start = boundaries[k];
                    }
                }
                CompiledPolicy { boundaries, controls }
            }
            Self::StaticEnergy { jump, value } => {
                if interior(*jump) && *value > 0.0 {
                    CompiledPolicy {
                        boundaries: vec![*jump],
                        controls: vec![vec![*value; m], vec![0.0; m]],
                    }
                } else {
                    let v = if *jump > 0.0 { *value } else { 0.0 };
                    CompiledPolicy::constant(vec![v; m])
                }
            }
            Self::StaticTime(values) => CompiledPolicy::constant(values.clone()),
            Self::One => CompiledPolicy::constant(vec![1.0; m]),
            Self::Zero => CompiledPolicy::constant(vec![0.0; m]),
            Self::ProbabilityThreshold(q) => {
                if *q <= 0.0 {
                    CompiledPolicy::constant(vec![0.0; m])
                } else {
                    let target = -(1.0 - q).ln() / params.destination_contact_rate;
                    let drop = crossing_under_ones(params, init, end_time, |state| {
                        state.exposure - target
                    })?;
                    CompiledPolicy::single_drop(drop, m)
                }
            }
            Self::InfectionThreshold(c) => {
                let drop = crossing_under_ones(params, init, end_time, |state| {
                    state.transmitter_fraction(params) - c
                })?;
                CompiledPolicy::single_drop(drop, m)
            }
            Self::PiecewiseConstant(levels) => {
                let mut boundaries: Vec<f64> = levels
                    .iter()
                    .flat_map(|lvl| lvl.breaks.iter().copied())
                    .filter(|t| interior(*t))
                    .collect();
                boundaries.sort_by(f64::total_cmp);
                boundaries.dedup();
                let mut controls = Vec::with_capacity(boundaries.len() + 1);
                let mut start = 0.0;
                for k in 0..=boundaries.len() {
                    controls.push(
                        levels
                            .iter()
                            .map(|lvl| {
                                let idx = lvl.breaks.iter().take_while(|b| **b <= start).count();
                                lvl.values[idx]
                            })
                            .collect(),
                    );
                    if k < boundaries.len() {
                        start = boundaries[k];
                    }
                }
                CompiledPolicy { boundaries, controls }
            }
        };
        Ok(compiled)
    }
}

/// Locates the first grid time at which a functional of the all-ones
/// trajectory reaches zero. The crossing is snapped to the integration grid,
/// so a per-step feedback evaluation on the same grid latches at the same
/// instant. `None` (encoded as a never-dropping schedule) when the functional
/// stays negative through `end_time`.
fn crossing_under_ones(
    params: &ModelParams,
    init: &StateVector,
    end_time: f64,
    f: impl Fn(&StateVector) -> f64,
) -> Result<Option<f64>> {
    if f(init) >= 0.0 {
        return Ok(Some(0.0));
    }
    if end_time == 0.0 {
        return Ok(None);
    }
    let traj = model::integrate_with(
        &ForwardingPolicy::One,
        params,
        init,
        end_time,
        IntegrationConfig::default(),
    )?;
    for k in 1..traj.len() {
        if f(&traj.states[k]) >= 0.0 {
            return Ok(Some(traj.times[k]));
        }
    }
    Ok(None)
}

/// A policy lowered to explicit control segments over `[0, end]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct CompiledPolicy {
    /// Strictly increasing interior breakpoints.
    pub(crate) boundaries: Vec<f64>,
    /// One control vector per segment (`boundaries.len() + 1` of them).
    pub(crate) controls: Vec<Vec<f64>>,
}

pub(crate) struct Segment<'a> {
    pub(crate) start: f64,
    pub(crate) end: f64,
    pub(crate) control: &'a [f64],
}

impl CompiledPolicy {
    fn constant(control: Vec<f64>) -> Self {
        Self { boundaries: Vec::new(), controls: vec![control] }
    }

    fn single_drop(drop: Option<f64>, m: usize) -> Self {
        match drop {
            None => Self::constant(vec![1.0; m]),
            Some(t) if t <= 0.0 => Self::constant(vec![0.0; m]),
            Some(t) => {
                Self { boundaries: vec![t], controls: vec![vec![1.0; m], vec![0.0; m]] }
            }
        }
    }

    pub(crate) fn segments(&self, end: f64) -> impl Iterator<Item = Segment<'_>> {
        let mut starts = Vec::with_capacity(self.boundaries.len() + 1);
        starts.push(0.0);
        starts.extend(self.boundaries.iter().copied().filter(move |b| *b < end));
        let n = starts.len();
        let boundaries = self.boundaries.clone();
        (0..n).map(move |k| Segment {
            start: starts[k],
            end: if k + 1 < n { boundaries[k] } else { end },
            control: &self.controls[k],
        })
    }
}
