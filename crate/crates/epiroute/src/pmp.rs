//! First-order optimality checks for threshold candidates.
//!
//! The forwarding problem's adjoint system assigns co-states `λ_i` to the
//! susceptible fractions, `ρ_i` to the infective fractions, and a constant
//! multiplier `λ_E` to the accumulated exposure. A candidate policy is
//! checked against the necessary conditions of the maximum principle: the
//! per-level switching functions
//!
//! `φ_i = β I_i Σ_{j>=r} (-λ_j + ρ_{j-r} + ρ_{i-s} - ρ_i) S_j`
//!
//! must be positive where the control is one and negative where it is zero,
//! each active `φ_i` crosses zero at most once (downward), the Hamiltonian is
//! constant in time, and the terminal switching values are negative wherever
//! infectives remain. Since the co-state flow is affine in `λ_E`, two
//! backward passes give the whole family `φ_i(t; λ_E)`; the verifier picks
//! `λ_E >= 0` by minimizing the integrated control/switching mismatch and
//! judges the candidate at that multiplier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{required_exposure, StoppingPenalty, CONSTRAINT_ACTIVITY_TOL};
use crate::model::{
    self, rk4_step, Dims, IntegrationConfig, ModelParams, Scratch, StateVector, Trajectory,
};
use crate::policy::ForwardingPolicy;

/// Adjoint values at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoState {
    /// Adjoints of the susceptible fractions, `λ_0..λ_B`.
    pub lambda: Vec<f64>,
    /// Adjoints of the infective fractions, `ρ_0..ρ_B`.
    pub rho: Vec<f64>,
}

/// Time derivative of a [`CoState`]; the exposure adjoint is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct CoStateDerivative {
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    /// Always zero; the Hamiltonian does not depend on the exposure.
    pub lambda_e: f64,
}

/// Adjoint trajectory on the same grid as the state trajectory it was
/// integrated against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoStateTrajectory {
    pub times: Vec<f64>,
    pub points: Vec<CoState>,
    /// The exposure adjoint, constant in time.
    pub lambda_e: f64,
    /// The abnormality multiplier; 1 in the normal case.
    pub lambda0_bar: f64,
}

impl CoStateTrajectory {
    pub fn terminal(&self) -> &CoState {
        self.points.last().expect("co-state trajectory has at least one point")
    }
}

#[inline]
fn costate_rhs_flat(
    d: Dims,
    state: &[f64],
    co: &[f64],
    u: &[f64],
    lambda_e: f64,
    out: &mut [f64],
) {
    let b = d.b;
    let n = b + 1;
    let su = &state[..n];
    let inf = &state[n..2 * n];
    let (lam, rho) = co.split_at(n);

    let mut weighted_tx = 0.0; // Σ u_j I_j
    let mut weighted_rho_drop = 0.0; // Σ u_j ρ_{j-s} I_j
    let mut weighted_rho = 0.0; // Σ u_j ρ_j I_j
    for j in d.s..=b {
        let w = u[j - d.s] * inf[j];
        weighted_tx += w;
        weighted_rho_drop += w * rho[j - d.s];
        weighted_rho += w * rho[j];
    }
    let mut receptive = 0.0; // Σ_{j>=r} S_j
    let mut lam_s = 0.0; // Σ_{j>=r} λ_j S_j
    let mut rho_recv = 0.0; // Σ_{j>=r} ρ_{j-r} S_j
    for j in d.r..=b {
        receptive += su[j];
        lam_s += lam[j] * su[j];
        rho_recv += rho[j - d.r] * su[j];
    }

    let beta = d.beta;
    for i in 0..=b {
        out[i] = if i >= d.r {
            beta * ((lam[i] - rho[i - d.r]) * weighted_tx - weighted_rho_drop + weighted_rho)
        } else {
            0.0
        };
        out[n + i] = if i >= d.s {
            beta * u[i - d.s] * (lam_s - rho_recv + (rho[i] - rho[i - d.s]) * receptive) - lambda_e
        } else {
            0.0
        };
    }
}

/// Evaluates the adjoint system's right-hand side at one instant.
pub fn costate_rhs(
    costate: &CoState,
    lambda_e: f64,
    state: &StateVector,
    u: &[f64],
    params: &ModelParams,
) -> Result<CoStateDerivative> {
    params.validate()?;
    let n = params.max_energy + 1;
    for len in [costate.lambda.len(), costate.rho.len(), state.num_levels()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    if u.len() != params.num_controls() {
        return Err(Error::DimensionMismatch { expected: params.num_controls(), got: u.len() });
    }
    let flat_state = state.to_flat();
    let mut co = Vec::with_capacity(2 * n);
    co.extend_from_slice(&costate.lambda);
    co.extend_from_slice(&costate.rho);
    let mut out = vec![0.0; 2 * n];
    costate_rhs_flat(params.dims(), &flat_state, &co, u, lambda_e, &mut out);
    Ok(CoStateDerivative {
        lambda: out[..n].to_vec(),
        rho: out[n..].to_vec(),
        lambda_e: 0.0,
    })
}

/// Integrates the adjoint system backward from its terminal conditions
/// (`λ_i(T) = ρ_i(T) = -λ̄₀ a_i`) over the grid of `traj`.
///
/// The mid-step states the backward integrator needs are reconstructed with a
/// forward half-step from the stored grid state, so the scheme keeps its
/// fourth order.
pub fn integrate_costates(
    traj: &Trajectory,
    lambda_e_terminal: f64,
    lambda0_bar: f64,
    params: &ModelParams,
) -> Result<CoStateTrajectory> {
    params.validate()?;
    if !(lambda_e_terminal >= 0.0) {
        return Err(Error::InvalidInput("exposure adjoint must be non-negative".into()));
    }
    if lambda0_bar != 0.0 && lambda0_bar != 1.0 {
        return Err(Error::InvalidInput("abnormality multiplier must be 0 or 1".into()));
    }
    let n = params.max_energy + 1;
    let pts = traj.len();
    let d = params.dims();

    let terminal: Vec<f64> = params
        .penalties
        .iter()
        .chain(params.penalties.iter())
        .map(|a| -lambda0_bar * a)
        .collect();

    let mut points = vec![
        CoState { lambda: terminal[..n].to_vec(), rho: terminal[n..].to_vec() };
        pts
    ];
    let mut co = terminal;
    let mut sc_state = Scratch::new(2 * n + 1);
    let mut k1 = vec![0.0; 2 * n];
    let mut k2 = vec![0.0; 2 * n];
    let mut k3 = vec![0.0; 2 * n];
    let mut k4 = vec![0.0; 2 * n];
    let mut tmp = vec![0.0; 2 * n];

    for j in (0..pts.saturating_sub(1)).rev() {
        let h = traj.times[j + 1] - traj.times[j];
        let u = &traj.controls[j];
        let x_right = traj.states[j + 1].to_flat();
        let x_left = traj.states[j].to_flat();
        let mut x_mid = x_left.clone();
        rk4_step(d, &mut x_mid, u, 0.5 * h, &mut sc_state);

        let hb = -h;
        costate_rhs_flat(d, &x_right, &co, u, lambda_e_terminal, &mut k1);
        for (t, (c, k)) in tmp.iter_mut().zip(co.iter().zip(k1.iter())) {
            *t = c + 0.5 * hb * k;
        }
        costate_rhs_flat(d, &x_mid, &tmp, u, lambda_e_terminal, &mut k2);
        for (t, (c, k)) in tmp.iter_mut().zip(co.iter().zip(k2.iter())) {
            *t = c + 0.5 * hb * k;
        }
        costate_rhs_flat(d, &x_mid, &tmp, u, lambda_e_terminal, &mut k3);
        for (t, (c, k)) in tmp.iter_mut().zip(co.iter().zip(k3.iter())) {
            *t = c + hb * k;
        }
        costate_rhs_flat(d, &x_left, &tmp, u, lambda_e_terminal, &mut k4);
        let w = hb / 6.0;
        for (i, c) in co.iter_mut().enumerate() {
            *c += w * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            if !c.is_finite() {
                return Err(Error::NonFinite { t: traj.times[j] });
            }
        }
        points[j] = CoState { lambda: co[..n].to_vec(), rho: co[n..].to_vec() };
    }

    Ok(CoStateTrajectory {
        times: traj.times.clone(),
        points,
        lambda_e: lambda_e_terminal,
        lambda0_bar,
    })
}

/// The switching function `φ_i` of one controlled level.
pub fn switching_function(
    level: usize,
    state: &StateVector,
    costate: &CoState,
    params: &ModelParams,
) -> Result<f64> {
    if !params.control_levels().contains(&level) {
        return Err(Error::InvalidInput(format!(
            "level {level} is outside the controlled range {}..={}",
            params.transmit_cost, params.max_energy
        )));
    }
    let r = params.receive_cost;
    let s = params.transmit_cost;
    let mut acc = 0.0;
    for j in r..=params.max_energy {
        acc += (-costate.lambda[j] + costate.rho[j - r] + costate.rho[level - s]
            - costate.rho[level])
            * state.susceptible[j];
    }
    Ok(params.contact_rate * state.infective[level] * acc)
}

/// Tolerance at which the two algebraic forms of the Hamiltonian must agree.
pub const HAMILTONIAN_FORM_TOL: f64 = 1e-10;

/// The Hamiltonian of the forwarding problem, evaluated through both its full
/// expansion and its switching-function form
/// `λ_E Σ_{i>=s} I_i + Σ φ_i u_i`; the two must agree to
/// [`HAMILTONIAN_FORM_TOL`] (scaled by the magnitude) or the state/co-state
/// pair is inconsistent.
pub fn hamiltonian(
    state: &StateVector,
    costate: &CoState,
    lambda_e: f64,
    u: &[f64],
    params: &ModelParams,
) -> Result<f64> {
    let n = params.max_energy + 1;
    if u.len() != params.num_controls() {
        return Err(Error::DimensionMismatch { expected: params.num_controls(), got: u.len() });
    }
    if state.num_levels() != n || costate.lambda.len() != n || costate.rho.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: state.num_levels() });
    }
    let beta = params.contact_rate;
    let s = params.transmit_cost;
    let r = params.receive_cost;

    // Full expansion.
    let mut weighted_tx = 0.0;
    let mut transmitters = 0.0;
    for j in s..=params.max_energy {
        weighted_tx += u[j - s] * state.infective[j];
        transmitters += state.infective[j];
    }
    let mut receptive = 0.0;
    let mut full = 0.0;
    for i in r..=params.max_energy {
        full += beta * (costate.rho[i - r] - costate.lambda[i]) * state.susceptible[i]
            * weighted_tx;
        receptive += state.susceptible[i];
    }
    for i in s..=params.max_energy {
        full += beta
            * u[i - s]
            * (costate.rho[i - s] - costate.rho[i])
            * state.infective[i]
            * receptive;
    }
    full += lambda_e * transmitters;

    // Switching-function form.
    let mut by_phi = lambda_e * transmitters;
    for i in s..=params.max_energy {
        by_phi += switching_function(i, state, costate, params)? * u[i - s];
    }

    let deviation = (full - by_phi).abs();
    let tolerance = HAMILTONIAN_FORM_TOL * (1.0 + full.abs());
    if deviation > tolerance {
        return Err(Error::HamiltonianMismatch { deviation, tolerance });
    }
    Ok(full)
}

/// Verification tolerances and options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub integration: IntegrationConfig,
    /// The violation measure must stay below this fraction of the horizon.
    pub violation_tol_per_time: f64,
    /// Relative tolerance on Hamiltonian constancy and the stopping-time
    /// transversality gap.
    pub hamiltonian_tol: f64,
    /// Absolute slack on `E(T)` within which the throughput constraint is
    /// treated as active.
    pub activity_tol: f64,
    /// When verifying a stopping-time candidate, its terminal-time penalty;
    /// enables the transversality check `f'(T) = λ_E Σ_{i>=s} I_i(T)`.
    pub stopping: Option<StoppingPenalty>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            integration: IntegrationConfig::default(),
            violation_tol_per_time: 1e-2,
            hamiltonian_tol: 1e-3,
            activity_tol: CONSTRAINT_ACTIVITY_TOL,
            stopping: None,
        }
    }
}

/// Overall verdict of a verification run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerificationStatus {
    /// Every check passed at the fitted multiplier.
    Pass,
    /// At least one necessary condition is violated beyond tolerance.
    Fail,
    /// `E(T)` exceeds the requirement, so complementary slackness forces
    /// `λ_E = 0` and the normal-case checks do not apply.
    ConstraintInactive,
}

/// One named check with its measured value and tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
}

/// Per-level switching diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub level: usize,
    /// Whether the level's infective population is ever positive.
    pub active: bool,
    pub cutoff: f64,
    pub terminal_phi: f64,
    /// Strict `+ → -` sign changes of `φ` along the grid.
    pub descents: usize,
    /// Strict `- → +` sign changes (none are allowed).
    pub ascents: usize,
    /// First downward zero crossing of `φ`, when one exists.
    pub crossing: Option<f64>,
}

/// Convexity diagnostics for the monotone-threshold property.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsiDiagnostics {
    /// Largest `ψ_{i,k}(T) = (a_{i-s} - a_i) - (a_{k-s} - a_k)` over `k < i`;
    /// negative for strictly convex penalties.
    pub max_terminal_psi: f64,
    /// Whether the reported cutoffs are non-decreasing over active levels.
    pub cutoffs_monotone: bool,
}

/// Outcome of [`verify_pmp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub status: VerificationStatus,
    /// The fitted exposure adjoint.
    pub lambda_e: f64,
    pub lambda0_bar: f64,
    /// Integrated switching/control mismatch at the fitted multiplier.
    pub violation_measure: f64,
    /// `max_t |H(t) - H(T)|`.
    pub hamiltonian_deviation: f64,
    /// `E(T)` minus the required exposure.
    pub constraint_slack: f64,
    /// Largest value over the grid of `H - λ_E (Σ_{j>=s} I_j + Σ_{j>=r} S_j)`;
    /// negative everywhere at a genuine optimum.
    pub interior_bound_max: f64,
    pub levels: Vec<LevelDiagnostics>,
    pub psi: Option<PsiDiagnostics>,
    /// `f'(T) - λ_E Σ_{i>=s} I_i(T)` for stopping-time candidates.
    pub transversality_gap: Option<f64>,
    pub checks: Vec<Check>,
    /// True when every threshold equals the horizon; such candidates belong
    /// to the abnormal case, which this verifier flags without judging.
    pub all_cutoffs_at_horizon: bool,
}

impl VerificationReport {
    pub fn pass(&self) -> bool {
        self.status == VerificationStatus::Pass
    }
}

/// Integrated mismatch between a control and the sign of its switching
/// functions: `∫ Σ_i [max(φ_i,0)(1-u_i) + max(-φ_i,0) u_i] dt`, zero exactly
/// when the control maximizes the Hamiltonian almost everywhere.
fn violation_measure(
    phi: &[Vec<f64>],
    traj: &Trajectory,
    m: usize,
) -> f64 {
    let mut total = 0.0;
    for seg in 0..traj.len() - 1 {
        let h = traj.times[seg + 1] - traj.times[seg];
        let mut v_left = 0.0;
        let mut v_right = 0.0;
        for i in 0..m {
            let u = traj.controls[seg][i];
            let pl = phi[seg][i];
            let pr = phi[seg + 1][i];
            v_left += pl.max(0.0) * (1.0 - u) + (-pl).max(0.0) * u;
            v_right += pr.max(0.0) * (1.0 - u) + (-pr).max(0.0) * u;
        }
        total += 0.5 * h * (v_left + v_right);
    }
    total
}

/// Checks a threshold candidate against the necessary optimality conditions.
///
/// The exposure adjoint is chosen by golden-section minimization of the
/// violation measure over `λ_E >= 0` (the co-state flow is affine in `λ_E`,
/// so the search runs over a convex function assembled from two backward
/// passes). The normal case `λ̄₀ = 1` is assumed; candidates whose cutoffs all
/// sit at the horizon are flagged as potentially abnormal rather than judged.
pub fn verify_pmp(
    policy: &ForwardingPolicy,
    params: &ModelParams,
    init: &StateVector,
    cfg: &VerifyConfig,
) -> Result<VerificationReport> {
    let ForwardingPolicy::Threshold(cutoffs) = policy else {
        return Err(Error::NonThresholdPolicy);
    };
    params.validate()?;
    policy.validate(params)?;
    let end = params.horizon;
    let traj = model::integrate_with(policy, params, init, end, cfg.integration)?;
    let slack = traj.final_state().exposure - required_exposure(params);

    let m = params.num_controls();
    let s = params.transmit_cost;
    let pts = traj.len();

    // φ per grid point and level for the two backward passes: the base pass
    // carries the terminal penalties with λ_E = 0, the response pass isolates
    // λ_E. Their superposition spans every admissible multiplier.
    let base = integrate_costates(&traj, 0.0, 1.0, params)?;
    let response = integrate_costates(&traj, 1.0, 0.0, params)?;

    let phi_of = |co: &CoStateTrajectory| -> Vec<Vec<f64>> {
        (0..pts)
            .map(|k| {
                (0..m)
                    .map(|i| {
                        switching_function(s + i, &traj.states[k], &co.points[k], params)
                            .expect("level in range")
                    })
                    .collect()
            })
            .collect()
    };
    let phi_base = phi_of(&base);
    let phi_resp = phi_of(&response);

    let v_at = |lambda_e: f64| -> f64 {
        let phi: Vec<Vec<f64>> = phi_base
            .iter()
            .zip(phi_resp.iter())
            .map(|(b, r)| b.iter().zip(r.iter()).map(|(pb, pr)| pb + lambda_e * pr).collect())
            .collect();
        violation_measure(&phi, &traj, m)
    };

    // Constraint inactive: complementary slackness pins λ_E to zero and the
    // remaining normal-case checks do not apply.
    if slack > cfg.activity_tol {
        return Ok(VerificationReport {
            status: VerificationStatus::ConstraintInactive,
            lambda_e: 0.0,
            lambda0_bar: 1.0,
            violation_measure: v_at(0.0),
            hamiltonian_deviation: f64::NAN,
            constraint_slack: slack,
            interior_bound_max: f64::NAN,
            levels: Vec::new(),
            psi: None,
            transversality_gap: None,
            checks: vec![Check {
                name: "constraint_active".into(),
                pass: false,
                value: slack,
                tolerance: cfg.activity_tol,
            }],
            all_cutoffs_at_horizon: cutoffs.iter().all(|t| *t >= end),
        });
    }

    // Bracket and golden-section the multiplier.
    let mut hi = 1.0f64;
    for _ in 0..40 {
        if v_at(hi) > v_at(0.5 * hi) {
            break;
        }
        hi *= 4.0;
    }
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0f64, hi);
    let mut x1 = b - golden * (b - a);
    let mut x2 = a + golden * (b - a);
    let mut f1 = v_at(x1);
    let mut f2 = v_at(x2);
    for _ in 0..200 {
        if b - a < 1e-10 * (1.0 + hi) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - golden * (b - a);
            f1 = v_at(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + golden * (b - a);
            f2 = v_at(x2);
        }
    }
    let lambda_e = 0.5 * (a + b);

    // Final direct pass at the fitted multiplier for reporting.
    let costates = integrate_costates(&traj, lambda_e, 1.0, params)?;
    let phi: Vec<Vec<f64>> = (0..pts)
        .map(|k| {
            (0..m)
                .map(|i| {
                    switching_function(s + i, &traj.states[k], &costates.points[k], params)
                        .expect("level in range")
                })
                .collect()
        })
        .collect();
    let v = violation_measure(&phi, &traj, m);

    // Hamiltonian along the grid, evaluated with each segment's control on
    // both of its endpoints so a jump at a switching instant is visible.
    let h_terminal = hamiltonian(
        traj.final_state(),
        costates.terminal(),
        lambda_e,
        &traj.controls[pts - 2],
        params,
    )?;
    let mut h_dev = 0.0f64;
    let mut interior_bound_max = f64::NEG_INFINITY;
    for seg in 0..pts - 1 {
        for k in [seg, seg + 1] {
            let h = hamiltonian(
                &traj.states[k],
                &costates.points[k],
                lambda_e,
                &traj.controls[seg],
                params,
            )?;
            h_dev = h_dev.max((h - h_terminal).abs());
            let bound = h
                - lambda_e
                    * (traj.states[k].transmitter_fraction(params)
                        + traj.states[k].receptive_fraction(params));
            interior_bound_max = interior_bound_max.max(bound);
        }
    }

    // Per-level switching diagnostics.
    let grid_h = traj.times.windows(2).map(|w| w[1] - w[0]).fold(0.0f64, f64::max);
    let mut levels = Vec::with_capacity(m);
    let mut pointwise_ok = true;
    for i in 0..m {
        let series: Vec<f64> = (0..pts).map(|k| phi[k][i]).collect();
        let active = (0..pts).any(|k| traj.states[k].infective[s + i] > 0.0);
        let scale = series.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let eps = 1e-12 * scale;
        let mut descents = 0;
        let mut ascents = 0;
        let mut crossing = None;
        let mut prev_sign = 0i8;
        let mut prev = (traj.times[0], series[0]);
        for (k, &value) in series.iter().enumerate() {
            if value.abs() <= eps {
                continue;
            }
            let sign = if value > 0.0 { 1 } else { -1 };
            if prev_sign == 1 && sign == -1 {
                descents += 1;
                if crossing.is_none() {
                    let (t0, v0) = prev;
                    let t1 = traj.times[k];
                    crossing = Some(t0 + (t1 - t0) * v0 / (v0 - value));
                }
            }
            if prev_sign == -1 && sign == 1 {
                ascents += 1;
            }
            prev_sign = sign;
            prev = (traj.times[k], value);
        }
        // Pointwise maximization: φ_i u_i must not be significantly negative
        // away from the level's switching instant (the instant itself has
        // measure zero and carries the discretization error of the cutoff).
        let cutoff = cutoffs[i];
        for seg in 0..pts - 1 {
            let u = traj.controls[seg][i];
            for k in [seg, seg + 1] {
                let t = traj.times[k];
                if (t - cutoff).abs() <= 2.0 * grid_h {
                    continue;
                }
                if phi[k][i] * u < -1e-9 {
                    pointwise_ok = false;
                }
            }
        }
        levels.push(LevelDiagnostics {
            level: s + i,
            active,
            cutoff,
            terminal_phi: series[pts - 1],
            descents,
            ascents,
            crossing,
        });
    }

    // Terminal switching values must be negative wherever infectives remain.
    let terminal_phi_ok = levels
        .iter()
        .all(|l| traj.final_state().infective[l.level] <= 0.0 || l.terminal_phi < 0.0);

    let sign_structure_ok =
        levels.iter().all(|l| !l.active || (l.ascents == 0 && l.descents <= 1));

    // Monotone-threshold diagnostics for strictly convex penalties.
    let psi = params.penalties_strictly_convex().then(|| {
        let a = &params.penalties;
        let mut max_psi = f64::NEG_INFINITY;
        for i in s..=params.max_energy {
            for k in s..i {
                max_psi = max_psi.max((a[i - s] - a[i]) - (a[k - s] - a[k]));
            }
        }
        let active_cutoffs: Vec<f64> =
            levels.iter().filter(|l| l.active).map(|l| l.cutoff).collect();
        PsiDiagnostics {
            max_terminal_psi: max_psi,
            cutoffs_monotone: active_cutoffs.windows(2).all(|w| w[0] <= w[1] + 1e-9),
        }
    });

    // For a stopping-time candidate the terminal condition determines the
    // multiplier outright: λ_E = f'(T) / Σ_{i>=s} I_i(T). The fitted
    // multiplier is barely constrained when few levels are active (the
    // mismatch is flat over wide multiplier ranges), so the meaningful joint
    // test is whether the switching structure also holds at the
    // transversality-determined multiplier.
    let transversality = cfg.stopping.as_ref().map(|pen| {
        let transmitters = traj.final_state().transmitter_fraction(params);
        let gap = pen.slope(end) - lambda_e * transmitters;
        let v_trans = if transmitters > 0.0 {
            v_at(pen.slope(end) / transmitters)
        } else {
            f64::INFINITY
        };
        (gap, v_trans)
    });

    let tol_v = cfg.violation_tol_per_time * end;
    let tol_h = cfg.hamiltonian_tol * (1.0 + h_terminal.abs());
    let mut checks = vec![
        Check { name: "violation_measure".into(), pass: v <= tol_v, value: v, tolerance: tol_v },
        Check {
            name: "switching_sign_structure".into(),
            pass: sign_structure_ok,
            value: levels.iter().map(|l| (l.ascents + l.descents) as f64).sum(),
            tolerance: m as f64,
        },
        Check {
            name: "pointwise_maximization".into(),
            pass: pointwise_ok,
            value: if pointwise_ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
        },
        Check {
            name: "hamiltonian_constancy".into(),
            pass: h_dev <= tol_h,
            value: h_dev,
            tolerance: tol_h,
        },
        Check {
            name: "terminal_switching_negative".into(),
            pass: terminal_phi_ok,
            value: levels.iter().map(|l| l.terminal_phi).fold(f64::NEG_INFINITY, f64::max),
            tolerance: 0.0,
        },
        Check {
            name: "interior_bound_negative".into(),
            pass: interior_bound_max < 0.0,
            value: interior_bound_max,
            tolerance: 0.0,
        },
    ];
    if let Some(psi) = &psi {
        checks.push(Check {
            name: "terminal_psi_negative".into(),
            pass: psi.max_terminal_psi < 0.0,
            value: psi.max_terminal_psi,
            tolerance: 0.0,
        });
        checks.push(Check {
            name: "cutoffs_monotone".into(),
            pass: psi.cutoffs_monotone,
            value: if psi.cutoffs_monotone { 0.0 } else { 1.0 },
            tolerance: 0.0,
        });
    }
    if let Some((_, v_trans)) = transversality {
        checks.push(Check {
            name: "stopping_transversality".into(),
            pass: v_trans <= tol_v,
            value: v_trans,
            tolerance: tol_v,
        });
    }

    let status = if checks.iter().all(|c| c.pass) {
        VerificationStatus::Pass
    } else {
        VerificationStatus::Fail
    };
    Ok(VerificationReport {
        status,
        lambda_e,
        lambda0_bar: 1.0,
        violation_measure: v,
        hamiltonian_deviation: h_dev,
        constraint_slack: slack,
        interior_bound_max,
        levels,
        psi,
        transversality_gap: transversality.map(|(gap, _)| gap),
        checks,
        all_cutoffs_at_horizon: cutoffs.iter().all(|t| *t >= end),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::energy_cost;
    use crate::optimize::{optimize_fixed_t, SearchConfig};

    fn b2_params() -> ModelParams {
        ModelParams::new(2, 2, 1, 2.0, 2.0, 4.0, vec![4.0, 1.0, 0.0], 0.5).unwrap()
    }

    fn b4_params(p: f64) -> ModelParams {
        ModelParams::new(4, 2, 1, 2.0, 2.0, 8.0, vec![16.0, 9.0, 4.0, 1.0, 0.0], p).unwrap()
    }

    fn b4_init() -> StateVector {
        StateVector::new(vec![0.0, 0.0, 0.3, 0.35, 0.25], vec![0.0, 0.0, 0.0, 0.0, 0.1]).unwrap()
    }

    #[test]
    fn costate_rhs_is_zero_under_zero_control_except_exposure_coupling() {
        let params = b2_params();
        let state = StateVector::new(vec![0.1, 0.4, 0.2], vec![0.1, 0.05, 0.15]).unwrap();
        let co = CoState { lambda: vec![0.3, -0.2, 0.5], rho: vec![-0.1, 0.2, 0.4] };
        let lambda_e = 0.7;
        let d = costate_rhs(&co, lambda_e, &state, &[0.0], &params).unwrap();
        assert!(d.lambda.iter().all(|v| *v == 0.0));
        assert_eq!(d.rho[0], 0.0);
        assert_eq!(d.rho[1], 0.0);
        assert!((d.rho[2] - -lambda_e).abs() < 1e-15);
        assert_eq!(d.lambda_e, 0.0);
    }

    #[test]
    fn costate_rhs_matches_finite_difference_gradient_of_hamiltonian() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let b = rng.gen_range(2..=4usize);
            let s = rng.gen_range(1..=b.min(2));
            let r = rng.gen_range(1..=s);
            let n = b + 1;
            let penalties: Vec<f64> = (0..=b).map(|i| ((b - i) as f64).powi(2) + 1.0).collect();
            let params = ModelParams::new(b, s, r, 1.7, 1.0, 1.0, penalties, 0.3).unwrap();
            let mut raw: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|v| *v /= total);
            let state = StateVector::new(raw[..n].to_vec(), raw[n..].to_vec()).unwrap();
            let co = CoState {
                lambda: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                rho: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            };
            let lambda_e = rng.gen_range(0.0..2.0);
            let u: Vec<f64> =
                (0..params.num_controls()).map(|_| rng.gen_range(0.0..=1.0)).collect();

            let d = costate_rhs(&co, lambda_e, &state, &u, &params).unwrap();

            // -dH/dS_k and -dH/dI_k by central differences: the Hamiltonian
            // is polynomial in the state, so plain perturbations work without
            // renormalization.
            let eps = 1e-6;
            let h_at = |st: &StateVector| hamiltonian(st, &co, lambda_e, &u, &params).unwrap();
            for k in 0..n {
                let mut plus = state.clone();
                plus.susceptible[k] += eps;
                let mut minus = state.clone();
                minus.susceptible[k] -= eps;
                let grad = (h_at(&plus) - h_at(&minus)) / (2.0 * eps);
                assert!(
                    (d.lambda[k] + grad).abs() <= 1e-6 * (1.0 + grad.abs()),
                    "lambda_dot[{k}] = {} vs -dH/dS = {}",
                    d.lambda[k],
                    -grad
                );
                let mut plus = state.clone();
                plus.infective[k] += eps;
                let mut minus = state.clone();
                minus.infective[k] -= eps;
                let grad = (h_at(&plus) - h_at(&minus)) / (2.0 * eps);
                assert!(
                    (d.rho[k] + grad).abs() <= 1e-6 * (1.0 + grad.abs()),
                    "rho_dot[{k}] = {} vs -dH/dI = {}",
                    d.rho[k],
                    -grad
                );
            }
        }
    }

    #[test]
    fn switching_function_hand_evaluation() {
        // B = 2, s = 2, r = 1, β = 2, S = (0, 0.5, 0.3), I = (0, 0, 0.2).
        let params = b2_params();
        let state = StateVector::new(vec![0.0, 0.5, 0.3], vec![0.0, 0.0, 0.2]).unwrap();
        let co = CoState { lambda: vec![0.1, 0.2, 0.3], rho: vec![-0.1, 0.4, -0.2] };
        let phi = switching_function(2, &state, &co, &params).unwrap();
        // φ₂ = 2·0.2·[(-0.2 - 0.1 - 0.1 + 0.2)·0.5 + (-0.3 + 0.4 - 0.1 + 0.2)·0.3]
        assert!((phi - -0.016).abs() < 1e-15);
        assert!(switching_function(1, &state, &co, &params).is_err());
    }

    #[test]
    fn switching_function_vanishes_without_infectives() {
        let params = b2_params();
        let state = StateVector::new(vec![0.3, 0.5, 0.2], vec![0.0, 0.0, 0.0]).unwrap();
        let co = CoState { lambda: vec![0.1, 0.2, 0.3], rho: vec![-0.1, 0.4, -0.2] };
        assert_eq!(switching_function(2, &state, &co, &params).unwrap(), 0.0);
    }

    #[test]
    fn hamiltonian_special_cases() {
        let params = b2_params();
        let co = CoState { lambda: vec![0.1, 0.2, 0.3], rho: vec![-0.1, 0.4, -0.2] };
        let state = StateVector::new(vec![0.0, 0.5, 0.3], vec![0.0, 0.05, 0.15]).unwrap();
        let lambda_e = 0.9;
        let h = hamiltonian(&state, &co, lambda_e, &[0.0], &params).unwrap();
        assert!((h - lambda_e * 0.15).abs() < 1e-15);
        let empty = StateVector::new(vec![0.4, 0.4, 0.2], vec![0.0, 0.0, 0.0]).unwrap();
        let h = hamiltonian(&empty, &co, lambda_e, &[0.8], &params).unwrap();
        assert_eq!(h, 0.0);
    }

    #[test]
    fn terminal_costates_match_penalties_and_lambda_e_is_constant() {
        let params = b4_params(0.85);
        let policy = ForwardingPolicy::Threshold(vec![1.0, 2.0, 3.0]);
        let traj = model::integrate(&policy, &params, &b4_init(), 8.0).unwrap();
        let co = integrate_costates(&traj, 0.4, 1.0, &params).unwrap();
        let terminal = co.terminal();
        for i in 0..=params.max_energy {
            assert!((terminal.lambda[i] + params.penalties[i]).abs() < 1e-12);
            assert!((terminal.rho[i] + params.penalties[i]).abs() < 1e-12);
        }
        assert_eq!(co.lambda_e, 0.4);
        // λ below the receive cost and ρ below the transmit cost never move.
        for pt in &co.points {
            assert_eq!(pt.lambda[0], terminal.lambda[0]);
            assert_eq!(pt.rho[0], terminal.rho[0]);
            assert_eq!(pt.rho[1], terminal.rho[1]);
        }
    }

    #[test]
    fn costate_grid_halving_converges() {
        let params = b4_params(0.85);
        let policy = ForwardingPolicy::Threshold(vec![1.0, 2.0, 3.0]);
        let run = |steps: usize| {
            let traj = model::integrate_with(
                &policy,
                &params,
                &b4_init(),
                8.0,
                IntegrationConfig { steps, max_retries: 0 },
            )
            .unwrap();
            integrate_costates(&traj, 0.4, 1.0, &params).unwrap()
        };
        let coarse = run(2000);
        let fine = run(4000);
        for i in 0..=params.max_energy {
            assert!((coarse.points[0].lambda[i] - fine.points[0].lambda[i]).abs() <= 1e-6);
            assert!((coarse.points[0].rho[i] - fine.points[0].rho[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn terminal_switching_values_are_negative_with_normal_multiplier() {
        let params = b4_params(0.85);
        let policy = ForwardingPolicy::Threshold(vec![1.0, 2.0, 3.0]);
        let traj = model::integrate(&policy, &params, &b4_init(), 8.0).unwrap();
        let co = integrate_costates(&traj, 0.2, 1.0, &params).unwrap();
        let terminal_state = traj.final_state();
        for level in params.control_levels() {
            let phi = switching_function(level, terminal_state, co.terminal(), &params).unwrap();
            if terminal_state.infective[level] > 0.0 {
                assert!(phi < 0.0, "terminal phi_{level} = {phi}");
            }
        }
    }

    #[test]
    fn verifier_passes_optimizer_output_and_rejects_perturbation() {
        let params = b4_params(0.85);
        let init = b4_init();
        let cfg = SearchConfig {
            resolution: 21,
            coarse_steps: 160,
            refine_steps: 2000,
            ..Default::default()
        };
        let report = optimize_fixed_t(&params, &init, &cfg).unwrap();
        let verify_cfg = VerifyConfig::default();
        let verdict = verify_pmp(&report.policy, &params, &init, &verify_cfg).unwrap();
        assert!(verdict.pass(), "optimizer output failed verification: {:?}", verdict.checks);
        assert!(verdict.lambda_e >= 0.0);
        assert!(verdict.violation_measure <= 1e-2 * params.horizon);

        // Pushing the top-level cutoff 20% outward must raise the violation
        // measure and break at least one check.
        let ForwardingPolicy::Threshold(cutoffs) = &report.policy else { panic!() };
        let mut worse = cutoffs.clone();
        let last = worse.len() - 1;
        worse[last] = (worse[last] * 1.2).min(params.horizon);
        let perturbed =
            verify_pmp(&ForwardingPolicy::Threshold(worse), &params, &init, &verify_cfg).unwrap();
        assert!(perturbed.violation_measure > verdict.violation_measure);
        assert!(!perturbed.pass());
    }

    #[test]
    fn stopping_candidates_verify_at_the_transversality_multiplier() {
        use crate::metrics::StoppingPenalty;
        use crate::optimize::optimize_stopping;
        let params = b4_params(0.8);
        let init = b4_init();
        let cfg = SearchConfig { resolution: 21, max_evaluations: 6000, ..Default::default() };
        let penalty = StoppingPenalty::default();
        let report = optimize_stopping(&params, &init, &penalty, &cfg).unwrap();
        let t_star = report.stopping_time.unwrap();
        let run_params = ModelParams { horizon: t_star, ..params };
        let vcfg = VerifyConfig { stopping: Some(penalty), ..Default::default() };
        let verdict = verify_pmp(&report.policy, &run_params, &init, &vcfg).unwrap();
        assert!(verdict.pass(), "stopping candidate failed: {:?}", verdict.checks);
        let trans = verdict
            .checks
            .iter()
            .find(|c| c.name == "stopping_transversality")
            .expect("stopping check present");
        assert!(trans.pass, "switching mismatch at the transversality multiplier: {trans:?}");
        assert!(verdict.transversality_gap.is_some());
    }

    #[test]
    fn verifier_reports_inactive_constraint_for_slack_zero_policy() {
        // Zero control already delivers ≈0.80 here, so at p = 0.5 the
        // constraint is slack and the verifier must not judge the candidate.
        let params = b4_params(0.5);
        let policy = ForwardingPolicy::Threshold(vec![0.0, 0.0, 0.0]);
        let verdict = verify_pmp(&policy, &params, &b4_init(), &VerifyConfig::default()).unwrap();
        assert_eq!(verdict.status, VerificationStatus::ConstraintInactive);
        assert_eq!(verdict.lambda_e, 0.0);
        assert!(verdict.constraint_slack > 0.0);
    }

    #[test]
    fn verifier_rejects_non_threshold_policies() {
        let params = b4_params(0.85);
        let err = verify_pmp(&ForwardingPolicy::One, &params, &b4_init(), &VerifyConfig::default());
        assert!(matches!(err, Err(Error::NonThresholdPolicy)));
    }

    #[test]
    fn verified_crossings_sit_near_reported_cutoffs() {
        let params = b4_params(0.85);
        let init = b4_init();
        let cfg = SearchConfig {
            resolution: 21,
            coarse_steps: 160,
            refine_steps: 2000,
            ..Default::default()
        };
        let report = optimize_fixed_t(&params, &init, &cfg).unwrap();
        let verdict = verify_pmp(&report.policy, &params, &init, &VerifyConfig::default()).unwrap();
        let cell = params.horizon / 20.0;
        for level in &verdict.levels {
            if !level.active || level.cutoff <= 0.0 || level.cutoff >= params.horizon {
                continue;
            }
            let crossing = level
                .crossing
                .unwrap_or_else(|| panic!("no crossing for level {}", level.level));
            assert!(
                (crossing - level.cutoff).abs() <= cell,
                "crossing {} vs cutoff {} at level {}",
                crossing,
                level.cutoff,
                level.level
            );
        }
        // The verified policy reproduces the optimizer's reported objective.
        let traj = model::integrate(&report.policy, &params, &init, params.horizon).unwrap();
        assert!((energy_cost(traj.final_state(), &params) - report.objective).abs() < 1e-9);
    }
}
