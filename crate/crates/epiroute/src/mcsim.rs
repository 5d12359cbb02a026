//! Event-driven agent simulation of the forwarding protocol.
//!
//! Each relay carries an integer battery level and, once it holds the
//! message, forwards copies according to the cutoff vector in the message
//! header: at a contact at time `t` it transmits iff its (possibly offset)
//! clock reads below the cutoff of its (possibly misestimated) energy level,
//! and both sides have the physical energy for the exchange. A contact with
//! the destination always delivers when the carrier has transmit energy,
//! regardless of the cutoffs.
//!
//! Contacts are sampled either from the exponential superposition (one
//! aggregate clock; each event picks a uniform pair or a uniform
//! node-destination meeting) or from independent per-pair renewal processes
//! with truncated power-law inter-contact times, initialized from the
//! equilibrium residual-life distribution. The power-law draws are rescaled
//! so the stationary pair rate equals `β/N`, matching the aggregate contact
//! volume the mean-field equations assume.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::model::{ModelParams, StateVector};
use crate::policy::ForwardingPolicy;

/// Contact process driving the simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContactModel {
    /// Exponential pairwise inter-contact times at rate `β/N` per pair and
    /// destination contacts at `β₀/N` per node.
    Exponential,
    /// Independent per-pair renewal processes with truncated power-law
    /// inter-contact times of tail exponent `alpha` on `[t_min, t_max]`,
    /// rescaled to the pair rate `β/N`; destination contacts stay
    /// exponential.
    TruncatedPowerLaw { alpha: f64, t_min: f64, t_max: f64 },
}

/// How the initial energy histogram is drawn from the fractions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitAssignment {
    /// Largest-remainder rounding of `N · fraction` (variance reduction).
    #[default]
    DeterministicRounding,
    /// One categorical draw per node.
    Multinomial,
}

/// Ensemble configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCConfig {
    pub n_nodes: usize,
    pub runs: usize,
    pub seed: u64,
    pub contact: ContactModel,
    /// Clock-offset half-range θ*: each node's clock is shifted by a uniform
    /// draw from `[-θ*, θ*]`.
    pub clock_error: f64,
    /// Energy misestimation probability p*: at each forwarding opportunity
    /// the transmitter reads its level one unit low or high, each with this
    /// probability (clamped at the boundaries). Only the cutoff lookup uses
    /// the estimate; the physical energy gates do not.
    pub energy_error: f64,
    pub assignment: InitAssignment,
    /// Number of points of the state-curve reporting grid (0 disables
    /// curves).
    pub report_points: usize,
}

impl MCConfig {
    pub fn new(n_nodes: usize, runs: usize, seed: u64, contact: ContactModel) -> Self {
        Self {
            n_nodes,
            runs,
            seed,
            contact,
            clock_error: 0.0,
            energy_error: 0.0,
            assignment: InitAssignment::default(),
            report_points: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_nodes < 2 {
            return Err(Error::InvalidInput("need at least two nodes".into()));
        }
        if self.runs < 1 {
            return Err(Error::InvalidInput("need at least one run".into()));
        }
        if !(self.clock_error >= 0.0) {
            return Err(Error::InvalidInput("clock error half-range must be >= 0".into()));
        }
        if !(0.0..=0.5).contains(&self.energy_error) {
            return Err(Error::InvalidInput("energy error probability must lie in [0, 0.5]".into()));
        }
        if let ContactModel::TruncatedPowerLaw { alpha, t_min, t_max } = self.contact {
            if !(alpha > 0.0) {
                return Err(Error::InvalidInput("power-law exponent must be positive".into()));
            }
            if !(0.0 < t_min && t_min < t_max) {
                return Err(Error::InvalidInput("cutoffs must satisfy 0 < t_min < t_max".into()));
            }
        }
        Ok(())
    }
}

/// One simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCOutcome {
    pub delivered: bool,
    pub delivery_time: Option<f64>,
    /// Terminal counts per energy level; together they sum to the node count.
    pub susceptible_hist: Vec<u64>,
    pub infective_hist: Vec<u64>,
    /// Node-node contacts observed (each touches two nodes).
    pub pair_contacts: u64,
    /// Accepted relay transmissions.
    pub forwards: u64,
    /// Terminal minus initial penalty, per node.
    pub unbiased_cost: f64,
    /// State-curve snapshots when requested: fractions per level at each
    /// reporting time.
    pub curves: Option<StateCurves>,
}

/// Per-level fraction curves on a uniform reporting grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateCurves {
    pub times: Vec<f64>,
    /// `susceptible[k][level]` at `times[k]`.
    pub susceptible: Vec<Vec<f64>>,
    pub infective: Vec<Vec<f64>>,
}

/// Ensemble summary statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub runs: usize,
    pub delivery_mean: f64,
    pub delivery_std: Option<f64>,
    pub delivery_se: Option<f64>,
    pub cost_mean: f64,
    pub cost_std: Option<f64>,
    pub cost_se: Option<f64>,
    pub contacts_per_node_mean: f64,
    pub mean_curves: Option<StateCurves>,
}

/// Inverse-CDF sample of the truncated power law with density `∝ t^{-(1+α)}`
/// on `[t_min, t_max]`.
pub fn sample_truncated_pareto(alpha: f64, t_min: f64, t_max: f64, draw: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidInput("power-law exponent must be positive".into()));
    }
    if !(0.0 < t_min && t_min < t_max) {
        return Err(Error::InvalidInput("cutoffs must satisfy 0 < t_min < t_max".into()));
    }
    if !(0.0..1.0).contains(&draw) {
        return Err(Error::InvalidInput("draw must lie in [0, 1)".into()));
    }
    let lo = t_min.powf(-alpha);
    let hi = t_max.powf(-alpha);
    Ok((lo + draw * (hi - lo)).powf(-1.0 / alpha))
}

/// Mean of the truncated power law.
pub(crate) fn truncated_pareto_mean(alpha: f64, t_min: f64, t_max: f64) -> f64 {
    let d = t_min.powf(-alpha) - t_max.powf(-alpha);
    if (alpha - 1.0).abs() < 1e-12 {
        (t_max / t_min).ln() / d * alpha
    } else {
        alpha / (1.0 - alpha) * (t_max.powf(1.0 - alpha) - t_min.powf(1.0 - alpha)) / d
    }
}

/// `∫₀^x F̄(y) dy` for the truncated power law's survival function.
fn integrated_survival(alpha: f64, t_min: f64, t_max: f64, x: f64) -> f64 {
    if x <= t_min {
        return x;
    }
    let x = x.min(t_max);
    let d = t_min.powf(-alpha) - t_max.powf(-alpha);
    let tail = if (alpha - 1.0).abs() < 1e-12 {
        ((x / t_min).ln() - (x - t_min) / t_max) / d
    } else {
        ((x.powf(1.0 - alpha) - t_min.powf(1.0 - alpha)) / (1.0 - alpha)
            - t_max.powf(-alpha) * (x - t_min))
            / d
    };
    t_min + tail
}

/// Equilibrium residual-life draw for a stationary renewal process with
/// truncated power-law inter-contact times: inverts
/// `G(x) = ∫₀^x F̄ / mean` by bisection.
fn equilibrium_residual(alpha: f64, t_min: f64, t_max: f64, draw: f64) -> f64 {
    let mean = truncated_pareto_mean(alpha, t_min, t_max);
    let target = draw * mean;
    let (mut lo, mut hi) = (0.0, t_max);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if integrated_survival(alpha, t_min, t_max, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The transmitter's energy reading: one unit low or high with probability
/// `p_star` each, clamped to `[0, B]` (at the boundaries the outward error
/// cannot occur, so the inward one keeps probability `p_star`).
fn misestimate(level: usize, max_energy: usize, p_star: f64, draw: f64) -> usize {
    if level == 0 {
        if draw < p_star {
            1
        } else {
            0
        }
    } else if level == max_energy {
        if draw < p_star {
            max_energy - 1
        } else {
            max_energy
        }
    } else if draw < p_star {
        level - 1
    } else if draw < 2.0 * p_star {
        level + 1
    } else {
        level
    }
}

#[derive(Clone)]
struct Node {
    energy: usize,
    infective: bool,
    clock_offset: f64,
}

/// Initial node states from the fraction vector, deterministic-rounded or
/// multinomially drawn. Categories are laid out susceptible-by-level then
/// infective-by-level; uniform contact partners make the id order immaterial.
fn assign_initial(
    init: &StateVector,
    n: usize,
    mode: InitAssignment,
    rng: &mut ChaCha8Rng,
) -> Vec<Node> {
    let levels = init.num_levels();
    let fractions: Vec<f64> = init
        .susceptible
        .iter()
        .chain(init.infective.iter())
        .copied()
        .collect();
    let counts: Vec<usize> = match mode {
        InitAssignment::DeterministicRounding => {
            let mut counts: Vec<usize> =
                fractions.iter().map(|f| (f * n as f64).floor() as usize).collect();
            let assigned: usize = counts.iter().sum();
            let mut remainders: Vec<(usize, f64)> = fractions
                .iter()
                .enumerate()
                .map(|(i, f)| (i, f * n as f64 - counts[i] as f64))
                .collect();
            remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for k in 0..n.saturating_sub(assigned) {
                counts[remainders[k % remainders.len()].0] += 1;
            }
            counts
        }
        InitAssignment::Multinomial => {
            let mut counts = vec![0usize; fractions.len()];
            for _ in 0..n {
                let mut u: f64 = rng.gen();
                let mut cat = fractions.len() - 1;
                for (i, f) in fractions.iter().enumerate() {
                    if u < *f {
                        cat = i;
                        break;
                    }
                    u -= f;
                }
                counts[cat] += 1;
            }
            counts
        }
    };
    let mut nodes = Vec::with_capacity(n);
    for (cat, &count) in counts.iter().enumerate() {
        let infective = cat >= levels;
        let energy = cat % levels;
        for _ in 0..count {
            nodes.push(Node { energy, infective, clock_offset: 0.0 });
        }
    }
    nodes
}

/// Heap key ordering event times through `total_cmp`.
#[derive(PartialEq)]
struct EventTime(f64, u32);
impl Eq for EventTime {}
impl PartialOrd for EventTime {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EventTime {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

struct Sim<'a> {
    params: &'a ModelParams,
    cfg: &'a MCConfig,
    cutoffs: &'a [f64],
    nodes: Vec<Node>,
    delivered: bool,
    delivery_time: Option<f64>,
    pair_contacts: u64,
    forwards: u64,
}

impl Sim<'_> {
    fn handle_pair(&mut self, a: usize, b: usize, t: f64, rng: &mut ChaCha8Rng) {
        self.pair_contacts += 1;
        let (tx, rx) = match (self.nodes[a].infective, self.nodes[b].infective) {
            (true, false) => (a, b),
            (false, true) => (b, a),
            _ => return,
        };
        let s = self.params.transmit_cost;
        let r = self.params.receive_cost;
        if self.nodes[tx].energy < s || self.nodes[rx].energy < r {
            return;
        }
        let est = misestimate(
            self.nodes[tx].energy,
            self.params.max_energy,
            self.cfg.energy_error,
            rng.gen(),
        );
        if est < s {
            return;
        }
        let local_clock = t + self.nodes[tx].clock_offset;
        if local_clock >= self.cutoffs[est - s] {
            return;
        }
        self.nodes[tx].energy -= s;
        self.nodes[rx].energy -= r;
        self.nodes[rx].infective = true;
        self.forwards += 1;
    }

    fn handle_destination(&mut self, k: usize, t: f64) {
        if self.delivered {
            return;
        }
        if self.nodes[k].infective && self.nodes[k].energy >= self.params.transmit_cost {
            self.delivered = true;
            self.delivery_time = Some(t);
        }
    }

    fn snapshot(&self) -> (Vec<f64>, Vec<f64>) {
        let levels = self.params.max_energy + 1;
        let n = self.nodes.len() as f64;
        let mut su = vec![0.0; levels];
        let mut inf = vec![0.0; levels];
        for node in &self.nodes {
            if node.infective {
                inf[node.energy] += 1.0 / n;
            } else {
                su[node.energy] += 1.0 / n;
            }
        }
        (su, inf)
    }
}

/// Simulates one run of the forwarding protocol over `[0, T]`.
///
/// The policy must compile to a per-level cutoff vector (those are what the
/// message header carries). Delivery is recorded at the first contact between
/// the destination and a carrier with transmit energy; the run continues to
/// the horizon for energy accounting, since a single delivery transmission is
/// negligible at the population scale.
pub fn run_once(
    policy: &ForwardingPolicy,
    params: &ModelParams,
    init: &StateVector,
    cfg: &MCConfig,
    run_seed: u64,
) -> Result<MCOutcome> {
    params.validate()?;
    cfg.validate()?;
    init.validate()?;
    let cutoffs = policy.as_threshold_vector(params, init, params.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(run_seed);
    run_with_cutoffs(&cutoffs, params, init, cfg, &mut rng)
}

fn run_with_cutoffs(
    cutoffs: &[f64],
    params: &ModelParams,
    init: &StateVector,
    cfg: &MCConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MCOutcome> {
    let n = cfg.n_nodes;
    let horizon = params.horizon;
    let mut nodes = assign_initial(init, n, cfg.assignment, rng);
    for node in &mut nodes {
        node.clock_offset = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.clock_error;
    }
    let hist_cost = |nodes: &[Node]| -> f64 {
        let mut hist = vec![0u64; params.max_energy + 1];
        for node in nodes {
            hist[node.energy] += 1;
        }
        hist.iter()
            .zip(params.penalties.iter())
            .map(|(count, a)| *count as f64 / n as f64 * a)
            .sum()
    };
    let initial_cost = hist_cost(&nodes);

    let mut sim = Sim {
        params,
        cfg,
        cutoffs,
        nodes,
        delivered: false,
        delivery_time: None,
        pair_contacts: 0,
        forwards: 0,
    };

    let report_times: Vec<f64> = if cfg.report_points >= 2 {
        (0..cfg.report_points)
            .map(|k| horizon * k as f64 / (cfg.report_points - 1) as f64)
            .collect()
    } else {
        Vec::new()
    };
    let mut curves = (!report_times.is_empty()).then(|| StateCurves {
        times: report_times.clone(),
        susceptible: Vec::with_capacity(report_times.len()),
        infective: Vec::with_capacity(report_times.len()),
    });
    let mut next_report = 0usize;
    let mut emit_until = |t: f64, sim: &Sim, next_report: &mut usize| {
        if let Some(c) = curves.as_mut() {
            while *next_report < report_times.len() && report_times[*next_report] <= t {
                let (su, inf) = sim.snapshot();
                c.susceptible.push(su);
                c.infective.push(inf);
                *next_report += 1;
            }
        }
    };

    match cfg.contact {
        ContactModel::Exponential => {
            let pair_rate = (n as f64 - 1.0) * params.contact_rate / 2.0;
            let dest_rate = params.destination_contact_rate;
            let total = pair_rate + dest_rate;
            let mut t = 0.0;
            loop {
                let u: f64 = rng.gen();
                t += -(1.0 - u).ln() / total;
                if t > horizon {
                    break;
                }
                emit_until(t, &sim, &mut next_report);
                if rng.gen::<f64>() * total < pair_rate {
                    let a = rng.gen_range(0..n);
                    let mut b = rng.gen_range(0..n - 1);
                    if b >= a {
                        b += 1;
                    }
                    sim.handle_pair(a, b, t, rng);
                } else {
                    let k = rng.gen_range(0..n);
                    sim.handle_destination(k, t);
                }
            }
        }
        ContactModel::TruncatedPowerLaw { alpha, t_min, t_max } => {
            // Rescale so the stationary pair rate is β/N while keeping the
            // distribution's shape.
            let mean = truncated_pareto_mean(alpha, t_min, t_max);
            let scale = (n as f64 / params.contact_rate) / mean;
            let pair_count = n * (n - 1) / 2;
            let pair_nodes = |p: usize| {
                // Unrank the pair index into (a, b), a < b.
                let mut a = 0usize;
                let mut rem = p;
                let mut row = n - 1;
                while rem >= row {
                    rem -= row;
                    a += 1;
                    row -= 1;
                }
                (a, a + 1 + rem)
            };
            let mut heap: BinaryHeap<Reverse<EventTime>> = BinaryHeap::with_capacity(pair_count);
            for p in 0..pair_count {
                let first = scale * equilibrium_residual(alpha, t_min, t_max, rng.gen());
                heap.push(Reverse(EventTime(first, p as u32)));
            }
            let dest_rate = params.destination_contact_rate;
            let u: f64 = rng.gen();
            let mut next_dest = -(1.0 - u).ln() / dest_rate;
            loop {
                let next_pair = heap.peek().map(|Reverse(EventTime(t, _))| *t);
                let (t, is_pair) = match next_pair {
                    Some(tp) if tp <= next_dest => (tp, true),
                    _ => (next_dest, false),
                };
                if t > horizon {
                    break;
                }
                emit_until(t, &sim, &mut next_report);
                if is_pair {
                    let Reverse(EventTime(_, p)) = heap.pop().expect("peeked");
                    let (a, b) = pair_nodes(p as usize);
                    sim.handle_pair(a, b, t, rng);
                    let gap = scale
                        * sample_truncated_pareto(alpha, t_min, t_max, rng.gen())
                            .expect("validated parameters");
                    heap.push(Reverse(EventTime(t + gap, p)));
                } else {
                    let k = rng.gen_range(0..n);
                    sim.handle_destination(k, t);
                    let u: f64 = rng.gen();
                    next_dest = t + -(1.0 - u).ln() / dest_rate;
                }
            }
        }
    }
    emit_until(horizon, &sim, &mut next_report);

    let levels = params.max_energy + 1;
    let mut susceptible_hist = vec![0u64; levels];
    let mut infective_hist = vec![0u64; levels];
    for node in &sim.nodes {
        if node.infective {
            infective_hist[node.energy] += 1;
        } else {
            susceptible_hist[node.energy] += 1;
        }
    }
    let final_cost = hist_cost(&sim.nodes);

    Ok(MCOutcome {
        delivered: sim.delivered,
        delivery_time: sim.delivery_time,
        susceptible_hist,
        infective_hist,
        pair_contacts: sim.pair_contacts,
        forwards: sim.forwards,
        unbiased_cost: final_cost - initial_cost,
        curves,
    })
}

/// Runs an ensemble with per-run seeds derived from the root seed by counter
/// and a deterministic merge.
pub fn run_ensemble(
    policy: &ForwardingPolicy,
    params: &ModelParams,
    init: &StateVector,
    cfg: &MCConfig,
) -> Result<(EnsembleStats, Vec<MCOutcome>)> {
    params.validate()?;
    cfg.validate()?;
    init.validate()?;
    let cutoffs = policy.as_threshold_vector(params, init, params.horizon)?;
    let outcomes: Vec<MCOutcome> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(run as u64);
            run_with_cutoffs(&cutoffs, params, init, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;

    let runs = outcomes.len();
    let mean =
        |f: &dyn Fn(&MCOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / runs as f64;
    let std = |f: &dyn Fn(&MCOutcome) -> f64, mu: f64| {
        (runs > 1).then(|| {
            (outcomes.iter().map(|o| (f(o) - mu).powi(2)).sum::<f64>() / (runs as f64 - 1.0))
                .sqrt()
        })
    };
    let delivered = |o: &MCOutcome| if o.delivered { 1.0 } else { 0.0 };
    let cost = |o: &MCOutcome| o.unbiased_cost;
    let delivery_mean = mean(&delivered);
    let cost_mean = mean(&cost);
    let delivery_std = std(&delivered, delivery_mean);
    let cost_std = std(&cost, cost_mean);
    let contacts_per_node_mean =
        mean(&|o: &MCOutcome| 2.0 * o.pair_contacts as f64 / cfg.n_nodes as f64);

    let mean_curves = outcomes[0].curves.as_ref().map(|first| {
        let times = first.times.clone();
        let levels = params.max_energy + 1;
        let mut su = vec![vec![0.0; levels]; times.len()];
        let mut inf = vec![vec![0.0; levels]; times.len()];
        for o in &outcomes {
            let c = o.curves.as_ref().expect("all runs share the reporting grid");
            for k in 0..times.len() {
                for l in 0..levels {
                    su[k][l] += c.susceptible[k][l] / runs as f64;
                    inf[k][l] += c.infective[k][l] / runs as f64;
                }
            }
        }
        StateCurves { times, susceptible: su, infective: inf }
    });

    Ok((
        EnsembleStats {
            runs,
            delivery_mean,
            delivery_se: delivery_std.map(|s| s / (runs as f64).sqrt()),
            delivery_std,
            cost_mean,
            cost_se: cost_std.map(|s| s / (runs as f64).sqrt()),
            cost_std,
            contacts_per_node_mean,
            mean_curves,
        },
        outcomes,
    ))
}
