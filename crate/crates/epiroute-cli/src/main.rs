//! Command-line front end: configuration ingestion, dispatch, and bit-stable
//! CSV/JSON emission.
//!
//! Exit codes: 0 success, 1 internal error, 2 configuration error,
//! 3 infeasible problem.

mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use config::RunConfig;
use epiroute::error::Error as ModelError;
use epiroute::experiments::{self, RobustnessVariable};
use epiroute::mcsim;
use epiroute::metrics::{self, StoppingPenalty};
use epiroute::model::{self, ModelParams, StateVector};
use epiroute::optimize::{self, HeuristicClass, OptimizationReport};
use epiroute::pmp::{self, VerificationReport, VerifyConfig};
use epiroute::ForwardingPolicy;

#[derive(Parser)]
#[command(name = "epiroute", version, about = "Energy-aware epidemic forwarding: simulate, optimize, verify")]
struct Cli {
    /// Path to the JSON run configuration.
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,
    /// Root seed; overrides the configuration's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker thread cap (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the configured policy and write the trajectory.
    Simulate,
    /// Search for the optimal cutoff vector at the fixed terminal time.
    Optimize {
        /// Also run the optimality-condition verifier on the result.
        #[arg(long)]
        verify: bool,
    },
    /// Joint search over the stopping time and the cutoff vector.
    OptimizeStopping {
        #[arg(long)]
        verify: bool,
    },
    /// Best feasible member of one heuristic class.
    Heuristic { class: String },
    /// Check the configured threshold policy against the necessary
    /// optimality conditions.
    Verify,
    /// Run the agent-based ensemble under the configured policy.
    Montecarlo,
    /// Run a scripted experiment: validation, heuristic-sweep,
    /// robustness-theta, robustness-p, or multi-message.
    Experiment { name: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore failures from double initialization (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// 2 for configuration problems, 3 for infeasible instances, 1 otherwise.
fn classify(err: &anyhow::Error) -> u8 {
    if let Some(model_err) = err.downcast_ref::<ModelError>() {
        return match model_err {
            ModelError::Infeasible { .. } | ModelError::InfeasibleZeroControl => 3,
            ModelError::InvalidInput(_) | ModelError::DimensionMismatch { .. } => 2,
            _ => 1,
        };
    }
    if err.downcast_ref::<serde_json::Error>().is_some()
        || err.downcast_ref::<ConfigError>().is_some()
    {
        return 2;
    }
    1
}

/// Marker for configuration-level failures raised by this binary.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(&cli.config)
        .map_err(|e| config_err(format!("cannot read {}: {e}", cli.config.display())))?;
    let cfg: RunConfig = serde_json::from_str(&text)?;
    let (params, init) = cfg.build_model().map_err(|e| match e.downcast::<ModelError>() {
        Ok(me) => config_err(me.to_string()),
        Err(e) => config_err(e.to_string()),
    })?;
    std::fs::create_dir_all(&cli.out)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let search = cfg.search.as_ref().map(|s| s.apply()).unwrap_or_default();
    let integration = cfg.integration.unwrap_or_default();

    match &cli.command {
        Command::Simulate => {
            let policy = cfg
                .policy
                .clone()
                .ok_or_else(|| config_err("simulate requires a `policy` entry"))?;
            let traj =
                model::integrate_with(&policy, &params, &init, params.horizon, integration)?;
            output::trajectory_csv(&cli.out.join("trajectory.csv"), &traj, &params)?;
            let summary = SimulateSummary {
                command: "simulate",
                policy,
                delivery_probability: metrics::delivery_probability(&traj, &params),
                feasible: metrics::throughput_ok(&traj, &params),
                energy_cost: metrics::energy_cost(traj.final_state(), &params),
                unbiased_cost: metrics::unbiased_cost(&traj, &params),
                exposure: traj.final_state().exposure,
                grid_points: traj.len(),
            };
            output::write_json(&cli.out.join("summary.json"), &summary)?;
        }
        Command::Optimize { verify } => {
            let report = optimize::optimize_fixed_t(&params, &init, &search)?;
            finish_policy_run(cli, &params, &init, &cfg, report, *verify, None)?;
        }
        Command::OptimizeStopping { verify } => {
            let penalty = cfg.stopping_penalty.clone().unwrap_or_default();
            let report = optimize::optimize_stopping(&params, &init, &penalty, &search)?;
            finish_policy_run(cli, &params, &init, &cfg, report, *verify, Some(penalty))?;
        }
        Command::Heuristic { class } => {
            let class: HeuristicClass =
                class.parse().map_err(|e: ModelError| config_err(e.to_string()))?;
            let report = optimize::optimize_heuristic(class, &params, &init, &search)?;
            finish_policy_run(cli, &params, &init, &cfg, report, false, None)?;
        }
        Command::Verify => {
            let policy = cfg
                .policy
                .clone()
                .ok_or_else(|| config_err("verify requires a `policy` entry"))?;
            let verify_cfg = VerifyConfig {
                integration,
                stopping: cfg.stopping_penalty.clone(),
                ..Default::default()
            };
            let report = pmp::verify_pmp(&policy, &params, &init, &verify_cfg)?;
            output::write_json(&cli.out.join("summary.json"), &report)?;
        }
        Command::Montecarlo => {
            let policy = cfg
                .policy
                .clone()
                .ok_or_else(|| config_err("montecarlo requires a `policy` entry"))?;
            let mc = cfg
                .mc
                .as_ref()
                .ok_or_else(|| config_err("montecarlo requires an `mc` entry"))?
                .build(seed);
            let (stats, outcomes) = mcsim::run_ensemble(&policy, &params, &init, &mc)?;
            output::outcomes_csv(&cli.out.join("mc.csv"), &outcomes, &params)?;
            output::write_json(&cli.out.join("summary.json"), &stats)?;
        }
        Command::Experiment { name } => {
            run_experiment(cli, name, &params, &init, &cfg, seed, &search)?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct SimulateSummary {
    command: &'static str,
    policy: ForwardingPolicy,
    delivery_probability: f64,
    feasible: bool,
    energy_cost: f64,
    unbiased_cost: f64,
    exposure: f64,
    grid_points: usize,
}

#[derive(Serialize)]
struct PolicySummary {
    command: &'static str,
    report: OptimizationReport,
    delivery_probability: f64,
    unbiased_cost: f64,
    verification: Option<VerificationReport>,
}

fn finish_policy_run(
    cli: &Cli,
    params: &ModelParams,
    init: &StateVector,
    cfg: &RunConfig,
    report: OptimizationReport,
    verify: bool,
    stopping: Option<StoppingPenalty>,
) -> anyhow::Result<()> {
    let end = report.stopping_time.unwrap_or(params.horizon);
    let run_params = ModelParams { horizon: end, ..params.clone() };
    let integration = cfg.integration.unwrap_or_default();
    let traj = model::integrate_with(&report.policy, &run_params, init, end, integration)?;
    output::trajectory_csv(&cli.out.join("trajectory.csv"), &traj, params)?;
    let verification = if verify {
        let verify_cfg = VerifyConfig { integration, stopping, ..Default::default() };
        Some(pmp::verify_pmp(&report.policy, &run_params, init, &verify_cfg)?)
    } else {
        None
    };
    let summary = PolicySummary {
        command: "optimize",
        delivery_probability: metrics::delivery_probability(&traj, params),
        unbiased_cost: metrics::unbiased_cost(&traj, params),
        report,
        verification,
    };
    output::write_json(&cli.out.join("summary.json"), &summary)?;
    Ok(())
}

#[derive(Serialize)]
struct ExperimentSummary<'a> {
    command: &'static str,
    experiment: &'a str,
    seed: u64,
    config_hash: u64,
    columns: &'a [String],
    rows: usize,
}

fn run_experiment(
    cli: &Cli,
    name: &str,
    params: &ModelParams,
    init: &StateVector,
    cfg: &RunConfig,
    seed: u64,
    search: &epiroute::optimize::SearchConfig,
) -> anyhow::Result<()> {
    let exp = cfg
        .experiment
        .as_ref()
        .ok_or_else(|| config_err("experiments need an `experiment` entry"))?;
    let need_mc = || -> anyhow::Result<mcsim::MCConfig> {
        Ok(cfg
            .mc
            .as_ref()
            .ok_or_else(|| config_err("this experiment needs an `mc` entry"))?
            .build(seed))
    };
    let non_empty = |values: &Option<Vec<f64>>, key: &str| -> anyhow::Result<Vec<f64>> {
        match values {
            Some(v) if !v.is_empty() => Ok(v.clone()),
            _ => Err(config_err(format!("experiment `{name}` needs a non-empty `{key}`"))),
        }
    };

    let result = match name {
        "validation" => {
            let p_values = non_empty(&exp.p_values, "p_values")?;
            experiments::run_validation(params, init, &need_mc()?, search, &p_values)?
        }
        "heuristic-sweep" => {
            let beta_values = non_empty(&exp.beta_values, "beta_values")?;
            experiments::run_heuristic_sweep(params, init, search, &beta_values)?
        }
        "robustness-theta" | "robustness-p" => {
            let values = non_empty(&exp.error_values, "error_values")?;
            let variable = if name == "robustness-theta" {
                RobustnessVariable::ClockError
            } else {
                RobustnessVariable::EnergyError
            };
            experiments::run_robustness(params, init, &need_mc()?, search, variable, &values)?
        }
        "multi-message" => {
            let mm_file = exp
                .multi_message
                .as_ref()
                .ok_or_else(|| config_err("experiment `multi-message` needs a `multi_message` entry"))?;
            let (mm, start) =
                mm_file.build().map_err(|e| config_err(e.to_string()))?;
            experiments::run_multi_message(params, &start, &mm, search)?
        }
        other => return Err(config_err(format!("unknown experiment `{other}`"))),
    };

    output::experiment_csv(&cli.out.join("result.csv"), &result)?;
    let summary = ExperimentSummary {
        command: "experiment",
        experiment: name,
        seed: result.seed,
        config_hash: result.config_hash,
        columns: &result.columns,
        rows: result.rows.len(),
    };
    output::write_json(&cli.out.join("summary.json"), &summary)?;
    Ok(())
}
