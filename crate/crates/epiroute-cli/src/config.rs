//! Strict configuration schema: one JSON document per run, unknown keys
//! rejected, with a `schema_version` field for diff-able provenance.

use serde::Deserialize;

use epiroute::experiments::{MultiMessageConfig, PolicyFamily};
use epiroute::mcsim::{ContactModel, InitAssignment, MCConfig};
use epiroute::metrics::StoppingPenalty;
use epiroute::model::{IntegrationConfig, ModelParams, StateVector};
use epiroute::optimize::{HeuristicClass, SearchConfig, TieBreak};
use epiroute::ForwardingPolicy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub init: InitConfig,
    #[serde(default)]
    pub policy: Option<ForwardingPolicy>,
    #[serde(default)]
    pub search: Option<SearchConfigPatch>,
    #[serde(default)]
    pub integration: Option<IntegrationConfig>,
    #[serde(default)]
    pub mc: Option<McConfigFile>,
    #[serde(default)]
    pub stopping_penalty: Option<StoppingPenalty>,
    #[serde(default)]
    pub experiment: Option<ExperimentConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub max_energy: usize,
    pub transmit_cost: usize,
    pub receive_cost: usize,
    pub contact_rate: f64,
    pub destination_contact_rate: f64,
    pub horizon: f64,
    pub penalties: PenaltySpec,
    pub mandated_delivery: f64,
}

/// Either explicit per-level penalties or the power family `(B - i)^exponent`.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum PenaltySpec {
    Values(Vec<f64>),
    Power {
        #[allow(dead_code)] // required by the schema, only matched on
        form: PowerForm,
        exponent: f64,
    },
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerForm {
    Power,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub susceptible: Vec<f64>,
    pub infective: Vec<f64>,
}

/// Partial override of the search defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfigPatch {
    pub resolution: Option<usize>,
    pub shrink: Option<f64>,
    pub min_mesh: Option<f64>,
    pub max_evaluations: Option<u64>,
    pub multistart: Option<usize>,
    pub coarse_steps: Option<usize>,
    pub refine_steps: Option<usize>,
}

impl SearchConfigPatch {
    pub fn apply(&self) -> SearchConfig {
        let base = SearchConfig::default();
        SearchConfig {
            resolution: self.resolution.unwrap_or(base.resolution),
            shrink: self.shrink.unwrap_or(base.shrink),
            min_mesh: self.min_mesh.unwrap_or(base.min_mesh),
            max_evaluations: self.max_evaluations.unwrap_or(base.max_evaluations),
            multistart: self.multistart.unwrap_or(base.multistart),
            tie_break: TieBreak::LexSmallest,
            coarse_steps: self.coarse_steps.unwrap_or(base.coarse_steps),
            refine_steps: self.refine_steps.unwrap_or(base.refine_steps),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfigFile {
    pub n_nodes: usize,
    pub runs: usize,
    pub contact: ContactModel,
    #[serde(default)]
    pub clock_error: f64,
    #[serde(default)]
    pub energy_error: f64,
    #[serde(default)]
    pub assignment: InitAssignment,
    #[serde(default)]
    pub report_points: usize,
}

impl McConfigFile {
    pub fn build(&self, seed: u64) -> MCConfig {
        MCConfig {
            n_nodes: self.n_nodes,
            runs: self.runs,
            seed,
            contact: self.contact.clone(),
            clock_error: self.clock_error,
            energy_error: self.energy_error,
            assignment: self.assignment,
            report_points: self.report_points,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub p_values: Option<Vec<f64>>,
    #[serde(default)]
    pub beta_values: Option<Vec<f64>>,
    #[serde(default)]
    pub error_values: Option<Vec<f64>>,
    #[serde(default)]
    pub multi_message: Option<MultiMessageFile>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiMessageFile {
    pub messages: usize,
    pub spread: f64,
    pub family: String,
    pub start: Vec<f64>,
}

impl MultiMessageFile {
    pub fn build(&self) -> anyhow::Result<(MultiMessageConfig, Vec<f64>)> {
        let family = match self.family.replace('-', "_").as_str() {
            "myopic_optimal" => PolicyFamily::MyopicOptimal,
            other => PolicyFamily::Heuristic(other.parse::<HeuristicClass>()?),
        };
        Ok((
            MultiMessageConfig { messages: self.messages, spread: self.spread, family },
            self.start.clone(),
        ))
    }
}

impl RunConfig {
    /// Parses and validates every module-level invariant before dispatch.
    pub fn build_model(&self) -> anyhow::Result<(ModelParams, StateVector)> {
        anyhow::ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            self.schema_version
        );
        let penalties = match &self.model.penalties {
            PenaltySpec::Values(v) => v.clone(),
            PenaltySpec::Power { exponent, .. } => (0..=self.model.max_energy)
                .map(|i| ((self.model.max_energy - i) as f64).powf(*exponent))
                .collect(),
        };
        let params = ModelParams::new(
            self.model.max_energy,
            self.model.transmit_cost,
            self.model.receive_cost,
            self.model.contact_rate,
            self.model.destination_contact_rate,
            self.model.horizon,
            penalties,
            self.model.mandated_delivery,
        )?;
        let init = StateVector::new(self.init.susceptible.clone(), self.init.infective.clone())?;
        init.validate()?;
        if init.num_levels() != params.max_energy + 1 {
            anyhow::bail!(
                "init has {} levels, model has {}",
                init.num_levels(),
                params.max_energy + 1
            );
        }
        if let Some(policy) = &self.policy {
            policy.validate(&params)?;
        }
        if let Some(search) = &self.search {
            search.apply().validate()?;
        }
        if let Some(penalty) = &self.stopping_penalty {
            penalty.validate()?;
        }
        Ok((params, init))
    }
}
