use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tradeflow_core::ensemble::{EnsembleConfig, Sampler};
use tradeflow_core::espace::{validate_domain, Agent, EconomicDomain, GridSpec};
use tradeflow_core::fieldsolve::{Closure, Integrator};
use tradeflow_core::{DisturbanceParams, PartialSeries, TimeWindow};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Random agent population: uniform positions, sampled velocities and trades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSampler {
    pub count: usize,
    /// Falls back to the scenario seed.
    #[serde(default)]
    pub seed: Option<u64>,
    pub velocity: Sampler,
    pub trade_q: Sampler,
    pub trade_sv: Sampler,
    #[serde(default = "unit")]
    pub expectation_q: Sampler,
    #[serde(default = "unit")]
    pub expectation_sv: Sampler,
}

fn unit() -> Sampler {
    Sampler::fixed(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Averaging window; agents move by `window.sample_step` between snapshots.
    pub window: TimeWindow,
    /// Consecutive windows to aggregate.
    #[serde(default = "one")]
    pub windows: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldInitial {
    /// Fields from the first aggregation window of the agent population.
    Agents,
    /// Spatially uniform fields at the dynamics mean levels plus their
    /// disturbances at `t = 0`, advected by one constant velocity.
    Uniform { velocity: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    #[serde(default = "zero_closure")]
    pub closure: Closure,
    #[serde(default = "agents_initial")]
    pub initial: FieldInitial,
    pub steps: usize,
    /// Defaults to the stability limit.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub integrator: Integrator,
    /// Trajectory output stride; the first and last states are always written.
    #[serde(default)]
    pub write_every: Option<usize>,
}

fn zero_closure() -> Closure {
    Closure::Zero
}

fn agents_initial() -> FieldInitial {
    FieldInitial::Agents
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanLevels {
    pub q0: Vec<f64>,
    pub sv0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrendConfig {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Checked against the component rates when given.
    #[serde(default)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PricingConfig {
    /// Return horizons in time units.
    pub horizons: Vec<f64>,
    /// Oscillator sampling grid; ignored when `series` is given.
    #[serde(default)]
    pub sample_step: Option<f64>,
    #[serde(default)]
    pub duration: Option<f64>,
    /// Explicit disturbance series instead of oscillator trajectories.
    #[serde(default)]
    pub series: Option<PartialSeries>,
    /// Mean levels for explicit series; taken from `dynamics` otherwise.
    #[serde(default)]
    pub means: Option<MeanLevels>,
    #[serde(default)]
    pub trend: Option<TrendConfig>,
    /// Also integrate the oscillators numerically and report the deviation.
    #[serde(default)]
    pub rk4_check: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    /// Expectation type count; inferred from the other sections when absent.
    #[serde(default)]
    pub types: Option<usize>,
    #[serde(default)]
    pub domain: Option<EconomicDomain>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub agents: Option<Vec<Agent>>,
    #[serde(default)]
    pub agent_sampler: Option<AgentSampler>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub field: Option<FieldConfig>,
    #[serde(default)]
    pub dynamics: Option<DisturbanceParams>,
    #[serde(default)]
    pub pricing: Option<PricingConfig>,
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

/// A parsed config together with the SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ScenarioConfig,
    pub sha256: String,
}

/// Reads and deserializes a config; unknown keys are errors carrying their path.
pub fn read_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io("read_config", path, e))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let mut de = serde_json::Deserializer::from_slice(&bytes);
    let config: ScenarioConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config("parse_config", vec![format!("{path}: {}", e.inner())])
    })?;
    Ok(LoadedConfig { config, sha256 })
}

/// Reads, deserializes and validates every present section.
pub fn parse_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let loaded = read_config(path)?;
    let errors = loaded.config.validation_errors();
    if errors.is_empty() {
        Ok(loaded)
    } else {
        Err(CliError::config("parse_config", errors))
    }
}

fn sampler_errors(path: &str, s: &Sampler, positive: bool, errors: &mut Vec<String>) {
    let (lo, hi) = s.support();
    let finite_params = match *s {
        Sampler::Fixed { value } => value.is_finite(),
        Sampler::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
        Sampler::Normal { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
    };
    if !finite_params {
        errors.push(format!("{path}: invalid distribution parameters"));
    } else if positive && !(lo >= 0.0) {
        errors.push(format!("{path}: support [{lo}, {hi}] must be non-negative"));
    }
}

impl ScenarioConfig {
    /// Expectation type count from `types` or the first section that fixes it.
    pub fn type_count(&self) -> Option<usize> {
        self.types
            .or_else(|| self.dynamics.as_ref().map(|d| d.types.len()))
            .or_else(|| self.agents.as_ref().and_then(|a| a.first()).map(Agent::types))
            .or_else(|| self.ensemble.as_ref().map(|e| e.types.len()))
    }

    pub fn has_agents(&self) -> bool {
        self.agents.is_some() || self.agent_sampler.is_some()
    }

    /// Every problem in every present section, each with its field path.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let k = self.type_count();
        if k == Some(0) {
            errors.push("types: need at least one expectation type".into());
        }

        if let Some(domain) = &self.domain {
            if let Err(e) = domain.validate() {
                errors.push(format!("domain: {e}"));
            }
            if let Some(grid) = &self.grid {
                if let Err(e) = validate_domain(domain, grid) {
                    errors.push(format!("grid: {e}"));
                }
            }
        } else if self.grid.is_some() {
            errors.push("grid: needs a domain section".into());
        }

        if self.agents.is_some() && self.agent_sampler.is_some() {
            errors.push("agents: give either agents or agent_sampler, not both".into());
        }
        if let Some(agents) = &self.agents {
            match (&self.domain, k) {
                (Some(domain), Some(k)) => {
                    let mut ids = std::collections::BTreeSet::new();
                    for (i, a) in agents.iter().enumerate() {
                        if let Err(e) = a.validate(domain, k) {
                            errors.push(format!("agents[{i}]: {e}"));
                        }
                        if !ids.insert(a.id) {
                            errors.push(format!("agents[{i}]: duplicate id {}", a.id));
                        }
                    }
                }
                _ => errors.push("agents: needs a domain section".into()),
            }
        }
        if let Some(s) = &self.agent_sampler {
            if self.domain.is_none() {
                errors.push("agent_sampler: needs a domain section".into());
            }
            if k.is_none() {
                errors.push("agent_sampler: set types to fix the expectation type count".into());
            }
            if s.seed.is_none() && self.seed.is_none() {
                errors.push("agent_sampler.seed: no seed given here or at top level".into());
            }
            sampler_errors("agent_sampler.velocity", &s.velocity, false, &mut errors);
            sampler_errors("agent_sampler.trade_q", &s.trade_q, true, &mut errors);
            sampler_errors("agent_sampler.trade_sv", &s.trade_sv, true, &mut errors);
            sampler_errors("agent_sampler.expectation_q", &s.expectation_q, false, &mut errors);
            sampler_errors("agent_sampler.expectation_sv", &s.expectation_sv, false, &mut errors);
        }

        if let Some(sim) = &self.simulation {
            if let Err(e) = sim.window.steps() {
                errors.push(format!("simulation.window: {e}"));
            }
            if sim.windows == 0 {
                errors.push("simulation.windows: must be at least 1".into());
            }
        }

        if let Some(field) = &self.field {
            if let Some(dt) = field.dt {
                if !(dt > 0.0 && dt.is_finite()) {
                    errors.push(format!("field.dt: {dt} must be positive"));
                }
            }
            if field.write_every == Some(0) {
                errors.push("field.write_every: must be at least 1".into());
            }
            if let (Closure::Linear { types }, Some(k)) = (&field.closure, k) {
                if types.len() != k {
                    errors.push(format!("field.closure.types: {} couplings for {k} types", types.len()));
                }
            }
            if let FieldInitial::Uniform { velocity } = &field.initial {
                if self.dynamics.is_none() {
                    errors.push("field.initial: uniform fields need a dynamics section".into());
                }
                if let Some(d) = &self.domain {
                    if velocity.len() != d.dim() {
                        errors.push(format!("field.initial.velocity: need {} components", d.dim()));
                    }
                }
            }
        }

        if let Some(dynamics) = &self.dynamics {
            if dynamics.types.is_empty() {
                errors.push("dynamics.types: need at least one type".into());
            }
            for e in dynamics.validation_errors() {
                errors.push(format!("dynamics: {e}"));
            }
            if let Some(k) = self.types {
                if dynamics.types.len() != k {
                    errors.push(format!("dynamics.types: {} entries for {k} types", dynamics.types.len()));
                }
            }
        }

        if let Some(p) = &self.pricing {
            self.pricing_errors(p, &mut errors);
        }

        if let Some(e) = &self.ensemble {
            errors.extend(e.validation_errors().into_iter().map(|m| format!("ensemble.{m}")));
        }
        errors
    }

    fn pricing_errors(&self, p: &PricingConfig, errors: &mut Vec<String>) {
        if p.horizons.is_empty() {
            errors.push("pricing.horizons: need at least one horizon".into());
        }
        for (i, &d) in p.horizons.iter().enumerate() {
            if !(d > 0.0 && d.is_finite()) {
                errors.push(format!("pricing.horizons[{i}]: {d} must be positive"));
            }
        }
        match &p.series {
            Some(series) => {
                let types = series.types();
                if let Err(e) = series.validate(types) {
                    errors.push(format!("pricing.series: {e}"));
                }
                for (i, &d) in p.horizons.iter().enumerate() {
                    if series.steps_for(d).is_err() {
                        errors.push(format!("pricing.horizons[{i}]: {d} is not a multiple of series.step"));
                    }
                }
                match (&p.means, &self.dynamics) {
                    (Some(m), _) => {
                        if m.q0.len() != types || m.sv0.len() != types {
                            errors.push(format!("pricing.means: need {types} entries in q0 and sv0"));
                        }
                    }
                    (None, Some(d)) if d.types.len() != types => {
                        errors.push(format!("pricing.series: {types} types but dynamics has {}", d.types.len()));
                    }
                    (None, Some(_)) => {}
                    (None, None) => errors.push("pricing.means: explicit series need mean levels".into()),
                }
                if p.rk4_check {
                    errors.push("pricing.rk4_check: only applies to oscillator trajectories".into());
                }
            }
            None => {
                if self.dynamics.is_none() {
                    errors.push("pricing: needs a dynamics section or explicit series".into());
                }
                let step = p.sample_step.unwrap_or(f64::NAN);
                if !(step > 0.0 && step.is_finite()) {
                    errors.push("pricing.sample_step: required and must be positive".into());
                } else {
                    match p.duration {
                        Some(t) if grid_count(t, step).is_some_and(|n| n >= 2) => {}
                        _ => errors.push(
                            "pricing.duration: required, a multiple of sample_step spanning at least 2 samples".into(),
                        ),
                    }
                    for (i, &d) in p.horizons.iter().enumerate() {
                        if grid_count(d, step).is_none() {
                            errors.push(format!("pricing.horizons[{i}]: {d} is not a multiple of sample_step"));
                        }
                    }
                }
                if p.means.is_some() {
                    errors.push("pricing.means: only used with explicit series".into());
                }
            }
        }
        if let Some(tr) = &p.trend {
            let types = p.series.as_ref().map(PartialSeries::types).or_else(|| self.type_count());
            if let Some(k) = types {
                if tr.beta.len() != k || tr.gamma.len() != k {
                    errors.push(format!("pricing.trend: need {k} entries in beta and gamma"));
                }
            }
        }
    }
}

/// `value / step` when it is a positive integer.
pub fn grid_count(value: f64, step: f64) -> Option<usize> {
    let ratio = value / step;
    let rounded = ratio.round();
    (rounded >= 1.0 && (ratio - rounded).abs() <= 1e-9 * rounded).then_some(rounded as usize)
}
