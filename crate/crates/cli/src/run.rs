use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use log::{info, warn};
use serde::Serialize;

use tradeflow_core::aggregate::{aggregate_windows, integrate_domain};
use tradeflow_core::dynamics::check_linearization;
use tradeflow_core::ensemble::{run_rng, run_ensemble, EnsembleError, Sampler};
use tradeflow_core::espace::{advance_agents_in_place, Agent, ExpectationPair, Grid, TransactionPair};
use tradeflow_core::fieldsolve::{system_from_aggregate, uniform_coupled_system, FieldSystem};
use tradeflow_core::pricing::{self, decompose_series, exact_price, TrendParams};
use tradeflow_core::report::{self, Meta};
use tradeflow_core::{
    closed_form_disturbance, integrate_coupled, DisturbanceParams, DisturbanceState, PartialSeries, Weights,
};

use crate::config::{grid_count, FieldInitial, Format, LoadedConfig, ScenarioConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::Subcommand)]
pub enum Command {
    /// Move agents and aggregate them into per-cell fields.
    Simulate,
    /// Step the continuity equations and report the domain balance.
    Field,
    /// Oscillator trajectories and the price/return decomposition.
    Decompose,
    /// Monte Carlo distribution study.
    Ensemble,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Field => "field",
            Command::Decompose => "decompose",
            Command::Ensemble => "ensemble",
        }
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub seed: Option<u64>,
    pub allow_unstable: bool,
}

/// Effective settings after applying overrides.
struct Context {
    config: ScenarioConfig,
    out: PathBuf,
    format: Format,
    sha256: String,
}

impl Context {
    fn meta(&self, seed: Option<u64>) -> Meta {
        Meta {
            config_sha256: self.sha256.clone(),
            seed,
        }
    }

    fn create(&self, name: &str) -> Result<(BufWriter<File>, PathBuf), CliError> {
        let path = self.out.join(name);
        let file = File::create(&path).map_err(|e| CliError::io("write_output", &path, e))?;
        Ok((BufWriter::new(file), path))
    }

    fn write_csv<F>(&self, name: &str, write: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    {
        let (mut w, path) = self.create(name)?;
        write(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io("write_output", &path, e))?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, seed: Option<u64>, body: &T) -> Result<PathBuf, CliError> {
        #[derive(Serialize)]
        struct Doc<'a, T> {
            meta: Meta,
            #[serde(flatten)]
            body: &'a T,
        }
        let doc = Doc {
            meta: self.meta(seed),
            body,
        };
        let (mut w, path) = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, &doc)
            .map_err(std::io::Error::from)
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(|e| CliError::io("write_output", &path, e))?;
        info!("wrote {}", path.display());
        Ok(path)
    }
}

/// Runs one subcommand on a parsed config and returns the files written.
pub fn run(command: Command, loaded: LoadedConfig, overrides: &Overrides) -> Result<Vec<PathBuf>, CliError> {
    let LoadedConfig { mut config, sha256 } = loaded;
    if overrides.allow_unstable {
        if let Some(d) = config.dynamics.as_mut() {
            d.allow_unstable = true;
        }
    }
    if let Some(seed) = overrides.seed {
        config.seed = Some(seed);
        if let Some(e) = config.ensemble.as_mut() {
            e.seed = seed;
        }
        if let Some(s) = config.agent_sampler.as_mut() {
            s.seed = Some(seed);
        }
    }
    let errors = config.validation_errors();
    if !errors.is_empty() {
        return Err(CliError::config("parse_config", errors));
    }
    require_sections(command, &config)?;

    let output = config.output.clone().unwrap_or_default();
    let out = overrides
        .out
        .clone()
        .or(output.dir)
        .unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out).map_err(|e| CliError::io("create_output_dir", &out, e))?;
    let ctx = Context {
        format: overrides.format.or(output.format).unwrap_or_default(),
        config,
        out,
        sha256,
    };
    info!("running {} into {}", command.name(), ctx.out.display());
    match command {
        Command::Simulate => simulate(&ctx),
        Command::Field => field(&ctx),
        Command::Decompose => decompose(&ctx),
        Command::Ensemble => ensemble(&ctx),
    }
}

fn require_sections(command: Command, c: &ScenarioConfig) -> Result<(), CliError> {
    let mut missing = Vec::new();
    let mut need = |present: bool, name: &str| {
        if !present {
            missing.push(format!("{}: section required by {}", name, command.name()));
        }
    };
    match command {
        Command::Simulate => {
            need(c.domain.is_some(), "domain");
            need(c.grid.is_some(), "grid");
            need(c.has_agents(), "agents|agent_sampler");
            need(c.simulation.is_some(), "simulation");
        }
        Command::Field => {
            need(c.domain.is_some(), "domain");
            need(c.grid.is_some(), "grid");
            need(c.field.is_some(), "field");
            if matches!(c.field.as_ref().map(|f| &f.initial), Some(FieldInitial::Agents)) {
                need(c.has_agents(), "agents|agent_sampler");
                need(c.simulation.is_some(), "simulation");
            }
        }
        Command::Decompose => need(c.pricing.is_some(), "pricing"),
        Command::Ensemble => need(c.ensemble.is_some(), "ensemble"),
    }
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::config("run", missing))
    }
}

fn build_grid(c: &ScenarioConfig) -> Result<Grid, CliError> {
    let domain = c.domain.clone().expect("required section");
    let spec = c.grid.as_ref().expect("required section");
    Grid::new(domain, spec).map_err(|e| CliError::config("build_grid", vec![e.to_string()]))
}

fn agent_seed(c: &ScenarioConfig) -> Option<u64> {
    c.agent_sampler.as_ref().and_then(|s| s.seed).or(c.seed)
}

/// The configured roster, or a sampled population.
pub fn initial_agents(c: &ScenarioConfig) -> Vec<Agent> {
    if let Some(agents) = &c.agents {
        return agents.clone();
    }
    let s = c.agent_sampler.as_ref().expect("validated");
    let domain = c.domain.as_ref().expect("validated");
    let types = c.type_count().expect("validated");
    let mut rng = run_rng(agent_seed(c).expect("validated"), 0);
    (0..s.count as u64)
        .map(|id| {
            let x = domain
                .bounds
                .iter()
                .map(|&b| Sampler::Uniform { low: 0.0, high: b }.sample(&mut rng))
                .collect();
            let v = domain.bounds.iter().map(|_| s.velocity.sample(&mut rng)).collect();
            let trades = (0..types)
                .map(|_| TransactionPair::new(s.trade_q.sample(&mut rng), s.trade_sv.sample(&mut rng)))
                .collect();
            let expectations = (0..types)
                .map(|_| ExpectationPair {
                    q: s.expectation_q.sample(&mut rng),
                    sv: s.expectation_sv.sample(&mut rng),
                })
                .collect();
            Agent {
                id,
                x,
                v,
                trades,
                expectations,
            }
        })
        .collect()
}

/// Snapshots every `sample_step` covering `windows` consecutive windows.
fn agent_trajectory(c: &ScenarioConfig) -> Result<Vec<Vec<Agent>>, CliError> {
    let sim = c.simulation.as_ref().expect("required section");
    let domain = c.domain.as_ref().expect("required section");
    let steps = sim.window.steps().map_err(|e| CliError::config("simulate", vec![e.to_string()]))?;
    let mut agents = initial_agents(c);
    let mut snapshots = Vec::with_capacity(steps * sim.windows);
    for i in 0..steps * sim.windows {
        if i > 0 {
            advance_agents_in_place(&mut agents, domain, sim.window.sample_step);
        }
        snapshots.push(agents.clone());
    }
    Ok(snapshots)
}

fn simulate(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let c = &ctx.config;
    let grid = build_grid(c)?;
    let sim = c.simulation.as_ref().expect("required section");
    let types = c.type_count().expect("validated");
    let snapshots = agent_trajectory(c)?;
    let fields = aggregate_windows(&snapshots, &grid, &sim.window, types, 0.0)
        .map_err(|e| CliError::numeric("aggregate", "aggregate_windows", e))?;
    let seed = agent_seed(c).filter(|_| c.agent_sampler.is_some());
    let meta = ctx.meta(seed);
    let mut written = Vec::new();
    match ctx.format {
        Format::Csv => {
            for (i, f) in fields.iter().enumerate() {
                written.push(ctx.write_csv(&format!("aggregate_{i}.csv"), |w| {
                    report::write_aggregate(w, &meta, &grid, f)
                })?);
            }
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                fields: &'a [tradeflow_core::AggregateField],
            }
            written.push(ctx.write_json("aggregate.json", seed, &Body { fields: &fields })?);
        }
    }
    #[derive(Serialize)]
    struct Totals {
        windows: Vec<Window>,
    }
    #[derive(Serialize)]
    struct Window {
        t_start: f64,
        per_type: Vec<tradeflow_core::Extensives>,
    }
    let totals = Totals {
        windows: fields
            .iter()
            .map(|f| Window {
                t_start: f.t_start,
                per_type: integrate_domain(f),
            })
            .collect(),
    };
    written.push(ctx.write_json("domain_totals.json", seed, &totals)?);
    Ok(written)
}

fn field(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let c = &ctx.config;
    let fc = c.field.as_ref().expect("required section");
    let grid = build_grid(c)?;
    let (system, initial): (FieldSystem, Vec<Vec<f64>>) = match &fc.initial {
        FieldInitial::Agents => {
            let sim = c.simulation.as_ref().expect("required section");
            let types = c.type_count().expect("validated");
            let steps = sim.window.steps().expect("validated");
            let snapshots = agent_trajectory(c)?;
            let first = aggregate_windows(&snapshots[..steps], &grid, &sim.window, types, 0.0)
                .map_err(|e| CliError::numeric("aggregate", "aggregate_windows", e))?;
            system_from_aggregate(&grid, &first[0], &fc.closure)
                .map_err(|e| CliError::numeric("fieldsolve", "system_from_aggregate", e))?
        }
        FieldInitial::Uniform { velocity } => {
            let params = c.dynamics.as_ref().expect("validated");
            let state0 = closed_form_disturbance(params, 0.0)
                .map_err(|e| CliError::numeric("dynamics", "closed_form_disturbance", e))?;
            let mut v = [0.0; 3];
            v[..velocity.len()].copy_from_slice(velocity);
            uniform_coupled_system(&grid, params, &state0, vec![v; grid.cell_count()])
                .map_err(|e| CliError::numeric("fieldsolve", "uniform_coupled_system", e))?
        }
    };
    let dt = match fc.dt {
        Some(dt) => dt,
        None if system.stable_dt().is_finite() => system.stable_dt(),
        None => {
            return Err(CliError::config(
                "field",
                vec!["field.dt: required when every velocity is zero".into()],
            ))
        }
    };
    info!("field: {} components, dt = {dt}, {} steps", system.names().len(), fc.steps);
    let trajectory = system
        .run(initial, dt, fc.steps, fc.integrator)
        .map_err(|e| CliError::numeric("fieldsolve", "step_continuity", e))?;
    let balance = trajectory.balance(&grid);
    let seed = agent_seed(c).filter(|_| c.agent_sampler.is_some() && matches!(fc.initial, FieldInitial::Agents));
    let meta = ctx.meta(seed);
    let every = fc.write_every.unwrap_or(fc.steps.max(1));
    let mut written = Vec::new();
    match ctx.format {
        Format::Csv => {
            written.push(ctx.write_csv("field_balance.csv", |w| report::write_balance(w, &meta, &balance))?);
            written.push(ctx.write_csv("field_trajectory.csv", |w| {
                report::write_field_trajectory(w, &meta, &trajectory, every)
            })?);
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                dt: f64,
                steps: usize,
                balance: &'a [tradeflow_core::fieldsolve::ComponentBalance],
            }
            written.push(ctx.write_json(
                "field_balance.json",
                seed,
                &Body {
                    dt,
                    steps: fc.steps,
                    balance: &balance,
                },
            )?);
        }
    }
    Ok(written)
}

struct PricingInput {
    series: PartialSeries,
    weights: Weights,
    states: Option<Vec<DisturbanceState>>,
}

fn pricing_input(c: &ScenarioConfig) -> Result<PricingInput, CliError> {
    let p = c.pricing.as_ref().expect("required section");
    if let Some(series) = &p.series {
        let (q0, sv0) = match (&p.means, &c.dynamics) {
            (Some(m), _) => (m.q0.clone(), m.sv0.clone()),
            (None, Some(d)) => (d.types.iter().map(|t| t.q0).collect(), d.types.iter().map(|t| t.sv0).collect()),
            (None, None) => unreachable!("validated"),
        };
        let weights = pricing::weights(&q0, &sv0).map_err(|e| CliError::numeric("pricing", "weights", e))?;
        return Ok(PricingInput {
            series: series.clone(),
            weights,
            states: None,
        });
    }
    let params: &DisturbanceParams = c.dynamics.as_ref().expect("validated");
    for w in check_linearization(params) {
        warn!("{w}");
    }
    let step = p.sample_step.expect("validated");
    let n = grid_count(p.duration.expect("validated"), step).expect("validated");
    let states = (0..n)
        .map(|i| closed_form_disturbance(params, i as f64 * step))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::numeric("dynamics", "closed_form_disturbance", e))?;
    let k = params.types.len();
    let q: Vec<Vec<f64>> = (0..k).map(|j| states.iter().map(|s| s.types[j].q).collect()).collect();
    let sv: Vec<Vec<f64>> = (0..k).map(|j| states.iter().map(|s| s.types[j].sv).collect()).collect();
    let q0: Vec<f64> = params.types.iter().map(|t| t.q0).collect();
    let sv0: Vec<f64> = params.types.iter().map(|t| t.sv0).collect();
    let weights = pricing::weights(&q0, &sv0).map_err(|e| CliError::numeric("pricing", "weights", e))?;
    Ok(PricingInput {
        series: PartialSeries::from_disturbances(0.0, step, q, &sv),
        weights,
        states: Some(states),
    })
}

#[derive(Serialize)]
struct DecomposeSummary {
    weights: Weights,
    rows: usize,
    max_identity_residual: f64,
    max_weight_sum_error: f64,
    max_linearization_gap: Option<f64>,
    rk4_max_deviation: Option<f64>,
    linearization_warnings: Vec<String>,
}

fn decompose(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let c = &ctx.config;
    let p = c.pricing.as_ref().expect("required section");
    let input = pricing_input(c)?;
    let horizons: Vec<usize> = p
        .horizons
        .iter()
        .map(|&d| input.series.steps_for(d))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::config("decompose", vec![e.to_string()]))?;
    if let Some(&d) = horizons.iter().find(|&&d| d >= input.series.len()) {
        return Err(CliError::config(
            "decompose",
            vec![format!("pricing.horizons: {d} steps leave no samples")],
        ));
    }
    let trend = match &p.trend {
        None => None,
        Some(t) => Some(
            match t.alpha {
                Some(a) => TrendParams::new(a, t.beta.clone(), t.gamma.clone(), &input.weights),
                None => TrendParams::from_rates(t.beta.clone(), t.gamma.clone(), &input.weights),
            }
            .map_err(|e| CliError::numeric("pricing", "trend_return", e))?,
        ),
    };
    let (rows, failures) = decompose_series(&input.series, &input.weights, &horizons, trend.as_ref());
    if !failures.is_empty() {
        let op = if trend.is_some() { "trend_return" } else { "return_decomposition" };
        return Err(CliError::new(
            crate::error::ErrorKind::Numeric,
            "pricing",
            op,
            failures.iter().map(ToString::to_string).collect(),
        ));
    }

    // exact nonlinear price from absolute levels, only for oscillator runs
    let exact = match (&input.states, &c.dynamics) {
        (Some(_), Some(params)) if trend.is_none() => {
            let abs = |mean: fn(&tradeflow_core::TypeParams) -> f64, series: &[Vec<f64>]| -> Vec<Vec<f64>> {
                params
                    .types
                    .iter()
                    .zip(series)
                    .map(|(t, s)| s.iter().map(|x| mean(t) * (1.0 + x)).collect())
                    .collect()
            };
            let sv: Vec<Vec<f64>> = input
                .series
                .pi
                .iter()
                .zip(&input.series.q)
                .map(|(pi, q)| pi.iter().zip(q).map(|(a, b)| a + b).collect())
                .collect();
            Some(
                exact_price(&abs(|t| t.q0, &input.series.q), &abs(|t| t.sv0, &sv), &input.weights)
                    .map_err(|e| CliError::numeric("pricing", "exact_price", e))?,
            )
        }
        _ => None,
    };
    let composite = input
        .series
        .composite(&input.weights)
        .map_err(|e| CliError::numeric("pricing", "price_disturbance", e))?;
    let max_linearization_gap = exact.as_ref().map(|e| {
        e.disturbance
            .iter()
            .zip(&composite)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    });

    let rk4_max_deviation = match (&input.states, &c.dynamics) {
        (Some(states), Some(params)) if p.rk4_check => {
            let step = input.series.step;
            let traj = integrate_coupled(params, &states[0], step, states.len() - 1)
                .map_err(|e| CliError::numeric("dynamics", "integrate_coupled", e))?;
            Some(
                traj.iter()
                    .zip(states)
                    .flat_map(|(a, b)| a.types.iter().zip(&b.types))
                    .map(|(a, b)| {
                        [a.q - b.q, a.sv - b.sv, a.et_q - b.et_q, a.et_sv - b.et_sv]
                            .iter()
                            .fold(0.0f64, |m, x| m.max(x.abs()))
                    })
                    .fold(0.0, f64::max),
            )
        }
        _ => None,
    };

    let summary = DecomposeSummary {
        rows: rows.len(),
        max_identity_residual: rows.iter().map(|r| r.identity_residual()).fold(0.0, f64::max),
        max_weight_sum_error: rows.iter().map(|r| (r.weight_sum() - 1.0).abs()).fold(0.0, f64::max),
        max_linearization_gap,
        rk4_max_deviation,
        linearization_warnings: c
            .dynamics
            .as_ref()
            .filter(|_| input.states.is_some())
            .map(|d| check_linearization(d).iter().map(ToString::to_string).collect())
            .unwrap_or_default(),
        weights: input.weights.clone(),
    };
    let meta = ctx.meta(None);
    let mut written = Vec::new();
    match ctx.format {
        Format::Csv => {
            written.push(ctx.write_csv("decomposition.csv", |w| {
                report::write_decomposition(w, &meta, &input.series, &rows, exact.as_ref())
            })?);
            if let Some(states) = &input.states {
                written.push(ctx.write_csv("dynamics.csv", |w| report::write_dynamics(w, &meta, states))?);
            }
        }
        Format::Json => {
            #[derive(Serialize)]
            struct Body<'a> {
                decomposition: &'a [tradeflow_core::ReturnDecomposition],
                trajectory: Option<&'a [DisturbanceState]>,
            }
            written.push(ctx.write_json(
                "decomposition.json",
                None,
                &Body {
                    decomposition: &rows,
                    trajectory: input.states.as_deref(),
                },
            )?);
        }
    }
    written.push(ctx.write_json("decompose_summary.json", None, &summary)?);
    Ok(written)
}

fn ensemble(ctx: &Context) -> Result<Vec<PathBuf>, CliError> {
    let config = ctx.config.ensemble.as_ref().expect("required section");
    let report = run_ensemble(config).map_err(|e| match e {
        EnsembleError::InvalidConfig(m) => CliError::config("run_ensemble", m),
        other => CliError::numeric("ensemble", "run_ensemble", other),
    })?;
    if !report.excluded.is_empty() {
        warn!("{} of {} runs excluded", report.excluded.len(), report.runs);
    }
    let seed = Some(config.seed);
    let meta = ctx.meta(seed);
    let mut written = vec![ctx.write_json("ensemble_report.json", seed, &report)?];
    if ctx.format == Format::Csv {
        written.push(ctx.write_csv("moments.csv", |w| report::write_moments(w, &meta, &report))?);
        written.push(ctx.write_csv("histograms.csv", |w| report::write_histograms(w, &meta, &report))?);
    }
    Ok(written)
}
