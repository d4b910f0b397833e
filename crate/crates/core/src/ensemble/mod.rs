//! Monte Carlo study of price and return statistics.
//!
//! Each run draws per-type mean levels and harmonic disturbances, samples
//! them on a time grid, and decomposes the composite price and return. The
//! return is reported both whole and split into its partial-return and
//! volume-return components, so the footprint of volume disturbances on the
//! return distribution can be read off directly.

pub mod stats;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{closed_form_disturbance, DisturbanceParams, DynamicsError, TypeParams, AMPLITUDE_ADVISORY};
use crate::pricing::{self, PartialSeries, PricingError, Weights};
pub use stats::{histogram, moments, Binning, Histogram, Moments, StatsError, MOMENT_DEFINITIONS};

/// Largest tolerated `|r_direct - r_decomposed|` inside a run.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// A scalar parameter distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase", deny_unknown_fields)]
pub enum Sampler {
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std: f64 },
}

impl Sampler {
    pub fn fixed(value: f64) -> Self {
        Sampler::Fixed { value }
    }

    /// Closed support `[lo, hi]`, infinite for the normal distribution.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Sampler::Fixed { value } => (value, value),
            Sampler::Uniform { low, high } => (low, high),
            Sampler::Normal { mean, std: 0.0 } => (mean, mean),
            Sampler::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn problems(&self) -> Option<String> {
        match *self {
            Sampler::Fixed { value } if !value.is_finite() => Some("value must be finite".into()),
            Sampler::Uniform { low, high } if !(low.is_finite() && high.is_finite() && low <= high) => {
                Some("uniform needs finite low <= high".into())
            }
            Sampler::Normal { mean, std } if !(mean.is_finite() && std.is_finite() && std >= 0.0) => {
                Some("normal needs finite mean and std >= 0".into())
            }
            _ => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Sampler::Fixed { value } => value,
            Sampler::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rng.random_range(low..=high)
                }
            }
            Sampler::Normal { mean, std } => {
                if std == 0.0 {
                    mean
                } else {
                    Normal::new(mean, std).expect("validated").sample(rng)
                }
            }
        }
    }
}

/// Harmonic disturbance `A sin(wt + phi) = c sin(wt) + d cos(wt)` with
/// `c = A cos(phi)`, `d = A sin(phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineSampler {
    pub omega: Sampler,
    pub amplitude: Sampler,
    #[serde(default = "zero_phase")]
    pub phase: Sampler,
}

fn zero_phase() -> Sampler {
    Sampler::fixed(0.0)
}

/// Mean value level of one type: either drawn directly or through its mean price.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ValueSampler {
    Sv0(Sampler),
    Price(Sampler),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeSampler {
    pub q0: Sampler,
    pub value: ValueSampler,
    pub volume: LineSampler,
    #[serde(rename = "value_line")]
    pub value_line: LineSampler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub runs: usize,
    pub seed: u64,
    pub sample_step: f64,
    /// Sampled times are `i * sample_step` for `i < duration / sample_step`.
    pub duration: f64,
    /// Return horizons in time units, each a multiple of `sample_step`.
    pub horizons: Vec<f64>,
    pub types: Vec<TypeSampler>,
    /// One mean price per run shared by every type; overrides per-type values.
    #[serde(default)]
    pub shared_price: Option<Sampler>,
    /// Admit amplitude samplers outside the small-disturbance range.
    #[serde(default)]
    pub allow_large_amplitudes: bool,
    #[serde(default)]
    pub binning: Binning,
}

fn grid_steps(value: f64, step: f64) -> Option<usize> {
    let ratio = value / step;
    let rounded = ratio.round();
    (rounded >= 1.0 && (ratio - rounded).abs() <= 1e-9 * rounded).then_some(rounded as usize)
}

impl EnsembleConfig {
    pub fn types(&self) -> usize {
        self.types.len()
    }

    pub fn samples_per_run(&self) -> usize {
        grid_steps(self.duration, self.sample_step).unwrap_or(0)
    }

    pub fn horizon_steps(&self) -> Vec<usize> {
        self.horizons
            .iter()
            .map(|&d| grid_steps(d, self.sample_step).unwrap_or(0))
            .collect()
    }

    /// All problems, each prefixed with its field path.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if self.runs == 0 {
            errors.push("runs: must be at least 1".into());
        }
        if self.types.is_empty() {
            errors.push("types: need at least one expectation type".into());
        }
        if !(self.sample_step > 0.0 && self.sample_step.is_finite()) {
            errors.push("sample_step: must be positive".into());
        } else if grid_steps(self.duration, self.sample_step).is_none_or(|n| n < 2) {
            errors.push("duration: must be a multiple of sample_step covering at least 2 samples".into());
        } else {
            let n = self.samples_per_run();
            if self.horizons.is_empty() {
                errors.push("horizons: need at least one horizon".into());
            }
            for (i, &d) in self.horizons.iter().enumerate() {
                match grid_steps(d, self.sample_step) {
                    Some(s) if s < n => {}
                    Some(_) => errors.push(format!("horizons[{i}]: {d} leaves no samples inside duration")),
                    None => errors.push(format!("horizons[{i}]: {d} is not a positive multiple of sample_step")),
                }
            }
        }
        let mut check = |path: String, s: &Sampler, positive: bool| {
            if let Some(p) = s.problems() {
                errors.push(format!("{path}: {p}"));
            } else if positive && !(s.support().0 > 0.0) {
                errors.push(format!("{path}: support must be strictly positive"));
            }
        };
        if let Some(p) = &self.shared_price {
            check("shared_price".into(), p, true);
        }
        for (k, t) in self.types.iter().enumerate() {
            check(format!("types[{k}].q0"), &t.q0, true);
            match &t.value {
                ValueSampler::Sv0(s) => check(format!("types[{k}].value.sv0"), s, true),
                ValueSampler::Price(s) => check(format!("types[{k}].value.price"), s, true),
            }
            for (name, line) in [("volume", &t.volume), ("value_line", &t.value_line)] {
                check(format!("types[{k}].{name}.omega"), &line.omega, true);
                check(format!("types[{k}].{name}.amplitude"), &line.amplitude, false);
                check(format!("types[{k}].{name}.phase"), &line.phase, false);
            }
        }
        if !self.allow_large_amplitudes {
            for (k, t) in self.types.iter().enumerate() {
                for (name, line) in [("volume", &t.volume), ("value_line", &t.value_line)] {
                    let (lo, hi) = line.amplitude.support();
                    let amp = lo.abs().max(hi.abs());
                    let factor = match line.phase {
                        Sampler::Fixed { value } => value.cos().abs() + value.sin().abs(),
                        _ => std::f64::consts::SQRT_2,
                    };
                    if !(amp * factor < AMPLITUDE_ADVISORY) {
                        errors.push(format!(
                            "types[{k}].{name}.amplitude: |c| + |d| may reach {} (>= {AMPLITUDE_ADVISORY}); set allow_large_amplitudes to override",
                            amp * factor
                        ));
                    }
                }
            }
        }
        errors
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        let errors = self.validation_errors();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(EnsembleError::InvalidConfig(errors))
        }
    }
}

/// One drawn parameter set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub q0: Vec<f64>,
    pub sv0: Vec<f64>,
    pub weights: Weights,
    /// Oscillator parameters with `a = omega`, `be = -omega` and unit mean expectations.
    pub params: DisturbanceParams,
}

fn draw_line<R: Rng + ?Sized>(rng: &mut R, line: &LineSampler) -> (f64, f64, f64) {
    let omega = line.omega.sample(rng);
    let amplitude = line.amplitude.sample(rng);
    let phase = line.phase.sample(rng);
    (omega, amplitude * phase.cos(), amplitude * phase.sin())
}

/// Draws one scenario. Draw order is fixed: shared price, then per type
/// `q0`, value level, volume line, value line.
pub fn sample_scenario<R: Rng + ?Sized>(rng: &mut R, config: &EnsembleConfig) -> Result<Scenario, EnsembleError> {
    let shared = config.shared_price.map(|s| s.sample(rng));
    let mut q0 = Vec::with_capacity(config.types());
    let mut prices = Vec::with_capacity(config.types());
    let mut sv0 = Vec::with_capacity(config.types());
    let mut types = Vec::with_capacity(config.types());
    for t in &config.types {
        let q = t.q0.sample(rng);
        let (sv, price) = match t.value {
            ValueSampler::Sv0(s) => {
                let sv = s.sample(rng);
                (sv, sv / q)
            }
            ValueSampler::Price(s) => {
                let p = s.sample(rng);
                (p * q, p)
            }
        };
        let price = shared.unwrap_or(price);
        let sv = if shared.is_some() { price * q } else { sv };
        let (w_q, c_q, d_q) = draw_line(rng, &t.volume);
        let (w_sv, c_sv, d_sv) = draw_line(rng, &t.value_line);
        q0.push(q);
        sv0.push(sv);
        prices.push(price);
        types.push(TypeParams {
            q0: q,
            sv0: sv,
            et0_q: q,
            et0_sv: sv,
            a_q: w_q,
            be_q: -w_q,
            a_sv: w_sv,
            be_sv: -w_sv,
            c_q,
            d_q,
            c_sv,
            d_sv,
        });
    }
    let weights = pricing::weights_from_prices(&q0, &prices)?;
    let params = DisturbanceParams::new(types)?;
    Ok(Scenario {
        q0,
        sv0,
        weights,
        params,
    })
}

/// Independent generator for one run: the config seed with the run index as stream.
pub fn run_rng(seed: u64, run: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    rng
}

/// Samples of one run.
#[derive(Debug, Clone, PartialEq)]
struct RunSamples {
    pi: Vec<f64>,
    /// Per horizon: whole return, partial component, volume component.
    returns: Vec<[Vec<f64>; 3]>,
    max_identity_residual: f64,
    identity_violations: usize,
}

/// Disturbance series of a scenario on the config's time grid.
pub fn scenario_series(scenario: &Scenario, config: &EnsembleConfig) -> Result<PartialSeries, EnsembleError> {
    let n = config.samples_per_run();
    let k = scenario.params.types.len();
    let mut q = vec![Vec::with_capacity(n); k];
    let mut sv = vec![Vec::with_capacity(n); k];
    for i in 0..n {
        let state = closed_form_disturbance(&scenario.params, i as f64 * config.sample_step)?;
        for (j, s) in state.types.iter().enumerate() {
            q[j].push(s.q);
            sv[j].push(s.sv);
        }
    }
    Ok(PartialSeries::from_disturbances(0.0, config.sample_step, q, &sv))
}

fn run_once(config: &EnsembleConfig, run: usize) -> Result<RunSamples, EnsembleError> {
    let mut rng = run_rng(config.seed, run);
    let scenario = sample_scenario(&mut rng, config)?;
    let series = scenario_series(&scenario, config)?;
    let pi = series.composite(&scenario.weights)?;
    let mut returns = Vec::new();
    let mut max_identity_residual = 0.0f64;
    let mut identity_violations = 0;
    for d in config.horizon_steps() {
        let mut whole = Vec::new();
        let mut partial = Vec::new();
        let mut volume = Vec::new();
        for t in d..series.len() {
            let r = pricing::return_decomposition(&series, &scenario.weights, t, d)?;
            let residual = r.identity_residual();
            max_identity_residual = max_identity_residual.max(residual);
            if residual > IDENTITY_TOLERANCE {
                identity_violations += 1;
            }
            whole.push(r.r_direct);
            partial.push(r.partial_component);
            volume.push(r.volume_component);
        }
        returns.push([whole, partial, volume]);
    }
    Ok(RunSamples {
        pi,
        returns,
        max_identity_residual,
        identity_violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObservableReport {
    pub name: String,
    pub count: usize,
    pub moments: Option<Moments>,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub histogram: Histogram,
}

impl ObservableReport {
    pub fn from_samples(name: String, samples: &[f64], binning: Binning) -> Self {
        let finite_min = samples.iter().copied().reduce(f64::min);
        let finite_max = samples.iter().copied().reduce(f64::max);
        Self {
            name,
            count: samples.len(),
            moments: moments(samples).ok(),
            min: finite_min,
            max: finite_max,
            histogram: histogram(samples, binning),
        }
    }

    pub fn mean(&self) -> Option<f64> {
        self.moments.map(|m| m.mean)
    }

    pub fn variance(&self) -> Option<f64> {
        self.moments.map(|m| m.variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExcludedRun {
    pub run: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionReport {
    pub moment_definitions: &'static str,
    pub runs: usize,
    pub completed: usize,
    pub excluded: Vec<ExcludedRun>,
    pub max_identity_residual: f64,
    pub identity_violations: usize,
    /// `pi`, then per horizon `r`, `r_partial` and `r_volume`.
    pub observables: Vec<ObservableReport>,
}

impl DistributionReport {
    pub fn observable(&self, name: &str) -> Option<&ObservableReport> {
        self.observables.iter().find(|o| o.name == name)
    }
}

/// Label used for horizon-dependent observables, e.g. `r[d=0.5]`.
pub fn horizon_label(prefix: &str, d: f64) -> String {
    format!("{prefix}[d={d}]")
}

/// Runs the whole ensemble. Runs execute in parallel and merge in run order,
/// so the report depends only on the config.
pub fn run_ensemble(config: &EnsembleConfig) -> Result<DistributionReport, EnsembleError> {
    config.validate()?;
    let results: Vec<Result<RunSamples, EnsembleError>> =
        (0..config.runs).into_par_iter().map(|run| run_once(config, run)).collect();

    let horizons = config.horizons.len();
    let mut pi = Vec::new();
    let mut returns: Vec<[Vec<f64>; 3]> = vec![Default::default(); horizons];
    let mut excluded = Vec::new();
    let mut max_identity_residual = 0.0f64;
    let mut identity_violations = 0;
    for (run, result) in results.into_iter().enumerate() {
        match result {
            Ok(samples) => {
                pi.extend(samples.pi);
                for (acc, got) in returns.iter_mut().zip(samples.returns) {
                    for (a, g) in acc.iter_mut().zip(got) {
                        a.extend(g);
                    }
                }
                max_identity_residual = max_identity_residual.max(samples.max_identity_residual);
                identity_violations += samples.identity_violations;
            }
            Err(e) => excluded.push(ExcludedRun {
                run,
                reason: e.to_string(),
            }),
        }
    }

    let mut observables = vec![ObservableReport::from_samples("pi".into(), &pi, config.binning)];
    for (&d, [whole, partial, volume]) in config.horizons.iter().zip(&returns) {
        observables.push(ObservableReport::from_samples(horizon_label("r", d), whole, config.binning));
        observables.push(ObservableReport::from_samples(horizon_label("r_partial", d), partial, config.binning));
        observables.push(ObservableReport::from_samples(horizon_label("r_volume", d), volume, config.binning));
    }
    Ok(DistributionReport {
        moment_definitions: MOMENT_DEFINITIONS,
        runs: config.runs,
        completed: config.runs - excluded.len(),
        excluded,
        max_identity_residual,
        identity_violations,
        observables,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(omega: f64, amplitude: f64) -> LineSampler {
        LineSampler {
            omega: Sampler::fixed(omega),
            amplitude: Sampler::fixed(amplitude),
            phase: Sampler::fixed(0.0),
        }
    }

    pub(crate) fn harmonic_config() -> EnsembleConfig {
        let period = 2.0 * std::f64::consts::PI;
        EnsembleConfig {
            runs: 4,
            seed: 11,
            sample_step: period / 200.0,
            duration: 3.0 * period,
            horizons: vec![period / 20.0],
            types: vec![TypeSampler {
                q0: Sampler::fixed(100.0),
                value: ValueSampler::Price(Sampler::fixed(3.0)),
                volume: line(1.0, 0.0),
                value_line: line(1.0, 0.01),
            }],
            shared_price: None,
            allow_large_amplitudes: false,
            binning: Binning::FreedmanDiaconis,
        }
    }

    #[test]
    fn point_mass_samplers_give_point_values() {
        let cfg = harmonic_config();
        let s = sample_scenario(&mut run_rng(1, 0), &cfg).unwrap();
        assert_eq!(s.q0, vec![100.0]);
        assert_eq!(s.sv0, vec![300.0]);
        assert_eq!(s.params.types[0].c_sv, 0.01);
        assert_eq!(s.params.types[0].d_sv, 0.0);
    }

    #[test]
    fn same_seed_same_scenario() {
        let mut cfg = harmonic_config();
        cfg.types[0].q0 = Sampler::Uniform { low: 10.0, high: 20.0 };
        cfg.types[0].volume.phase = Sampler::Uniform { low: 0.0, high: 6.0 };
        let a = sample_scenario(&mut run_rng(5, 3), &cfg).unwrap();
        let b = sample_scenario(&mut run_rng(5, 3), &cfg).unwrap();
        let c = sample_scenario(&mut run_rng(5, 4), &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn non_positive_mean_support_rejected() {
        let mut cfg = harmonic_config();
        cfg.types[0].q0 = Sampler::Uniform { low: -1.0, high: 5.0 };
        let errors = cfg.validation_errors();
        assert!(errors.iter().any(|e| e.starts_with("types[0].q0")), "{errors:?}");
        cfg.types[0].q0 = Sampler::Normal { mean: 10.0, std: 1.0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn amplitude_advisory_enforced() {
        let mut cfg = harmonic_config();
        cfg.types[0].value_line.amplitude = Sampler::Uniform { low: 0.0, high: 0.08 };
        cfg.types[0].value_line.phase = Sampler::Uniform { low: 0.0, high: 1.0 };
        // 0.08 * sqrt(2) > 0.1
        assert!(cfg.validate().is_err());
        cfg.allow_large_amplitudes = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn bad_grid_rejected() {
        let mut cfg = harmonic_config();
        cfg.horizons = vec![0.001];
        assert!(cfg.validate().is_err());
        cfg.horizons = vec![cfg.duration];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn harmonic_variance() {
        let report = run_ensemble(&harmonic_config()).unwrap();
        let v = report.observable("pi").unwrap().variance().unwrap();
        assert!((v / 5e-5 - 1.0).abs() <= 0.02, "{v}");
        assert_eq!(report.completed, 4);
        assert_eq!(report.identity_violations, 0);
    }

    #[test]
    fn zero_amplitudes_zero_everything() {
        let mut cfg = harmonic_config();
        cfg.types[0].value_line.amplitude = Sampler::fixed(0.0);
        let report = run_ensemble(&cfg).unwrap();
        for o in &report.observables {
            let m = o.moments.unwrap();
            assert_eq!((m.mean, m.variance), (0.0, 0.0), "{}", o.name);
        }
    }

    #[test]
    fn histograms_count_all_samples() {
        let report = run_ensemble(&harmonic_config()).unwrap();
        for o in &report.observables {
            assert_eq!(o.histogram.total() as usize, o.count);
        }
    }
}
