//! Domain-integrated disturbance dynamics.
//!
//! Totals are written as slow means times `(1 + disturbance)`. With a linear
//! coupling between transactions and expected transactions,
//!
//! ```text
//! Q0  dq/dt  = a  Et0 et
//! Et0 det/dt = be Q0  q
//! ```
//!
//! each disturbance is a harmonic oscillator with `omega^2 = -a be` whenever
//! `a be < 0`. The value line (`SV`, `Et_SV`) has the same structure. Types
//! never interact.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `|c| + |d|` at or above this triggers a linearization warning.
pub const AMPLITUDE_ADVISORY: f64 = 0.1;

/// Largest accepted `dt * omega` for the RK4 integrator.
pub const MAX_PHASE_STEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Line {
    /// Trade volume `Q` and expected volume `Et_Q`.
    Volume,
    /// Trade value `SV` and expected value `Et_SV`.
    Value,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("type {k} {line:?} line: a*be = {product} is not negative, so omega^2 = -a*be > 0 fails")]
    NonOscillatory { k: usize, line: Line, product: f64 },
    #[error("type {k}: {reason}")]
    InvalidParams { k: usize, reason: String },
    #[error("dt*omega = {phase_step} exceeds {MAX_PHASE_STEP}")]
    StepTooLarge { phase_step: f64 },
    #[error("state has {got} types, params have {expected}")]
    TypeMismatch { expected: usize, got: usize },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

/// Rate of a disturbance line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "rate", rename_all = "lowercase")]
pub enum Frequency {
    /// Harmonic with angular frequency `omega = sqrt(-a be)`.
    Oscillatory(f64),
    /// Exponential with rate `sqrt(a be)`; only with `allow_unstable`.
    Unstable(f64),
}

impl Frequency {
    pub fn rate(&self) -> f64 {
        match *self {
            Frequency::Oscillatory(w) | Frequency::Unstable(w) => w,
        }
    }

    pub fn is_oscillatory(&self) -> bool {
        matches!(self, Frequency::Oscillatory(_))
    }
}

fn line_frequency(a: f64, be: f64, allow_unstable: bool, k: usize, line: Line) -> Result<Frequency, DynamicsError> {
    let product = a * be;
    if product < 0.0 {
        Ok(Frequency::Oscillatory((-product).sqrt()))
    } else if allow_unstable && product > 0.0 {
        Ok(Frequency::Unstable(product.sqrt()))
    } else {
        Err(DynamicsError::NonOscillatory { k, line, product })
    }
}

/// `(omega_q, omega_sv)` from the coupling coefficients of one type.
pub fn oscillator_frequencies(
    a_q: f64,
    be_q: f64,
    a_sv: f64,
    be_sv: f64,
    allow_unstable: bool,
) -> Result<(Frequency, Frequency), DynamicsError> {
    Ok((
        line_frequency(a_q, be_q, allow_unstable, 0, Line::Volume)?,
        line_frequency(a_sv, be_sv, allow_unstable, 0, Line::Value)?,
    ))
}

/// Means, couplings and harmonic amplitudes of one expectation type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeParams {
    pub q0: f64,
    pub sv0: f64,
    pub et0_q: f64,
    pub et0_sv: f64,
    pub a_q: f64,
    pub be_q: f64,
    pub a_sv: f64,
    pub be_sv: f64,
    pub c_q: f64,
    pub d_q: f64,
    pub c_sv: f64,
    pub d_sv: f64,
}

impl TypeParams {
    fn coupling(&self, line: Line) -> (f64, f64, f64, f64) {
        match line {
            Line::Volume => (self.a_q, self.be_q, self.q0, self.et0_q),
            Line::Value => (self.a_sv, self.be_sv, self.sv0, self.et0_sv),
        }
    }

    fn amplitudes(&self, line: Line) -> (f64, f64) {
        match line {
            Line::Volume => (self.c_q, self.d_q),
            Line::Value => (self.c_sv, self.d_sv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceParams {
    pub types: Vec<TypeParams>,
    #[serde(default)]
    pub allow_unstable: bool,
}

impl DisturbanceParams {
    pub fn new(types: Vec<TypeParams>) -> Result<Self, DynamicsError> {
        let p = Self {
            types,
            allow_unstable: false,
        };
        p.validate()?;
        Ok(p)
    }

    /// Every problem found, not just the first.
    pub fn validation_errors(&self) -> Vec<DynamicsError> {
        let mut errors = Vec::new();
        for (k, t) in self.types.iter().enumerate() {
            let all = [
                t.q0, t.sv0, t.et0_q, t.et0_sv, t.a_q, t.be_q, t.a_sv, t.be_sv, t.c_q, t.d_q, t.c_sv, t.d_sv,
            ];
            if all.iter().any(|v| !v.is_finite()) {
                errors.push(DynamicsError::InvalidParams {
                    k,
                    reason: "non-finite parameter".into(),
                });
                continue;
            }
            if !(t.q0 > 0.0 && t.sv0 > 0.0) {
                errors.push(DynamicsError::InvalidParams {
                    k,
                    reason: "mean levels q0 and sv0 must be positive".into(),
                });
            }
            if t.et0_q == 0.0 || t.et0_sv == 0.0 {
                errors.push(DynamicsError::InvalidParams {
                    k,
                    reason: "mean expected transactions et0_q and et0_sv must be non-zero".into(),
                });
            }
            for line in [Line::Volume, Line::Value] {
                let (a, be, _, _) = t.coupling(line);
                if let Err(e) = line_frequency(a, be, self.allow_unstable, k, line) {
                    errors.push(e);
                }
            }
        }
        errors
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        match self.validation_errors().into_iter().next() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn frequency(&self, k: usize, line: Line) -> Result<Frequency, DynamicsError> {
        let (a, be, _, _) = self.types[k].coupling(line);
        line_frequency(a, be, self.allow_unstable, k, line)
    }

    pub fn max_rate(&self) -> Result<f64, DynamicsError> {
        let mut m = 0.0f64;
        for k in 0..self.types.len() {
            for line in [Line::Volume, Line::Value] {
                m = m.max(self.frequency(k, line)?.rate());
            }
        }
        Ok(m)
    }
}

/// Dimensionless disturbances of one type.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TypeState {
    pub q: f64,
    pub sv: f64,
    pub et_q: f64,
    pub et_sv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisturbanceState {
    pub t: f64,
    pub types: Vec<TypeState>,
}

impl DisturbanceState {
    pub fn zeros(types: usize) -> Self {
        Self {
            t: 0.0,
            types: vec![TypeState::default(); types],
        }
    }
}

/// Disturbance `x(t)` and its time derivative for one line.
fn line_solution(freq: Frequency, c: f64, d: f64, t: f64) -> (f64, f64) {
    match freq {
        Frequency::Oscillatory(w) => {
            let (s, co) = (w * t).sin_cos();
            (c * s + d * co, w * (c * co - d * s))
        }
        Frequency::Unstable(g) => {
            let (sh, ch) = ((g * t).sinh(), (g * t).cosh());
            (c * sh + d * ch, g * (c * ch + d * sh))
        }
    }
}

/// Harmonic solution at time `t`.
///
/// `q = c sin(wt) + d cos(wt)`; the expected-transaction disturbance follows
/// from the first coupling equation, `et = Q0 / (a Et0) * dq/dt`.
pub fn closed_form_disturbance(params: &DisturbanceParams, t: f64) -> Result<DisturbanceState, DynamicsError> {
    let mut types = Vec::with_capacity(params.types.len());
    for (k, p) in params.types.iter().enumerate() {
        let mut state = TypeState::default();
        for line in [Line::Volume, Line::Value] {
            let freq = params.frequency(k, line)?;
            let (c, d) = p.amplitudes(line);
            let (a, _, mean, et_mean) = p.coupling(line);
            let (x, dx) = line_solution(freq, c, d, t);
            let et = mean / (a * et_mean) * dx;
            match line {
                Line::Volume => (state.q, state.et_q) = (x, et),
                Line::Value => (state.sv, state.et_sv) = (x, et),
            }
        }
        types.push(state);
    }
    Ok(DisturbanceState { t, types })
}

/// Time derivative of the coupled first-order system.
fn derivative(params: &DisturbanceParams, s: &[TypeState]) -> Vec<TypeState> {
    params
        .types
        .iter()
        .zip(s)
        .map(|(p, s)| TypeState {
            q: p.a_q * (p.et0_q / p.q0) * s.et_q,
            et_q: p.be_q * (p.q0 / p.et0_q) * s.q,
            sv: p.a_sv * (p.et0_sv / p.sv0) * s.et_sv,
            et_sv: p.be_sv * (p.sv0 / p.et0_sv) * s.sv,
        })
        .collect()
}

fn axpy(base: &[TypeState], rate: &[TypeState], h: f64) -> Vec<TypeState> {
    base.iter()
        .zip(rate)
        .map(|(b, r)| TypeState {
            q: b.q + h * r.q,
            sv: b.sv + h * r.sv,
            et_q: b.et_q + h * r.et_q,
            et_sv: b.et_sv + h * r.et_sv,
        })
        .collect()
}

/// Classical RK4 integration of the coupled disturbance equations.
///
/// Returns `steps + 1` states including `state0`.
pub fn integrate_coupled(
    params: &DisturbanceParams,
    state0: &DisturbanceState,
    dt: f64,
    steps: usize,
) -> Result<Vec<DisturbanceState>, DynamicsError> {
    params.validate()?;
    if state0.types.len() != params.types.len() {
        return Err(DynamicsError::TypeMismatch {
            expected: params.types.len(),
            got: state0.types.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(DynamicsError::NonPositiveStep(dt));
    }
    let phase_step = dt * params.max_rate()?;
    if phase_step >= MAX_PHASE_STEP {
        return Err(DynamicsError::StepTooLarge { phase_step });
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(state0.clone());
    let mut y = state0.types.clone();
    for i in 1..=steps {
        let k1 = derivative(params, &y);
        let k2 = derivative(params, &axpy(&y, &k1, 0.5 * dt));
        let k3 = derivative(params, &axpy(&y, &k2, 0.5 * dt));
        let k4 = derivative(params, &axpy(&y, &k3, dt));
        y = y
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let comb = |f: fn(&TypeState) -> f64| {
                    (f(&k1[j]) + 2.0 * f(&k2[j]) + 2.0 * f(&k3[j]) + f(&k4[j])) / 6.0
                };
                TypeState {
                    q: s.q + dt * comb(|x| x.q),
                    sv: s.sv + dt * comb(|x| x.sv),
                    et_q: s.et_q + dt * comb(|x| x.et_q),
                    et_sv: s.et_sv + dt * comb(|x| x.et_sv),
                }
            })
            .collect();
        out.push(DisturbanceState {
            t: state0.t + i as f64 * dt,
            types: y.clone(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearizationWarning {
    pub k: usize,
    pub line: Line,
    pub amplitude_sum: f64,
}

impl std::fmt::Display for LinearizationWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "type {} {:?} line: |c| + |d| = {} is not small (>= {AMPLITUDE_ADVISORY})",
            self.k, self.line, self.amplitude_sum
        )
    }
}

/// Flags every line whose amplitudes are too large for the linear model.
pub fn check_linearization(params: &DisturbanceParams) -> Vec<LinearizationWarning> {
    let mut warnings = Vec::new();
    for (k, p) in params.types.iter().enumerate() {
        for line in [Line::Volume, Line::Value] {
            let (c, d) = p.amplitudes(line);
            let amplitude_sum = c.abs() + d.abs();
            if amplitude_sum >= AMPLITUDE_ADVISORY {
                warnings.push(LinearizationWarning { k, line, amplitude_sum });
            }
        }
    }
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    pub(crate) fn one_type(a: f64, be: f64, c: f64, d: f64) -> TypeParams {
        TypeParams {
            q0: 100.0,
            sv0: 300.0,
            et0_q: 50.0,
            et0_sv: 120.0,
            a_q: a,
            be_q: be,
            a_sv: a,
            be_sv: be,
            c_q: c,
            d_q: d,
            c_sv: 0.5 * c,
            d_sv: 0.5 * d,
        }
    }

    #[test]
    fn frequency_examples() {
        let (w, _) = oscillator_frequencies(1.0, -4.0, 1.0, -4.0, false).unwrap();
        assert_eq!(w, Frequency::Oscillatory(2.0));
        assert!(matches!(
            oscillator_frequencies(1.0, 1.0, 1.0, -1.0, false),
            Err(DynamicsError::NonOscillatory { line: Line::Volume, .. })
        ));
        assert!(oscillator_frequencies(0.0, -1.0, 1.0, -1.0, false).is_err());
        assert!(oscillator_frequencies(0.0, -1.0, 1.0, -1.0, true).is_err());
        let (u, _) = oscillator_frequencies(1.0, 4.0, 1.0, -1.0, true).unwrap();
        assert_eq!(u, Frequency::Unstable(2.0));
    }

    #[test]
    fn closed_form_examples() {
        let p = DisturbanceParams::new(vec![one_type(1.0, -4.0, 0.01, 0.0)]).unwrap();
        let s = closed_form_disturbance(&p, PI / 4.0).unwrap();
        assert!((s.types[0].q - 0.01).abs() < 1e-17);

        let p = DisturbanceParams::new(vec![one_type(1.0, -9.0, 0.0, 0.01)]).unwrap();
        assert_eq!(closed_form_disturbance(&p, 0.0).unwrap().types[0].q, 0.01);

        let p = DisturbanceParams::new(vec![one_type(2.0, -0.5, 0.0, 0.0)]).unwrap();
        for t in [0.0, 0.3, 17.0] {
            assert_eq!(closed_form_disturbance(&p, t).unwrap().types[0], TypeState::default());
        }
    }

    #[test]
    fn closed_form_satisfies_oscillator_equation() {
        let (a, be, c, d) = (1.5, -2.0, 0.02, -0.03);
        let p = DisturbanceParams::new(vec![one_type(a, be, c, d)]).unwrap();
        let w = (-a * be).sqrt();
        let tp = &p.types[0];
        for i in 0..2000 {
            let t = i as f64 * 0.01;
            let s = closed_form_disturbance(&p, t).unwrap().types[0];
            let (sin, cos) = (w * t).sin_cos();
            let q_dd = -w * w * (c * sin + d * cos);
            assert!((q_dd + w * w * s.q).abs() <= 1e-12 * w * w * (c.abs() + d.abs()));
            // first coupling equation: dq/dt = a (Et0/Q0) et
            let q_d = w * (c * cos - d * sin);
            assert!((q_d - a * (tp.et0_q / tp.q0) * s.et_q).abs() <= 1e-14);
            // second: det/dt = be (Q0/Et0) q, with det/dt = Q0/(a Et0) q''
            let et_d = tp.q0 / (a * tp.et0_q) * q_dd;
            assert!((et_d - be * (tp.q0 / tp.et0_q) * s.q).abs() <= 1e-14);
        }
    }

    #[test]
    fn rk4_matches_closed_form() {
        let p = DisturbanceParams::new(vec![one_type(1.0, -4.0, 0.01, 0.02)]).unwrap();
        let period = PI; // omega = 2
        let dt = period / 1000.0;
        let s0 = closed_form_disturbance(&p, 0.0).unwrap();
        let traj = integrate_coupled(&p, &s0, dt, 1000).unwrap();
        let err = traj
            .iter()
            .map(|s| {
                let exact = closed_form_disturbance(&p, s.t).unwrap().types[0];
                (s.types[0].q - exact.q).abs().max((s.types[0].et_q - exact.et_q).abs())
            })
            .fold(0.0, f64::max);
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn zero_state_stays_zero() {
        let p = DisturbanceParams::new(vec![one_type(1.0, -1.0, 0.01, 0.0)]).unwrap();
        let traj = integrate_coupled(&p, &DisturbanceState::zeros(1), 0.01, 100).unwrap();
        assert!(traj.iter().all(|s| s.types[0] == TypeState::default()));
    }

    #[test]
    fn step_advisory() {
        let p = DisturbanceParams::new(vec![one_type(1.0, -4.0, 0.01, 0.0)]).unwrap();
        let s0 = DisturbanceState::zeros(1);
        assert!(matches!(
            integrate_coupled(&p, &s0, 0.25, 10),
            Err(DynamicsError::StepTooLarge { .. })
        ));
        assert!(integrate_coupled(&p, &DisturbanceState::zeros(2), 0.01, 1).is_err());
    }

    #[test]
    fn linearization_warnings() {
        let p = DisturbanceParams::new(vec![one_type(1.0, -1.0, 0.01, 0.02)]).unwrap();
        assert!(check_linearization(&p).is_empty());
        let mut t = one_type(1.0, -1.0, 0.3, 0.0);
        t.c_sv = 0.0;
        let p = DisturbanceParams::new(vec![t]).unwrap();
        let w = check_linearization(&p);
        assert_eq!(w.len(), 1);
        assert_eq!((w[0].k, w[0].line), (0, Line::Volume));
        let p = DisturbanceParams::new(vec![one_type(1.0, -1.0, 0.0, 0.0)]).unwrap();
        assert!(check_linearization(&p).is_empty());
    }

    #[test]
    fn validation_collects_all_problems() {
        let mut t = one_type(1.0, 1.0, 0.0, 0.0);
        t.q0 = -1.0;
        t.et0_sv = 0.0;
        let p = DisturbanceParams { types: vec![t], allow_unstable: false };
        assert_eq!(p.validation_errors().len(), 4);
    }

    #[test]
    fn unstable_branch_grows() {
        let mut p = DisturbanceParams { types: vec![one_type(1.0, 1.0, 0.0, 0.01)], allow_unstable: true };
        p.validate().unwrap();
        let s = closed_form_disturbance(&p, 1.0).unwrap();
        assert!((s.types[0].q - 0.01 * 1f64.cosh()).abs() < 1e-15);
        let traj = integrate_coupled(&p, &closed_form_disturbance(&p, 0.0).unwrap(), 0.001, 1000).unwrap();
        assert!((traj[1000].types[0].q - s.types[0].q).abs() < 1e-12);
        p.allow_unstable = false;
        assert!(closed_form_disturbance(&p, 1.0).is_err());
    }

    #[test]
    fn types_evolve_independently() {
        let a = one_type(1.0, -4.0, 0.01, 0.02);
        let b = one_type(0.5, -2.0, -0.03, 0.01);
        let pab = DisturbanceParams::new(vec![a, b]).unwrap();
        let pba = DisturbanceParams::new(vec![b, a]).unwrap();
        let s_ab = closed_form_disturbance(&pab, 0.0).unwrap();
        let s_ba = closed_form_disturbance(&pba, 0.0).unwrap();
        let ta = integrate_coupled(&pab, &s_ab, 0.01, 200).unwrap();
        let tb = integrate_coupled(&pba, &s_ba, 0.01, 200).unwrap();
        for (x, y) in ta.iter().zip(&tb) {
            assert_eq!(x.types[0], y.types[1]);
            assert_eq!(x.types[1], y.types[0]);
        }
    }
}
