//! Finite-volume solver for continuity equations `df/dt + div(f v) = F` on the
//! economic domain.
//!
//! Fields hold densities (amount per unit cell volume), so the domain integral
//! is `sum_c f_c * dV`. Faces on the domain boundary carry no flux: no agents,
//! and therefore nothing extensive, exist outside the domain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::AggregateField;
use crate::dynamics::{DisturbanceParams, DisturbanceState};
use crate::espace::{Grid, Vector, MAX_DIM};
use crate::numeric::neumaier_sum;

/// CFL safety factor applied to `min_i dV_i / max|v_i|`.
pub const CFL_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("time step {dt} exceeds the stability limit {limit}")]
    Unstable { dt: f64, limit: f64 },
    #[error("non-finite value in {what} at cell {cell}")]
    NonFinite { what: String, cell: usize },
    #[error("{what}: expected {expected} entries, got {got}")]
    LengthMismatch {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("linear closure references component {0}, which does not exist")]
    BadPartner(usize),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<(), FieldError> {
    if expected == got {
        Ok(())
    } else {
        Err(FieldError::LengthMismatch {
            what: what.to_string(),
            expected,
            got,
        })
    }
}

fn check_finite(what: &str, values: &[f64]) -> Result<(), FieldError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(cell) => Err(FieldError::NonFinite {
            what: what.to_string(),
            cell,
        }),
        None => Ok(()),
    }
}

/// Largest stable explicit step for a velocity field.
pub fn stable_dt(grid: &Grid, velocity: &[Vector]) -> f64 {
    let mut limit = f64::INFINITY;
    for (axis, &dx) in grid.cell_extent().iter().enumerate() {
        let vmax = velocity.iter().fold(0.0f64, |m, v| m.max(v[axis].abs()));
        if vmax > 0.0 {
            limit = limit.min(CFL_SAFETY * dx / vmax);
        }
    }
    limit
}

/// Net upwind outflow rate `div(f v)` per cell.
///
/// Face velocity is the mean of the two adjacent cell velocities; the carried
/// value comes from the upwind side.
pub fn flux_divergence(grid: &Grid, f: &[f64], velocity: &[Vector]) -> Vec<f64> {
    let n = grid.cell_count();
    let cells = grid.cells_per_axis();
    let dim = grid.dim();
    let mut strides = [1usize; MAX_DIM];
    for axis in (0..dim.saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * cells[axis + 1];
    }
    let mut div = vec![0.0; n];
    for c in 0..n {
        for axis in 0..dim {
            let along = (c / strides[axis]) % cells[axis];
            if along + 1 == cells[axis] {
                continue; // boundary face: zero flux
            }
            let nb = c + strides[axis];
            let v_face = 0.5 * (velocity[c][axis] + velocity[nb][axis]);
            let carried = if v_face > 0.0 { f[c] } else { f[nb] };
            let flux = v_face * carried / grid.cell_extent()[axis];
            div[c] += flux;
            div[nb] -= flux;
        }
    }
    div
}

/// One explicit first-order upwind step of `df/dt + div(f v) = source`.
pub fn step_continuity(
    grid: &Grid,
    field: &[f64],
    velocity: &[Vector],
    source: &[f64],
    dt: f64,
) -> Result<Vec<f64>, FieldError> {
    let n = grid.cell_count();
    check_len("field", n, field.len())?;
    check_len("velocity", n, velocity.len())?;
    check_len("source", n, source.len())?;
    check_finite("field", field)?;
    check_finite("source", source)?;
    if let Some(cell) = velocity.iter().position(|v| v.iter().any(|x| !x.is_finite())) {
        return Err(FieldError::NonFinite {
            what: "velocity".into(),
            cell,
        });
    }
    if !(dt > 0.0) {
        return Err(FieldError::NonPositiveStep(dt));
    }
    let limit = stable_dt(grid, velocity);
    if dt > limit {
        return Err(FieldError::Unstable { dt, limit });
    }
    let div = flux_divergence(grid, field, velocity);
    Ok(field
        .iter()
        .zip(source)
        .zip(&div)
        .map(|((f, s), d)| f + dt * (s - d))
        .collect())
}

/// `sum_c f_c * dV`, compensated.
pub fn domain_integral(grid: &Grid, f: &[f64]) -> f64 {
    neumaier_sum(f.iter().copied()) * grid.cell_volume()
}

/// Per-step balance residual `|(I_{n+1} - I_n)/dt - S_n|` where `I` is the domain
/// integral of the field and `S` that of the source applied over the step.
pub fn verify_domain_balance(grid: &Grid, states: &[Vec<f64>], sources: &[Vec<f64>], dt: f64) -> Vec<f64> {
    states
        .windows(2)
        .zip(sources)
        .map(|(pair, src)| {
            let change = (domain_integral(grid, &pair[1]) - domain_integral(grid, &pair[0])) / dt;
            (change - domain_integral(grid, src)).abs()
        })
        .collect()
}

/// Per-component cell values, `state[component][cell]`.
pub type State = Vec<Vec<f64>>;

/// Source term of one component.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Zero,
    /// Same density rate in every cell.
    Uniform(f64),
    PerCell(Vec<f64>),
    /// `coefficient * (partner - reference)`, evaluated pointwise.
    Linear {
        coefficient: f64,
        partner: usize,
        reference: Vec<f64>,
    },
}

impl Source {
    fn evaluate(&self, state: &[Vec<f64>], n: usize) -> Vec<f64> {
        match self {
            Source::Zero => vec![0.0; n],
            Source::Uniform(c) => vec![*c; n],
            Source::PerCell(values) => values.clone(),
            Source::Linear {
                coefficient,
                partner,
                reference,
            } => state[*partner]
                .iter()
                .zip(reference)
                .map(|(p, r)| coefficient * (p - r))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    /// Forward Euler, exactly [`step_continuity`] per component.
    #[default]
    Euler,
    /// Classical RK4 over the same upwind operator. Used when sources couple
    /// components and the time error must stay well below the spatial one.
    Rk4,
}

/// One advected quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub name: String,
    pub velocity: Vec<Vector>,
    pub source: Source,
}

/// Several continuity equations stepped together, possibly coupled through
/// their sources.
#[derive(Debug, Clone)]
pub struct FieldSystem {
    grid: Grid,
    components: Vec<Component>,
}

/// Field values after every step, plus the source actually applied over each step.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrajectory {
    pub dt: f64,
    pub names: Vec<String>,
    /// `states[step][component][cell]`, `steps + 1` entries.
    pub states: Vec<Vec<Vec<f64>>>,
    /// `sources[step][component][cell]`, `steps` entries.
    pub sources: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentBalance {
    pub name: String,
    pub initial_integral: f64,
    pub final_integral: f64,
    pub max_residual: f64,
    /// `max_residual / max_t |integral|`, or the raw residual when the field vanishes.
    pub max_relative_residual: f64,
}

impl FieldTrajectory {
    pub fn component(&self, index: usize) -> impl Iterator<Item = &Vec<f64>> + '_ {
        self.states.iter().map(move |s| &s[index])
    }

    pub fn integrals(&self, grid: &Grid, index: usize) -> Vec<f64> {
        self.component(index).map(|f| domain_integral(grid, f)).collect()
    }

    pub fn balance(&self, grid: &Grid) -> Vec<ComponentBalance> {
        (0..self.names.len())
            .map(|i| {
                let states: Vec<Vec<f64>> = self.component(i).cloned().collect();
                let sources: Vec<Vec<f64>> = self.sources.iter().map(|s| s[i].clone()).collect();
                let residuals = verify_domain_balance(grid, &states, &sources, self.dt);
                let integrals = self.integrals(grid, i);
                let scale = integrals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let max_residual = residuals.iter().copied().fold(0.0, f64::max);
                ComponentBalance {
                    name: self.names[i].clone(),
                    initial_integral: integrals[0],
                    final_integral: *integrals.last().unwrap(),
                    max_residual,
                    max_relative_residual: if scale > 0.0 { max_residual / scale } else { max_residual },
                }
            })
            .collect()
    }
}

impl FieldSystem {
    pub fn new(grid: Grid, components: Vec<Component>) -> Result<Self, FieldError> {
        let n = grid.cell_count();
        for c in &components {
            check_len(&format!("{} velocity", c.name), n, c.velocity.len())?;
            match &c.source {
                Source::PerCell(v) => check_len(&format!("{} source", c.name), n, v.len())?,
                Source::Linear {
                    partner, reference, ..
                } => {
                    if *partner >= components.len() {
                        return Err(FieldError::BadPartner(*partner));
                    }
                    check_len(&format!("{} reference", c.name), n, reference.len())?;
                }
                _ => {}
            }
        }
        Ok(Self { grid, components })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn names(&self) -> Vec<String> {
        self.components.iter().map(|c| c.name.clone()).collect()
    }

    pub fn stable_dt(&self) -> f64 {
        self.components
            .iter()
            .map(|c| stable_dt(&self.grid, &c.velocity))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn sources(&self, state: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.grid.cell_count();
        self.components.iter().map(|c| c.source.evaluate(state, n)).collect()
    }

    fn rhs(&self, state: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let sources = self.sources(state);
        let rates = self
            .components
            .iter()
            .zip(state)
            .zip(&sources)
            .map(|((c, f), s)| {
                let div = flux_divergence(&self.grid, f, &c.velocity);
                s.iter().zip(div).map(|(s, d)| s - d).collect()
            })
            .collect();
        (rates, sources)
    }

    fn check_state(&self, state: &[Vec<f64>]) -> Result<(), FieldError> {
        check_len("state components", self.components.len(), state.len())?;
        for (c, f) in self.components.iter().zip(state) {
            check_len(&c.name, self.grid.cell_count(), f.len())?;
            check_finite(&c.name, f)?;
        }
        Ok(())
    }

    /// Advances one step; returns the new state and the source applied over it.
    pub fn step(
        &self,
        state: &[Vec<f64>],
        dt: f64,
        integrator: Integrator,
    ) -> Result<(State, State), FieldError> {
        self.check_state(state)?;
        if !(dt > 0.0) {
            return Err(FieldError::NonPositiveStep(dt));
        }
        let limit = self.stable_dt();
        if dt > limit {
            return Err(FieldError::Unstable { dt, limit });
        }
        let axpy = |base: &[Vec<f64>], rate: &[Vec<f64>], h: f64| -> Vec<Vec<f64>> {
            base.iter()
                .zip(rate)
                .map(|(b, r)| b.iter().zip(r).map(|(b, r)| b + h * r).collect())
                .collect()
        };
        match integrator {
            Integrator::Euler => {
                let (rate, source) = self.rhs(state);
                Ok((axpy(state, &rate, dt), source))
            }
            Integrator::Rk4 => {
                let (k1, s1) = self.rhs(state);
                let (k2, s2) = self.rhs(&axpy(state, &k1, 0.5 * dt));
                let (k3, s3) = self.rhs(&axpy(state, &k2, 0.5 * dt));
                let (k4, s4) = self.rhs(&axpy(state, &k3, dt));
                let combine = |a: &[Vec<f64>], b: &[Vec<f64>], c: &[Vec<f64>], d: &[Vec<f64>]| -> Vec<Vec<f64>> {
                    (0..a.len())
                        .map(|i| {
                            (0..a[i].len())
                                .map(|j| (a[i][j] + 2.0 * b[i][j] + 2.0 * c[i][j] + d[i][j]) / 6.0)
                                .collect()
                        })
                        .collect()
                };
                let rate = combine(&k1, &k2, &k3, &k4);
                let source = combine(&s1, &s2, &s3, &s4);
                Ok((axpy(state, &rate, dt), source))
            }
        }
    }

    pub fn run(
        &self,
        initial: Vec<Vec<f64>>,
        dt: f64,
        steps: usize,
        integrator: Integrator,
    ) -> Result<FieldTrajectory, FieldError> {
        let mut states = Vec::with_capacity(steps + 1);
        let mut sources = Vec::with_capacity(steps);
        states.push(initial);
        for _ in 0..steps {
            let (next, source) = self.step(states.last().unwrap(), dt, integrator)?;
            check_finite("state", &next.concat())?;
            states.push(next);
            sources.push(source);
        }
        Ok(FieldTrajectory {
            dt,
            names: self.names(),
            states,
            sources,
        })
    }
}

/// Linear transaction-expectation coupling for one expectation type, in
/// density units: `F_Q = a_q (Et_Q - Et_Q,ref)`, `Fe_Q = be_q (Q - Q_ref)` and
/// likewise for the value line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearCoupling {
    pub a_q: f64,
    pub a_sv: f64,
    pub be_q: f64,
    pub be_sv: f64,
    #[serde(default)]
    pub ref_q: f64,
    #[serde(default)]
    pub ref_sv: f64,
    #[serde(default)]
    pub ref_et_q: f64,
    #[serde(default)]
    pub ref_et_sv: f64,
}

impl LinearCoupling {
    /// Coupling whose reference levels are the mean levels spread uniformly over the domain.
    pub fn from_params(params: &DisturbanceParams, k: usize, domain_volume: f64) -> Self {
        let t = &params.types[k];
        Self {
            a_q: t.a_q,
            a_sv: t.a_sv,
            be_q: t.be_q,
            be_sv: t.be_sv,
            ref_q: t.q0 / domain_volume,
            ref_sv: t.sv0 / domain_volume,
            ref_et_q: t.et0_q / domain_volume,
            ref_et_sv: t.et0_sv / domain_volume,
        }
    }
}

/// Source closure applied to the transaction, expected-transaction and impulse equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Closure {
    Zero,
    /// Uniform density rates: `trade` for Q and SV, `expected` for Et, `impulse` for P and Pi.
    Constant {
        #[serde(default)]
        trade: f64,
        #[serde(default)]
        expected: f64,
        #[serde(default)]
        impulse: f64,
    },
    /// One coupling per expectation type; impulse equations get zero source.
    Linear { types: Vec<LinearCoupling> },
}

const AXES: [&str; MAX_DIM] = ["x", "y", "z"];

/// Layout of components produced by [`system_from_aggregate`] for each type:
/// `Q, SV, EtQ, EtSV`, then `PQ`, `PSV`, `PiQ`, `PiSV` with one component per axis.
pub fn components_per_type(dim: usize) -> usize {
    4 + 4 * dim
}

fn velocity_or_zero(v: Option<Vector>) -> Vector {
    v.unwrap_or([0.0; MAX_DIM])
}

/// Builds the full per-type field system from aggregated agents.
///
/// Extensive cell values are converted to densities. Velocities are frozen at
/// their aggregated values; empty cells advect nothing. Transaction impulses
/// are carried by `v_kQ`, expected transactions and their impulses by the
/// expectation velocities `Pi / Et`.
pub fn system_from_aggregate(
    grid: &Grid,
    field: &AggregateField,
    closure: &Closure,
) -> Result<(FieldSystem, Vec<Vec<f64>>), FieldError> {
    let n = grid.cell_count();
    check_len("aggregate cells", n, field.cells)?;
    if let Closure::Linear { types } = closure {
        check_len("linear closure types", field.types, types.len())?;
    }
    let dv = grid.cell_volume();
    let dim = grid.dim();
    let per_type = components_per_type(dim);
    let mut components = Vec::new();
    let mut initial = Vec::new();

    for k in 0..field.types {
        let entries: Vec<_> = field.type_slice(k).copied().collect();
        let base = k * per_type;
        let v_q: Vec<Vector> = entries.iter().map(|e| velocity_or_zero(e.velocity_q())).collect();
        let v_sv: Vec<Vector> = entries.iter().map(|e| velocity_or_zero(e.velocity_sv())).collect();
        let u_q: Vec<Vector> = entries
            .iter()
            .map(|e| velocity_or_zero(e.expectation_velocity_q()))
            .collect();
        let u_sv: Vec<Vector> = entries
            .iter()
            .map(|e| velocity_or_zero(e.expectation_velocity_sv()))
            .collect();

        let (trade_src, expected_src, impulse_src) = match closure {
            Closure::Zero => (None, None, Source::Zero),
            Closure::Constant {
                trade,
                expected,
                impulse,
            } => (
                Some([Source::Uniform(*trade), Source::Uniform(*trade)]),
                Some([Source::Uniform(*expected), Source::Uniform(*expected)]),
                Source::Uniform(*impulse),
            ),
            Closure::Linear { types } => {
                let c = types[k];
                let linear = |coefficient: f64, partner: usize, r: f64| Source::Linear {
                    coefficient,
                    partner,
                    reference: vec![r; n],
                };
                (
                    Some([linear(c.a_q, base + 2, c.ref_et_q), linear(c.a_sv, base + 3, c.ref_et_sv)]),
                    Some([linear(c.be_q, base, c.ref_q), linear(c.be_sv, base + 1, c.ref_sv)]),
                    Source::Zero,
                )
            }
        };
        let [src_q, src_sv] = trade_src.unwrap_or([Source::Zero, Source::Zero]);
        let [src_eq, src_esv] = expected_src.unwrap_or([Source::Zero, Source::Zero]);

        let scalar = |name: String, velocity: &Vec<Vector>, source: Source| Component {
            name,
            velocity: velocity.clone(),
            source,
        };
        components.push(scalar(format!("Q_{k}"), &v_q, src_q));
        initial.push(entries.iter().map(|e| e.q / dv).collect());
        components.push(scalar(format!("SV_{k}"), &v_sv, src_sv));
        initial.push(entries.iter().map(|e| e.sv / dv).collect());
        components.push(scalar(format!("EtQ_{k}"), &u_q, src_eq));
        initial.push(entries.iter().map(|e| e.et_q / dv).collect());
        components.push(scalar(format!("EtSV_{k}"), &u_sv, src_esv));
        initial.push(entries.iter().map(|e| e.et_sv / dv).collect());

        type Pick = fn(&crate::aggregate::Extensives) -> Vector;
        let vectors: [(&str, Pick, &Vec<Vector>); 4] = [
            ("PQ", |e| e.p_q, &v_q),
            ("PSV", |e| e.p_sv, &v_q),
            ("PiQ", |e| e.pi_q, &u_q),
            ("PiSV", |e| e.pi_sv, &u_sv),
        ];
        for (label, pick, velocity) in vectors {
            for (axis, axis_name) in AXES.iter().enumerate().take(dim) {
                components.push(scalar(format!("{label}{axis_name}_{k}"), velocity, impulse_src.clone()));
                initial.push(entries.iter().map(|e| pick(e)[axis] / dv).collect());
            }
        }
    }
    Ok((FieldSystem::new(grid.clone(), components)?, initial))
}

/// Spatially uniform transaction and expected-transaction fields whose domain
/// integrals equal the mean-plus-disturbance levels of `state`.
///
/// Components per type: `Q, SV, EtQ, EtSV`, all advected by `velocity` and
/// coupled through the linear closure. Integrating this system over the domain
/// reproduces the disturbance ODEs.
pub fn uniform_coupled_system(
    grid: &Grid,
    params: &DisturbanceParams,
    state: &DisturbanceState,
    velocity: Vec<Vector>,
) -> Result<(FieldSystem, Vec<Vec<f64>>), FieldError> {
    let n = grid.cell_count();
    let vol = grid.domain().volume();
    let mut components = Vec::new();
    let mut initial = Vec::new();
    for (k, (t, s)) in params.types.iter().zip(&state.types).enumerate() {
        let c = LinearCoupling::from_params(params, k, vol);
        let base = 4 * k;
        let linear = |coefficient: f64, partner: usize, r: f64| Source::Linear {
            coefficient,
            partner,
            reference: vec![r; n],
        };
        let lines = [
            (format!("Q_{k}"), linear(c.a_q, base + 2, c.ref_et_q), t.q0 * (1.0 + s.q)),
            (format!("SV_{k}"), linear(c.a_sv, base + 3, c.ref_et_sv), t.sv0 * (1.0 + s.sv)),
            (format!("EtQ_{k}"), linear(c.be_q, base, c.ref_q), t.et0_q * (1.0 + s.et_q)),
            (format!("EtSV_{k}"), linear(c.be_sv, base + 1, c.ref_sv), t.et0_sv * (1.0 + s.et_sv)),
        ];
        for (name, source, total) in lines {
            components.push(Component {
                name,
                velocity: velocity.clone(),
                source,
            });
            initial.push(vec![total / vol; n]);
        }
    }
    Ok((FieldSystem::new(grid.clone(), components)?, initial))
}
