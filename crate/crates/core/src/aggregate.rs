//! Coarse-graining of agents into per-cell, per-type extensive fields.
//!
//! Every entry of an [`AggregateField`] is a windowed sum over the agents in a
//! cell. Intensive quantities (velocities, expectations, prices) are derived
//! from those sums on demand and are `None` when the denominator vanishes.

use std::ops::{Add, AddAssign};

use serde::Serialize;
use thiserror::Error;

use crate::espace::{Agent, DomainError, Grid, Vector, MAX_DIM};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AggregateError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("window span {span} is not a positive integer multiple of sample step {step}")]
    InvalidWindow { span: f64, step: f64 },
    #[error("window needs {expected} snapshots, got {got}")]
    SnapshotCount { expected: usize, got: usize },
}

/// Forward averaging window `[t, t + span)` sampled every `sample_step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub span: f64,
    pub sample_step: f64,
}

impl TimeWindow {
    pub fn new(span: f64, sample_step: f64) -> Result<Self, AggregateError> {
        let window = Self { span, sample_step };
        window.steps()?;
        Ok(window)
    }

    /// A window covering exactly one sample.
    pub fn single(sample_step: f64) -> Self {
        Self {
            span: sample_step,
            sample_step,
        }
    }

    /// Number of samples in the window.
    pub fn steps(&self) -> Result<usize, AggregateError> {
        let invalid = AggregateError::InvalidWindow {
            span: self.span,
            step: self.sample_step,
        };
        if !(self.span > 0.0 && self.sample_step > 0.0) || !self.span.is_finite() {
            return Err(invalid);
        }
        let ratio = self.span / self.sample_step;
        let rounded = ratio.round();
        if rounded < 1.0 || (ratio - rounded).abs() > 1e-9 * rounded {
            return Err(invalid);
        }
        Ok(rounded as usize)
    }
}

/// Extensive quantities of one cell and expectation type.
///
/// `p_*` are transaction impulses (`Q v`, `SV v`), `et_*` expected
/// transactions (`ex Q`, `ex SV`) and `pi_*` their impulses (`ex Q v`, `ex SV v`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Extensives {
    pub q: f64,
    pub sv: f64,
    pub p_q: Vector,
    pub p_sv: Vector,
    pub et_q: f64,
    pub et_sv: f64,
    pub pi_q: Vector,
    pub pi_sv: Vector,
}

fn scaled(v: Vector, s: f64) -> Vector {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn ratio(v: Vector, d: f64) -> Option<Vector> {
    (d != 0.0).then(|| [v[0] / d, v[1] / d, v[2] / d])
}

impl Extensives {
    /// Contribution of one agent under type `k`.
    pub fn of_agent(agent: &Agent, k: usize) -> Self {
        let trade = agent.trades[k];
        let ex = agent.expectations[k];
        let v = agent.velocity();
        let et_q = ex.q * trade.q;
        let et_sv = ex.sv * trade.sv;
        Self {
            q: trade.q,
            sv: trade.sv,
            p_q: scaled(v, trade.q),
            p_sv: scaled(v, trade.sv),
            et_q,
            et_sv,
            pi_q: scaled(v, et_q),
            pi_sv: scaled(v, et_sv),
        }
    }

    pub fn transactions_only(self) -> Self {
        Self {
            q: self.q,
            sv: self.sv,
            ..Self::default()
        }
    }

    pub fn impulses_only(self) -> Self {
        Self {
            q: self.q,
            sv: self.sv,
            p_q: self.p_q,
            p_sv: self.p_sv,
            ..Self::default()
        }
    }

    pub fn expected_only(self) -> Self {
        Self {
            q: self.q,
            sv: self.sv,
            et_q: self.et_q,
            et_sv: self.et_sv,
            pi_q: self.pi_q,
            pi_sv: self.pi_sv,
            ..Self::default()
        }
    }

    pub fn scale(self, s: f64) -> Self {
        Self {
            q: self.q * s,
            sv: self.sv * s,
            p_q: scaled(self.p_q, s),
            p_sv: scaled(self.p_sv, s),
            et_q: self.et_q * s,
            et_sv: self.et_sv * s,
            pi_q: scaled(self.pi_q, s),
            pi_sv: scaled(self.pi_sv, s),
        }
    }

    /// `v_Q = P_Q / Q`.
    pub fn velocity_q(&self) -> Option<Vector> {
        ratio(self.p_q, self.q)
    }

    /// `v_SV = P_SV / SV`.
    pub fn velocity_sv(&self) -> Option<Vector> {
        ratio(self.p_sv, self.sv)
    }

    /// `Ex_Q = Et_Q / Q`.
    pub fn expectation_q(&self) -> Option<f64> {
        (self.q != 0.0).then(|| self.et_q / self.q)
    }

    /// `Ex_SV = Et_SV / SV`.
    pub fn expectation_sv(&self) -> Option<f64> {
        (self.sv != 0.0).then(|| self.et_sv / self.sv)
    }

    /// Velocity of expected volume, `Pi_Q / Et_Q`.
    pub fn expectation_velocity_q(&self) -> Option<Vector> {
        ratio(self.pi_q, self.et_q)
    }

    pub fn expectation_velocity_sv(&self) -> Option<Vector> {
        ratio(self.pi_sv, self.et_sv)
    }

    /// `p = SV / Q`.
    pub fn price(&self) -> Option<f64> {
        (self.q != 0.0).then(|| self.sv / self.q)
    }
}

fn add_vec(a: &mut Vector, b: &Vector) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl AddAssign for Extensives {
    fn add_assign(&mut self, rhs: Self) {
        self.q += rhs.q;
        self.sv += rhs.sv;
        add_vec(&mut self.p_q, &rhs.p_q);
        add_vec(&mut self.p_sv, &rhs.p_sv);
        self.et_q += rhs.et_q;
        self.et_sv += rhs.et_sv;
        add_vec(&mut self.pi_q, &rhs.pi_q);
        add_vec(&mut self.pi_sv, &rhs.pi_sv);
    }
}

impl Add for Extensives {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl std::iter::Sum for Extensives {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Per-cell, per-type windowed aggregates. Entry `(cell, k)` lives at `cell * types + k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateField {
    pub dim: usize,
    pub cells: usize,
    pub types: usize,
    /// Start of the forward window.
    pub t_start: f64,
    pub entries: Vec<Extensives>,
}

impl AggregateField {
    pub fn zeros(grid: &Grid, types: usize, t_start: f64) -> Self {
        Self {
            dim: grid.dim(),
            cells: grid.cell_count(),
            types,
            t_start,
            entries: vec![Extensives::default(); grid.cell_count() * types],
        }
    }

    pub fn get(&self, cell: usize, k: usize) -> &Extensives {
        &self.entries[cell * self.types + k]
    }

    /// All cells for one type, in cell order.
    pub fn type_slice(&self, k: usize) -> impl Iterator<Item = &Extensives> + '_ {
        self.entries.iter().skip(k).step_by(self.types)
    }
}

fn accumulate(
    snapshots: &[Vec<Agent>],
    grid: &Grid,
    window: &TimeWindow,
    types: usize,
    t_start: f64,
    project: fn(Extensives) -> Extensives,
) -> Result<AggregateField, AggregateError> {
    let steps = window.steps()?;
    if snapshots.len() != steps {
        return Err(AggregateError::SnapshotCount {
            expected: steps,
            got: snapshots.len(),
        });
    }

    // (agent id, step) order makes the floating-point sums reproducible.
    let mut contributions = Vec::new();
    for (step, snapshot) in snapshots.iter().enumerate() {
        for agent in snapshot {
            agent.validate(grid.domain(), types)?;
            contributions.push((agent.id, step, grid.cell_of(&agent.x)?, agent));
        }
    }
    contributions.sort_by_key(|&(id, step, _, _)| (id, step));

    let mut field = AggregateField::zeros(grid, types, t_start);
    for (_, _, cell, agent) in contributions {
        for k in 0..types {
            field.entries[cell * types + k] += project(Extensives::of_agent(agent, k));
        }
    }
    let inv = 1.0 / steps as f64;
    if steps > 1 {
        for e in &mut field.entries {
            *e = e.scale(inv);
        }
    }
    Ok(field)
}

/// Windowed per-cell sums of every extensive quantity.
///
/// `snapshots` holds the agent population at each sample of the window,
/// starting at `t_start`.
pub fn aggregate(
    snapshots: &[Vec<Agent>],
    grid: &Grid,
    window: &TimeWindow,
    types: usize,
    t_start: f64,
) -> Result<AggregateField, AggregateError> {
    accumulate(snapshots, grid, window, types, t_start, |e| e)
}

/// Windowed `Q_k` and `SV_k` only; other entries stay zero.
pub fn aggregate_transactions(
    snapshots: &[Vec<Agent>],
    grid: &Grid,
    window: &TimeWindow,
    types: usize,
    t_start: f64,
) -> Result<AggregateField, AggregateError> {
    accumulate(snapshots, grid, window, types, t_start, Extensives::transactions_only)
}

/// Windowed transactions and their impulses `P_kQ`, `P_kSV`.
pub fn aggregate_impulses(
    snapshots: &[Vec<Agent>],
    grid: &Grid,
    window: &TimeWindow,
    types: usize,
    t_start: f64,
) -> Result<AggregateField, AggregateError> {
    accumulate(snapshots, grid, window, types, t_start, Extensives::impulses_only)
}

/// Windowed transactions, expected transactions and expectation impulses.
pub fn aggregate_expected(
    snapshots: &[Vec<Agent>],
    grid: &Grid,
    window: &TimeWindow,
    types: usize,
    t_start: f64,
) -> Result<AggregateField, AggregateError> {
    accumulate(snapshots, grid, window, types, t_start, Extensives::expected_only)
}

/// Splits a trajectory into consecutive non-overlapping windows and aggregates
/// each. A trailing partial window is dropped.
pub fn aggregate_windows(
    trajectory: &[Vec<Agent>],
    grid: &Grid,
    window: &TimeWindow,
    types: usize,
    t0: f64,
) -> Result<Vec<AggregateField>, AggregateError> {
    let steps = window.steps()?;
    trajectory
        .chunks_exact(steps)
        .enumerate()
        .map(|(i, chunk)| {
            aggregate(chunk, grid, window, types, t0 + i as f64 * window.span)
        })
        .collect()
}

/// Sums over expectation types, one entry per cell.
pub fn totals_over_types(field: &AggregateField) -> Vec<Extensives> {
    field
        .entries
        .chunks_exact(field.types)
        .map(|per_type| per_type.iter().copied().sum())
        .collect()
}

/// Domain totals per expectation type.
pub fn integrate_domain(field: &AggregateField) -> Vec<Extensives> {
    (0..field.types)
        .map(|k| field.type_slice(k).copied().sum())
        .collect()
}

/// Domain total of a per-cell field such as the output of [`totals_over_types`].
pub fn integrate_cells(cells: &[Extensives]) -> Extensives {
    cells.iter().copied().sum()
}

/// Component-wise maximum absolute difference, used by tests and audits.
pub fn max_abs_diff(a: &Extensives, b: &Extensives) -> f64 {
    let scalars = [
        a.q - b.q,
        a.sv - b.sv,
        a.et_q - b.et_q,
        a.et_sv - b.et_sv,
    ];
    let mut m = scalars.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    for (x, y) in [
        (&a.p_q, &b.p_q),
        (&a.p_sv, &b.p_sv),
        (&a.pi_q, &b.pi_q),
        (&a.pi_sv, &b.pi_sv),
    ] {
        for i in 0..MAX_DIM {
            m = m.max((x[i] - y[i]).abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::espace::{ExpectationPair, TransactionPair};
    use proptest::prelude::*;

    fn agent(id: u64, x: f64, v: f64, q: f64, ex: f64) -> Agent {
        Agent {
            id,
            x: vec![x],
            v: vec![v],
            trades: vec![TransactionPair::new(q, 2.0 * q)],
            expectations: vec![ExpectationPair { q: ex, sv: ex }],
        }
    }

    fn one_step(agents: Vec<Agent>) -> AggregateField {
        let grid = Grid::line(1.0, 10).unwrap();
        aggregate(&[agents], &grid, &TimeWindow::single(1.0), 1, 0.0).unwrap()
    }

    #[test]
    fn window_validation() {
        assert_eq!(TimeWindow::new(2.0, 1.0).unwrap().steps().unwrap(), 2);
        assert_eq!(TimeWindow::new(0.3, 0.1).unwrap().steps().unwrap(), 3);
        assert!(TimeWindow::new(1.5, 1.0).is_err());
        assert!(TimeWindow::new(0.0, 1.0).is_err());
        assert!(TimeWindow::new(0.5, 1.0).is_err());
    }

    #[test]
    fn transactions_sum_within_cell() {
        let f = one_step(vec![
            agent(1, 0.31, 0.0, 1.0, 1.0),
            agent(2, 0.32, 0.0, 2.0, 1.0),
            agent(3, 0.33, 0.0, 3.0, 1.0),
        ]);
        assert_eq!(f.get(3, 0).q, 6.0);
        assert_eq!(f.get(3, 0).sv, 12.0);
        assert_eq!(f.get(0, 0).q, 0.0);
        assert_eq!(f.get(0, 0).sv, 0.0);
        assert_eq!(f.get(0, 0).price(), None);
    }

    #[test]
    fn forward_window_averages_steps() {
        let grid = Grid::line(1.0, 10).unwrap();
        let first = vec![agent(1, 0.5, 0.0, 6.0, 1.0)];
        let second = vec![agent(1, 0.5, 0.0, 10.0, 1.0)];
        let window = TimeWindow::new(2.0, 1.0).unwrap();
        let f = aggregate(&[first, second], &grid, &window, 1, 0.0).unwrap();
        assert_eq!(f.get(5, 0).q, 8.0);

        let err = aggregate(&[vec![]], &grid, &window, 1, 0.0).unwrap_err();
        assert_eq!(err, AggregateError::SnapshotCount { expected: 2, got: 1 });
    }

    #[test]
    fn impulse_examples() {
        let f = one_step(vec![agent(1, 0.5, 1.0, 10.0, 1.0), agent(2, 0.5, 3.0, 30.0, 1.0)]);
        let e = f.get(5, 0);
        assert_eq!(e.p_q[0], 100.0);
        assert_eq!(e.velocity_q().unwrap()[0], 2.5);

        let f = one_step(vec![agent(1, 0.5, 0.0, 10.0, 1.0)]);
        assert_eq!(f.get(5, 0).p_q[0], 0.0);
        assert_eq!(f.get(5, 0).velocity_q().unwrap()[0], 0.0);
        assert_eq!(f.get(4, 0).velocity_q(), None);
    }

    #[test]
    fn expected_examples() {
        let f = one_step(vec![agent(1, 0.5, 1.0, 10.0, 2.0), agent(2, 0.5, 3.0, 30.0, 4.0)]);
        let e = f.get(5, 0);
        assert_eq!(e.et_q, 140.0);
        assert_eq!(e.expectation_q(), Some(3.5));
        // 2*10*1 + 4*30*3
        assert_eq!(e.pi_q[0], 380.0);

        let f = one_step(vec![agent(1, 0.5, 1.0, 10.0, 1.0), agent(2, 0.5, 3.0, 30.0, 1.0)]);
        assert_eq!(f.get(5, 0).et_q, f.get(5, 0).q);
        assert_eq!(f.get(5, 0).expectation_q(), Some(1.0));
    }

    #[test]
    fn partial_aggregations_fill_their_entries() {
        let grid = Grid::line(1.0, 10).unwrap();
        let snaps = vec![vec![agent(1, 0.5, 1.0, 10.0, 2.0)]];
        let w = TimeWindow::single(1.0);
        let t = aggregate_transactions(&snaps, &grid, &w, 1, 0.0).unwrap();
        assert_eq!((t.get(5, 0).q, t.get(5, 0).p_q[0], t.get(5, 0).et_q), (10.0, 0.0, 0.0));
        let i = aggregate_impulses(&snaps, &grid, &w, 1, 0.0).unwrap();
        assert_eq!((i.get(5, 0).p_q[0], i.get(5, 0).et_q), (10.0, 0.0));
        let e = aggregate_expected(&snaps, &grid, &w, 1, 0.0).unwrap();
        assert_eq!((e.get(5, 0).p_q[0], e.get(5, 0).et_q, e.get(5, 0).pi_q[0]), (0.0, 20.0, 20.0));
    }

    #[test]
    fn totals_examples() {
        let grid = Grid::line(1.0, 1).unwrap();
        let mk = |q: [f64; 2], sv: [f64; 2]| Agent {
            id: 0,
            x: vec![0.5],
            v: vec![0.0],
            trades: vec![TransactionPair::new(q[0], sv[0]), TransactionPair::new(q[1], sv[1])],
            expectations: vec![ExpectationPair::default(); 2],
        };
        let f = aggregate(&[vec![mk([60.0, 40.0], [120.0, 180.0])]], &grid, &TimeWindow::single(1.0), 2, 0.0)
            .unwrap();
        let totals = totals_over_types(&f);
        assert_eq!(totals[0].q, 100.0);
        assert_eq!(totals[0].price(), Some(3.0));

        let single = one_step(vec![agent(1, 0.5, 1.0, 10.0, 2.0)]);
        assert_eq!(totals_over_types(&single)[5], *single.get(5, 0));
    }

    #[test]
    fn integrate_examples() {
        let grid = Grid::line(1.0, 10).unwrap();
        let agents: Vec<Agent> = (0..10)
            .map(|c| agent(c, (c as f64 + 0.5) / 10.0, 0.0, 5.0, 1.0))
            .collect();
        let f = aggregate(&[agents], &grid, &TimeWindow::single(1.0), 1, 0.0).unwrap();
        assert!(f.type_slice(0).all(|e| e.q == 5.0));
        assert_eq!(integrate_domain(&f)[0].q, 50.0);

        let empty = aggregate(&[vec![]], &grid, &TimeWindow::single(1.0), 1, 0.0).unwrap();
        assert_eq!(integrate_domain(&empty)[0], Extensives::default());
    }

    #[test]
    fn windows_do_not_overlap() {
        let grid = Grid::line(1.0, 2).unwrap();
        let traj: Vec<Vec<Agent>> = (0..5)
            .map(|s| vec![agent(1, 0.25, 0.0, s as f64 + 1.0, 1.0)])
            .collect();
        let w = TimeWindow::new(2.0, 1.0).unwrap();
        let fields = aggregate_windows(&traj, &grid, &w, 1, 0.0).unwrap();
        assert_eq!(fields.len(), 2);
        assert_eq!(fields[0].get(0, 0).q, 1.5);
        assert_eq!(fields[1].get(0, 0).q, 3.5);
        assert_eq!(fields[1].t_start, 2.0);
    }

    fn arb_agents() -> impl Strategy<Value = Vec<Agent>> {
        prop::collection::vec(
            (0.0f64..=1.0, -2.0f64..2.0, 0.0f64..50.0, 0.0f64..50.0, -3.0f64..3.0),
            1..60,
        )
        .prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (x, v, q, sv, ex))| Agent {
                    id: i as u64,
                    x: vec![x],
                    v: vec![v],
                    trades: vec![TransactionPair::new(q, sv)],
                    expectations: vec![ExpectationPair { q: ex, sv: -ex }],
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn regrouping_preserves_impulses(agents in arb_agents(), split in 0usize..60) {
            let grid = Grid::line(1.0, 4).unwrap();
            let w = TimeWindow::single(1.0);
            let split = split.min(agents.len());
            let whole = aggregate(std::slice::from_ref(&agents), &grid, &w, 1, 0.0).unwrap();
            let a = aggregate(&[agents[..split].to_vec()], &grid, &w, 1, 0.0).unwrap();
            let b = aggregate(&[agents[split..].to_vec()], &grid, &w, 1, 0.0).unwrap();
            for c in 0..grid.cell_count() {
                let merged = *a.get(c, 0) + *b.get(c, 0);
                let scale: f64 = agents.iter().map(|ag| ag.trades[0].q * (1.0 + ag.v[0].abs()) * 4.0).sum::<f64>() + 1.0;
                prop_assert!(max_abs_diff(&merged, whole.get(c, 0)) <= 1e-12 * scale);
            }
        }

        #[test]
        fn velocity_is_convex_combination(agents in arb_agents()) {
            let grid = Grid::line(1.0, 3).unwrap();
            let f = aggregate(std::slice::from_ref(&agents), &grid, &TimeWindow::single(1.0), 1, 0.0).unwrap();
            for c in 0..grid.cell_count() {
                let members: Vec<&Agent> = agents
                    .iter()
                    .filter(|a| grid.cell_of(&a.x).unwrap() == c && a.trades[0].q > 0.0)
                    .collect();
                if let Some(v) = f.get(c, 0).velocity_q() {
                    let lo = members.iter().map(|a| a.v[0]).fold(f64::INFINITY, f64::min);
                    let hi = members.iter().map(|a| a.v[0]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v[0] >= lo - 1e-12 && v[0] <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn expectation_identity_holds(agents in arb_agents()) {
            let grid = Grid::line(1.0, 3).unwrap();
            let f = aggregate(&[agents], &grid, &TimeWindow::single(1.0), 1, 0.0).unwrap();
            for e in &f.entries {
                if let Some(ex) = e.expectation_q() {
                    prop_assert!((ex * e.q - e.et_q).abs() <= 1e-12 * e.et_q.abs().max(1e-300) + 1e-300);
                }
            }
        }
    }
}
