//! Bounded economic domain, its cell grid, and the agent population.
//!
//! Axes are risk grades. Each axis runs from 0 (safest) to an upper bound
//! `X_i` (most risky grade), and no agent may sit outside the box.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest supported number of risk axes.
pub const MAX_DIM: usize = 3;

/// A coordinate or velocity vector. Components beyond the domain dimension are 0.
pub type Vector = [f64; MAX_DIM];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("dimension {0} out of range (1..={MAX_DIM})")]
    DimensionOutOfRange(usize),
    #[error("axis {axis}: bound {value} must be positive and finite")]
    NonPositiveBound { axis: usize, value: f64 },
    #[error("axis {axis}: grid has zero cells")]
    ZeroCells { axis: usize },
    #[error("grid has {grid} axes but domain has {domain}")]
    AxisMismatch { domain: usize, grid: usize },
    #[error("axis {axis}: coordinate {value} outside [0, {bound}]")]
    OutsideDomain { axis: usize, value: f64, bound: f64 },
    #[error("agent {id}: {reason}")]
    InvalidAgent { id: u64, reason: String },
}

/// The box `0 <= x_i <= X_i`, one bound per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomicDomain {
    pub bounds: Vec<f64>,
}

impl EconomicDomain {
    pub fn new(bounds: Vec<f64>) -> Result<Self, DomainError> {
        let domain = Self { bounds };
        domain.validate()?;
        Ok(domain)
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let n = self.bounds.len();
        if !(1..=MAX_DIM).contains(&n) {
            return Err(DomainError::DimensionOutOfRange(n));
        }
        for (axis, &value) in self.bounds.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(DomainError::NonPositiveBound { axis, value });
            }
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.bounds.iter().product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.bounds
            .iter()
            .zip(x)
            .all(|(&b, &xi)| (0.0..=b).contains(&xi))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub cells_per_axis: Vec<usize>,
}

/// Checks the domain and grid invariants together.
pub fn validate_domain(domain: &EconomicDomain, grid: &GridSpec) -> Result<(), DomainError> {
    domain.validate()?;
    if grid.cells_per_axis.len() != domain.dim() {
        return Err(DomainError::AxisMismatch {
            domain: domain.dim(),
            grid: grid.cells_per_axis.len(),
        });
    }
    if let Some(axis) = grid.cells_per_axis.iter().position(|&c| c == 0) {
        return Err(DomainError::ZeroCells { axis });
    }
    Ok(())
}

/// A validated domain together with its uniform cell partition.
///
/// Cells are numbered in row-major order with the last axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    domain: EconomicDomain,
    cells: Vec<usize>,
    extent: Vec<f64>,
}

impl Grid {
    pub fn new(domain: EconomicDomain, spec: &GridSpec) -> Result<Self, DomainError> {
        validate_domain(&domain, spec)?;
        let extent = domain
            .bounds
            .iter()
            .zip(&spec.cells_per_axis)
            .map(|(&b, &c)| b / c as f64)
            .collect();
        Ok(Self {
            domain,
            cells: spec.cells_per_axis.clone(),
            extent,
        })
    }

    /// Convenience for a 1-D grid on `[0, bound]`.
    pub fn line(bound: f64, cells: usize) -> Result<Self, DomainError> {
        Self::new(
            EconomicDomain::new(vec![bound])?,
            &GridSpec {
                cells_per_axis: vec![cells],
            },
        )
    }

    pub fn domain(&self) -> &EconomicDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn cells_per_axis(&self) -> &[usize] {
        &self.cells
    }

    /// Cell width `dV_i` along each axis.
    pub fn cell_extent(&self) -> &[f64] {
        &self.extent
    }

    pub fn cell_volume(&self) -> f64 {
        self.extent.iter().product()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.iter().product()
    }

    /// Row-major linear index of a multi-index.
    pub fn linear(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.cells)
            .fold(0, |acc, (&c, &n)| acc * n + c)
    }

    pub fn multi_index(&self, mut linear: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for axis in (0..self.dim()).rev() {
            out[axis] = linear % self.cells[axis];
            linear /= self.cells[axis];
        }
        out
    }

    /// Center coordinate of a cell.
    pub fn cell_center(&self, linear: usize) -> Vector {
        let mut x = [0.0; MAX_DIM];
        for (axis, c) in self.multi_index(linear).into_iter().enumerate() {
            x[axis] = (c as f64 + 0.5) * self.extent[axis];
        }
        x
    }

    /// Multi-index of the cell containing `x`, with `x_i = X_i` assigned to the last cell.
    pub fn cell_index(&self, x: &[f64]) -> Result<Vec<usize>, DomainError> {
        let mut out = Vec::with_capacity(self.dim());
        for axis in 0..self.dim() {
            let value = x.get(axis).copied().unwrap_or(f64::NAN);
            let bound = self.domain.bounds[axis];
            if !(0.0..=bound).contains(&value) {
                return Err(DomainError::OutsideDomain { axis, value, bound });
            }
            let raw = (value / self.extent[axis]).floor() as usize;
            out.push(raw.min(self.cells[axis] - 1));
        }
        Ok(out)
    }

    pub fn cell_of(&self, x: &[f64]) -> Result<usize, DomainError> {
        Ok(self.linear(&self.cell_index(x)?))
    }
}

/// Trade volume `q` (asset units) and trade value `sv` (currency units).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransactionPair {
    pub q: f64,
    pub sv: f64,
}

impl TransactionPair {
    pub fn new(q: f64, sv: f64) -> Self {
        Self { q, sv }
    }

    pub fn is_valid(&self) -> bool {
        self.q >= 0.0 && self.sv >= 0.0 && self.q.is_finite() && self.sv.is_finite()
    }
}

impl Add for TransactionPair {
    type Output = Self;

    fn add(self, rhs: Self) -> Self {
        Self {
            q: self.q + rhs.q,
            sv: self.sv + rhs.sv,
        }
    }
}

impl AddAssign for TransactionPair {
    fn add_assign(&mut self, rhs: Self) {
        self.q += rhs.q;
        self.sv += rhs.sv;
    }
}

impl std::iter::Sum for TransactionPair {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Dimensionless expectation levels attached to an agent's volume and value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectationPair {
    pub q: f64,
    pub sv: f64,
}

impl Default for ExpectationPair {
    fn default() -> Self {
        Self { q: 1.0, sv: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Agent {
    pub id: u64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    /// One pair per expectation type.
    pub trades: Vec<TransactionPair>,
    /// One pair per expectation type.
    pub expectations: Vec<ExpectationPair>,
}

impl Agent {
    pub fn position(&self) -> Vector {
        pad(&self.x)
    }

    pub fn velocity(&self) -> Vector {
        pad(&self.v)
    }

    pub fn types(&self) -> usize {
        self.trades.len()
    }

    /// Checks coordinates, per-type lengths and non-negative trades.
    pub fn validate(&self, domain: &EconomicDomain, types: usize) -> Result<(), DomainError> {
        let invalid = |reason: String| DomainError::InvalidAgent {
            id: self.id,
            reason,
        };
        if self.x.len() != domain.dim() || self.v.len() != domain.dim() {
            return Err(invalid(format!(
                "position/velocity must have {} components",
                domain.dim()
            )));
        }
        for (axis, (&value, &bound)) in self.x.iter().zip(&domain.bounds).enumerate() {
            if !(0.0..=bound).contains(&value) {
                return Err(DomainError::OutsideDomain { axis, value, bound });
            }
        }
        if self.v.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite velocity".into()));
        }
        if self.trades.len() != types || self.expectations.len() != types {
            return Err(invalid(format!("expected {types} expectation types")));
        }
        if let Some(k) = self.trades.iter().position(|t| !t.is_valid()) {
            return Err(invalid(format!("type {k}: trades must be non-negative")));
        }
        if self
            .expectations
            .iter()
            .any(|e| !e.q.is_finite() || !e.sv.is_finite())
        {
            return Err(invalid("non-finite expectation".into()));
        }
        Ok(())
    }
}

fn pad(v: &[f64]) -> Vector {
    let mut out = [0.0; MAX_DIM];
    for (o, &x) in out.iter_mut().zip(v) {
        *o = x;
    }
    out
}

/// Moves every agent by `v * dt`.
///
/// A component that would leave the domain is clamped to the boundary and its
/// velocity component is zeroed.
pub fn advance_agents(agents: &[Agent], domain: &EconomicDomain, dt: f64) -> Vec<Agent> {
    let mut out = agents.to_vec();
    advance_agents_in_place(&mut out, domain, dt);
    out
}

pub fn advance_agents_in_place(agents: &mut [Agent], domain: &EconomicDomain, dt: f64) {
    for agent in agents {
        for ((x, v), &bound) in agent.x.iter_mut().zip(agent.v.iter_mut()).zip(&domain.bounds) {
            let next = *x + *v * dt;
            if next < 0.0 {
                *x = 0.0;
                *v = 0.0;
            } else if next > bound {
                *x = bound;
                *v = 0.0;
            } else {
                *x = next;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn agent(x: f64, v: f64) -> Agent {
        Agent {
            id: 0,
            x: vec![x],
            v: vec![v],
            trades: vec![TransactionPair::new(1.0, 1.0)],
            expectations: vec![ExpectationPair::default()],
        }
    }

    #[test]
    fn validate_domain_cases() {
        let ok = EconomicDomain { bounds: vec![1.0] };
        let grid = GridSpec {
            cells_per_axis: vec![10],
        };
        assert!(validate_domain(&ok, &grid).is_ok());

        let four = EconomicDomain {
            bounds: vec![1.0; 4],
        };
        let grid4 = GridSpec {
            cells_per_axis: vec![2; 4],
        };
        assert_eq!(
            validate_domain(&four, &grid4),
            Err(DomainError::DimensionOutOfRange(4))
        );

        let zero = EconomicDomain { bounds: vec![0.0] };
        assert!(matches!(
            validate_domain(&zero, &grid),
            Err(DomainError::NonPositiveBound { axis: 0, .. })
        ));

        let no_cells = GridSpec {
            cells_per_axis: vec![0],
        };
        assert_eq!(
            validate_domain(&ok, &no_cells),
            Err(DomainError::ZeroCells { axis: 0 })
        );
    }

    #[test]
    fn cell_index_examples() {
        let grid = Grid::line(1.0, 10).unwrap();
        assert_eq!(grid.cell_index(&[0.25]).unwrap(), vec![2]);
        assert_eq!(grid.cell_index(&[1.0]).unwrap(), vec![9]);
        assert_eq!(grid.cell_index(&[0.0]).unwrap(), vec![0]);
        assert!(matches!(
            grid.cell_index(&[1.5]),
            Err(DomainError::OutsideDomain { axis: 0, .. })
        ));
        assert!(grid.cell_index(&[-0.1]).is_err());
    }

    #[test]
    fn linear_index_roundtrip_3d() {
        let grid = Grid::new(
            EconomicDomain::new(vec![1.0, 2.0, 3.0]).unwrap(),
            &GridSpec {
                cells_per_axis: vec![2, 3, 4],
            },
        )
        .unwrap();
        assert_eq!(grid.cell_count(), 24);
        for c in 0..grid.cell_count() {
            assert_eq!(grid.linear(&grid.multi_index(c)), c);
            assert_eq!(grid.cell_of(&grid.cell_center(c)).unwrap(), c);
        }
        assert!((grid.cell_volume() - 0.5 * (2.0 / 3.0) * 0.75).abs() < 1e-15);
    }

    #[test]
    fn advance_examples() {
        let domain = EconomicDomain::new(vec![1.0]).unwrap();
        let moved = advance_agents(&[agent(0.5, 0.1)], &domain, 1.0);
        assert!((moved[0].x[0] - 0.6).abs() < 1e-15);
        assert_eq!(moved[0].v[0], 0.1);

        let clamped = advance_agents(&[agent(0.95, 0.1)], &domain, 1.0);
        assert_eq!(clamped[0].x[0], 1.0);
        assert_eq!(clamped[0].v[0], 0.0);

        let still = advance_agents(&[agent(0.5, 0.0)], &domain, 1.0);
        assert_eq!(still[0].x[0], 0.5);

        let low = advance_agents(&[agent(0.05, -0.1)], &domain, 1.0);
        assert_eq!((low[0].x[0], low[0].v[0]), (0.0, 0.0));
    }

    #[test]
    fn agent_validation() {
        let domain = EconomicDomain::new(vec![1.0]).unwrap();
        assert!(agent(0.5, 0.0).validate(&domain, 1).is_ok());
        assert!(agent(0.5, 0.0).validate(&domain, 2).is_err());
        let mut neg = agent(0.5, 0.0);
        neg.trades[0].q = -1.0;
        assert!(neg.validate(&domain, 1).is_err());
        assert!(agent(1.5, 0.0).validate(&domain, 1).is_err());
    }

    proptest! {
        #[test]
        fn agents_never_leave_domain(
            start in prop::collection::vec((0.0f64..=2.0, 0.0f64..=3.0), 1..20),
            vels in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
            dt in 0.01f64..2.0,
            steps in 1usize..30,
        ) {
            let domain = EconomicDomain::new(vec![2.0, 3.0]).unwrap();
            let mut agents: Vec<Agent> = start
                .iter()
                .zip(vels.iter().cycle())
                .enumerate()
                .map(|(i, (&(x0, x1), &(v0, v1)))| Agent {
                    id: i as u64,
                    x: vec![x0, x1],
                    v: vec![v0, v1],
                    trades: vec![],
                    expectations: vec![],
                })
                .collect();
            for _ in 0..steps {
                agents = advance_agents(&agents, &domain, dt);
                for a in &agents {
                    prop_assert!(domain.contains(&a.x));
                }
            }
        }

        #[test]
        fn cell_index_is_total_and_in_range(x in 0.0f64..=1.7, cells in 1usize..50) {
            let grid = Grid::line(1.7, cells).unwrap();
            let c = grid.cell_index(&[x]).unwrap()[0];
            prop_assert!(c < cells);
            let lo = c as f64 * grid.cell_extent()[0];
            // floor may land one cell low through rounding of x / dV, never high
            prop_assert!(x >= lo - 1e-12);
        }

        #[test]
        fn transaction_pairs_sum_associatively(
            pairs in prop::collection::vec((0u32..1000, 0u32..1000), 1..40),
            split in 0usize..40,
        ) {
            // integer-valued reals keep the sums exact
            let pairs: Vec<TransactionPair> = pairs
                .into_iter()
                .map(|(q, sv)| TransactionPair::new(q as f64, sv as f64))
                .collect();
            let split = split.min(pairs.len());
            let whole: TransactionPair = pairs.iter().copied().sum();
            let left: TransactionPair = pairs[..split].iter().copied().sum();
            let right: TransactionPair = pairs[split..].iter().copied().sum();
            prop_assert_eq!(whole, left + right);
        }
    }
}
