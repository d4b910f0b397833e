//! Agents on a bounded risk-coordinate space, their hydrodynamic aggregation,
//! continuity-equation field dynamics, oscillator disturbances, and the
//! decomposition of price and return by expectation type.

// `!(x > 0.0)` style guards deliberately reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod dynamics;
pub mod ensemble;
pub mod espace;
pub mod fieldsolve;
pub mod numeric;
pub mod pricing;
pub mod report;

pub use aggregate::{aggregate, AggregateError, AggregateField, Extensives, TimeWindow};
pub use dynamics::{
    closed_form_disturbance, integrate_coupled, DisturbanceParams, DisturbanceState, DynamicsError, TypeParams,
    TypeState,
};
pub use ensemble::{run_ensemble, DistributionReport, EnsembleConfig, EnsembleError};
pub use espace::{Agent, DomainError, EconomicDomain, ExpectationPair, Grid, GridSpec, TransactionPair, Vector};
pub use fieldsolve::{Closure, FieldError, FieldSystem, FieldTrajectory, Integrator};
pub use pricing::{PartialSeries, PricingError, ReturnDecomposition, TrendParams, Weights};
