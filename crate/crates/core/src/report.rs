//! CSV tables for every pipeline output.
//!
//! Each file starts with one `#` metadata line carrying the config hash and
//! seed, followed by a header row. Reals use the shortest representation that
//! parses back to the same value; undefined values are empty fields.

use std::io::{self, Write};

use serde::Serialize;

use crate::aggregate::AggregateField;
use crate::dynamics::DisturbanceState;
use crate::ensemble::DistributionReport;
use crate::espace::Grid;
use crate::fieldsolve::{ComponentBalance, FieldTrajectory};
use crate::pricing::{ExactPrice, PartialSeries, ReturnDecomposition};

/// Provenance stamped on every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Meta {
    pub config_sha256: String,
    pub seed: Option<u64>,
}

impl Meta {
    pub fn comment_line(&self) -> String {
        match self.seed {
            Some(seed) => format!("# config_sha256={} seed={seed}", self.config_sha256),
            None => format!("# config_sha256={} seed=", self.config_sha256),
        }
    }
}

pub fn real(x: f64) -> String {
    format!("{x:?}")
}

pub fn opt_real(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}

/// Writes the metadata line, the header and all rows.
pub fn write_table<W, I>(mut out: W, meta: &Meta, header: &[String], rows: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = Vec<String>>,
{
    writeln!(out, "{}", meta.comment_line())?;
    let mut csv = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    csv.write_record(header)?;
    for row in rows {
        csv.write_record(&row)?;
    }
    csv.flush()
}

fn axis_names(prefix: &str, dim: usize) -> impl Iterator<Item = String> + '_ {
    (0..dim).map(move |i| format!("{prefix}_{i}"))
}

/// One row per `(cell, type)`: cell centre, extensives and derived ratios.
pub fn write_aggregate<W: Write>(out: W, meta: &Meta, grid: &Grid, field: &AggregateField) -> io::Result<()> {
    let dim = field.dim;
    let mut header: Vec<String> = vec!["cell".into(), "k".into()];
    header.extend(axis_names("x", dim));
    header.extend(["q", "sv", "et_q", "et_sv"].map(String::from));
    for p in ["p_q", "p_sv", "pi_q", "pi_sv"] {
        header.extend(axis_names(p, dim));
    }
    header.extend(["price", "ex_q", "ex_sv"].map(String::from));
    header.extend(axis_names("v_q", dim));

    let rows = (0..field.cells).flat_map(|cell| {
        let centre = grid.cell_center(cell);
        (0..field.types).map(move |k| {
            let e = field.get(cell, k);
            let mut row = vec![cell.to_string(), k.to_string()];
            row.extend(centre[..dim].iter().map(|&x| real(x)));
            row.extend([e.q, e.sv, e.et_q, e.et_sv].map(real));
            for v in [e.p_q, e.p_sv, e.pi_q, e.pi_sv] {
                row.extend(v[..dim].iter().map(|&x| real(x)));
            }
            row.extend([e.price(), e.expectation_q(), e.expectation_sv()].map(opt_real));
            match e.velocity_q() {
                Some(v) => row.extend(v[..dim].iter().map(|&x| real(x))),
                None => row.extend((0..dim).map(|_| String::new())),
            }
            row
        })
    });
    write_table(out, meta, &header, rows)
}

/// Long format `step,t,component,cell,value`.
pub fn write_field_trajectory<W: Write>(out: W, meta: &Meta, trajectory: &FieldTrajectory, every: usize) -> io::Result<()> {
    let header = ["step", "t", "component", "cell", "value"].map(String::from);
    let every = every.max(1);
    let last = trajectory.states.len().saturating_sub(1);
    let rows = trajectory
        .states
        .iter()
        .enumerate()
        .filter(|(s, _)| s % every == 0 || *s == last)
        .flat_map(|(s, state)| {
            state.iter().enumerate().flat_map(move |(c, values)| {
                values.iter().enumerate().map(move |(cell, &v)| {
                    vec![
                        s.to_string(),
                        real(s as f64 * trajectory.dt),
                        trajectory.names[c].clone(),
                        cell.to_string(),
                        real(v),
                    ]
                })
            })
        });
    write_table(out, meta, &header, rows)
}

pub fn write_balance<W: Write>(out: W, meta: &Meta, balance: &[ComponentBalance]) -> io::Result<()> {
    let header = [
        "component",
        "initial_integral",
        "final_integral",
        "max_residual",
        "max_relative_residual",
    ]
    .map(String::from);
    let rows = balance.iter().map(|b| {
        vec![
            b.name.clone(),
            real(b.initial_integral),
            real(b.final_integral),
            real(b.max_residual),
            real(b.max_relative_residual),
        ]
    });
    write_table(out, meta, &header, rows)
}

/// One row per `(t, k)`.
pub fn write_dynamics<W: Write>(out: W, meta: &Meta, states: &[DisturbanceState]) -> io::Result<()> {
    let header = ["t", "k", "q", "sv", "et_q", "et_sv"].map(String::from);
    let rows = states.iter().flat_map(|s| {
        s.types.iter().enumerate().map(move |(k, x)| {
            vec![
                real(s.t),
                k.to_string(),
                real(x.q),
                real(x.sv),
                real(x.et_q),
                real(x.et_sv),
            ]
        })
    });
    write_table(out, meta, &header, rows)
}

/// One row per `(t, d, k)`; composite columns repeat across `k`.
pub fn write_decomposition<W: Write>(
    out: W,
    meta: &Meta,
    series: &PartialSeries,
    rows: &[ReturnDecomposition],
    exact: Option<&ExactPrice>,
) -> io::Result<()> {
    let header = [
        "t",
        "d",
        "k",
        "pi",
        "pi_exact",
        "r_direct",
        "r_decomposed",
        "drift",
        "partial_component",
        "volume_component",
        "epsilon_k",
        "eta_k",
        "r_k",
        "w_k",
    ]
    .map(String::from);
    let lines = rows.iter().flat_map(|r| {
        let pi_exact = exact
            .zip(series.index_of(r.t).ok())
            .and_then(|(e, i)| e.disturbance.get(i).copied());
        r.per_type.iter().enumerate().map(move |(k, x)| {
            vec![
                real(r.t),
                real(r.d),
                k.to_string(),
                real(r.pi_now),
                opt_real(pi_exact),
                real(r.r_direct),
                real(r.r_decomposed),
                real(r.drift),
                real(r.partial_component),
                real(r.volume_component),
                real(x.epsilon),
                real(x.eta),
                real(x.r_k),
                real(x.w_k),
            ]
        })
    });
    write_table(out, meta, &header, lines)
}

/// Histograms of every observable as `observable,bin_left,bin_right,count`.
pub fn write_histograms<W: Write>(out: W, meta: &Meta, report: &DistributionReport) -> io::Result<()> {
    let header = ["observable", "bin_left", "bin_right", "count"].map(String::from);
    let rows = report.observables.iter().flat_map(|o| {
        let h = &o.histogram;
        h.counts.iter().enumerate().map(move |(i, c)| {
            vec![o.name.clone(), real(h.edges[i]), real(h.edges[i + 1]), c.to_string()]
        })
    });
    write_table(out, meta, &header, rows)
}

/// Summary statistics of every observable, one row each.
pub fn write_moments<W: Write>(out: W, meta: &Meta, report: &DistributionReport) -> io::Result<()> {
    let header = [
        "observable",
        "count",
        "mean",
        "variance",
        "skewness",
        "excess_kurtosis",
        "min",
        "max",
    ]
    .map(String::from);
    let rows = report.observables.iter().map(|o| {
        let m = o.moments;
        vec![
            o.name.clone(),
            o.count.to_string(),
            opt_real(m.map(|m| m.mean)),
            opt_real(m.map(|m| m.variance)),
            opt_real(m.and_then(|m| m.skewness)),
            opt_real(m.and_then(|m| m.excess_kurtosis)),
            opt_real(o.min),
            opt_real(o.max),
        ]
    });
    write_table(out, meta, &header, rows)
}
