//! Sample moments and histograms for ensemble reports.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::neumaier_sum;

/// Formulas used by [`moments`], copied into every report.
pub const MOMENT_DEFINITIONS: &str = "mean = sum(x)/n; variance = sum((x-mean)^2)/(n-1); \
skewness = m3/m2^(3/2); excess_kurtosis = m4/m2^2 - 3; m_j = sum((x-mean)^j)/n. \
Skewness and kurtosis are null when m2 = 0.";

/// Upper limit on histogram bins.
pub const MAX_BINS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub count: usize,
    pub mean: f64,
    /// Unbiased (n - 1) sample variance.
    pub variance: f64,
    /// `None` when the samples are constant.
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
}

pub fn moments(samples: &[f64]) -> Result<Moments, StatsError> {
    let n = samples.len();
    if n < 2 {
        return Err(StatsError::InsufficientSamples { needed: 2, got: n });
    }
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite(i));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Ok(Moments {
            count: n,
            mean: samples[0],
            variance: 0.0,
            skewness: None,
            excess_kurtosis: None,
        });
    }
    let nf = n as f64;
    let mean = neumaier_sum(samples.iter().copied()) / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in samples {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let variance = m2 / (nf - 1.0);
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        let (p2, p3, p4) = (m2 / nf, m3 / nf, m4 / nf);
        (Some(p3 / p2.powf(1.5)), Some(p4 / (p2 * p2) - 3.0))
    } else {
        (None, None)
    };
    Ok(Moments {
        count: n,
        mean,
        variance,
        skewness,
        excess_kurtosis,
    })
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Binning {
    /// Bin width `2 IQR / n^(1/3)`.
    #[default]
    FreedmanDiaconis,
    Fixed { bins: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` increasing edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn histogram(samples: &[f64], binning: Binning) -> Histogram {
    if samples.is_empty() {
        return Histogram {
            edges: Vec::new(),
            counts: Vec::new(),
        };
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let span = max - min;
    let bins = if span > 0.0 {
        match binning {
            Binning::Fixed { bins } => bins.clamp(1, MAX_BINS),
            Binning::FreedmanDiaconis => {
                let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
                let width = 2.0 * iqr / (sorted.len() as f64).cbrt();
                if width > 0.0 {
                    ((span / width).ceil() as usize).clamp(1, MAX_BINS)
                } else {
                    1
                }
            }
        }
    } else {
        1
    };
    let width = span / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| min + i as f64 * width).collect();
    edges.push(max);
    let mut counts = vec![0u64; bins];
    for &x in &sorted {
        let idx = if width > 0.0 {
            (((x - min) / width).floor() as usize).min(bins - 1)
        } else {
            0
        };
        counts[idx] += 1;
    }
    Histogram { edges, counts }
}
