//! Price and return decomposition by expectation type.
//!
//! With `Q_k = Q_k0 (1 + q_k)` and `SV_k = SV_k0 (1 + sv_k)`, the linear price
//! disturbance is
//!
//! ```text
//! pi = sum mu_k sv_k - sum lambda_k q_k
//!    = sum mu_k pi_k + sum (mu_k - lambda_k) q_k,   pi_k = sv_k - q_k
//! ```
//!
//! and the return over a horizon `d` splits exactly into partial returns
//! `r_k` weighted by `epsilon_k` and volume returns `w_k` weighted by `eta_k`.
//! The second form of `pi` is the definition used for every return
//! computation; [`exact_price`] keeps the nonlinear ratio `SV / Q` as an
//! independent reference.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::neumaier_sum;

/// Denominators closer than this to zero are rejected.
pub const DEGENERACY_EPS: f64 = 1e-9;

/// Allowed mismatch between a supplied trend rate and the one implied by the
/// component rates.
pub const TREND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PricingError {
    #[error("no expectation types given")]
    Empty,
    #[error("type {k}: mean {which} = {value} must be positive")]
    NonPositiveMean { k: usize, which: &'static str, value: f64 },
    #[error("{what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{value} is not an integer multiple of the sample step {step}")]
    OffGrid { value: f64, step: f64 },
    #[error("horizon {d} steps reaches before the first sample at index {t}")]
    HorizonOutOfRange { t: usize, d: usize },
    #[error("degenerate denominator {what} = {value}")]
    Degenerate { what: String, value: f64 },
    #[error("trend rate alpha = {alpha} disagrees with sum(mu*beta - lambda*gamma) = {implied}")]
    InconsistentTrend { alpha: f64, implied: f64 },
    #[error("total trade volume vanishes at sample {0}")]
    ZeroVolume(usize),
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), PricingError> {
    if expected == got {
        Ok(())
    } else {
        Err(PricingError::LengthMismatch { what, expected, got })
    }
}

/// Mixing weights and mean prices derived from per-type mean levels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Weights {
    /// `lambda_k = Q_k0 / Q_0`.
    pub lambda: Vec<f64>,
    /// `mu_k = SV_k0 / SV_0`.
    pub mu: Vec<f64>,
    /// `p_k0 = SV_k0 / Q_k0`.
    pub price_k0: Vec<f64>,
    /// `p_0 = SV_0 / Q_0`.
    pub price0: f64,
    /// All `p_k0` identical, in which case `mu == lambda` exactly.
    pub equal_mean_prices: bool,
}

impl Weights {
    pub fn types(&self) -> usize {
        self.lambda.len()
    }
}

/// Weights `lambda`, `mu` and mean prices from the mean volumes and values.
pub fn weights(q0: &[f64], sv0: &[f64]) -> Result<Weights, PricingError> {
    if q0.is_empty() {
        return Err(PricingError::Empty);
    }
    check_len("mean values", q0.len(), sv0.len())?;
    for (k, (&q, &sv)) in q0.iter().zip(sv0).enumerate() {
        if !(q > 0.0 && q.is_finite()) {
            return Err(PricingError::NonPositiveMean { k, which: "Q_k0", value: q });
        }
        if !(sv > 0.0 && sv.is_finite()) {
            return Err(PricingError::NonPositiveMean { k, which: "SV_k0", value: sv });
        }
    }
    let q_total = neumaier_sum(q0.iter().copied());
    let sv_total = neumaier_sum(sv0.iter().copied());
    let lambda: Vec<f64> = q0.iter().map(|q| q / q_total).collect();
    let price_k0: Vec<f64> = q0.iter().zip(sv0).map(|(q, sv)| sv / q).collect();
    let equal_mean_prices = price_k0.iter().all(|&p| p == price_k0[0]);
    if equal_mean_prices {
        // mu_k = lambda_k p_k0 / p_0 = lambda_k; skip the rounding of a second division
        return Ok(Weights {
            mu: lambda.clone(),
            lambda,
            price0: price_k0[0],
            price_k0,
            equal_mean_prices,
        });
    }
    Ok(Weights {
        lambda,
        mu: sv0.iter().map(|sv| sv / sv_total).collect(),
        price_k0,
        price0: sv_total / q_total,
        equal_mean_prices,
    })
}

/// Weights from mean volumes and mean prices, with `SV_k0 = p_k0 Q_k0`.
///
/// Equality of mean prices is judged on the given prices, so bitwise equal
/// inputs always give `mu == lambda`.
pub fn weights_from_prices(q0: &[f64], prices: &[f64]) -> Result<Weights, PricingError> {
    if q0.is_empty() {
        return Err(PricingError::Empty);
    }
    check_len("mean prices", q0.len(), prices.len())?;
    for (k, &p) in prices.iter().enumerate() {
        if !(p > 0.0 && p.is_finite()) {
            return Err(PricingError::NonPositiveMean { k, which: "p_k0", value: p });
        }
    }
    let sv0: Vec<f64> = q0.iter().zip(prices).map(|(q, p)| q * p).collect();
    let mut w = weights(q0, &sv0)?;
    if prices.iter().all(|&p| p == prices[0]) {
        w.mu = w.lambda.clone();
        w.price0 = prices[0];
        w.equal_mean_prices = true;
    }
    w.price_k0 = prices.to_vec();
    Ok(w)
}

/// `pi = sum mu_k sv_k - sum lambda_k q_k` at one instant.
pub fn price_disturbance_at(sv: &[f64], q: &[f64], w: &Weights) -> Result<f64, PricingError> {
    check_len("sv_k", w.types(), sv.len())?;
    check_len("q_k", w.types(), q.len())?;
    let value: f64 = w.mu.iter().zip(sv).map(|(m, s)| m * s).sum();
    let volume: f64 = w.lambda.iter().zip(q).map(|(l, q)| l * q).sum();
    Ok(value - volume)
}

/// `pi = sum mu_k pi_k + sum (mu_k - lambda_k) q_k` at one instant.
pub fn price_from_partials_at(pi: &[f64], q: &[f64], w: &Weights) -> Result<f64, PricingError> {
    check_len("pi_k", w.types(), pi.len())?;
    check_len("q_k", w.types(), q.len())?;
    let partial = w.mu.iter().zip(pi).fold(0.0, |t, (m, p)| t + m * p);
    let volume = w.mu.iter().zip(&w.lambda).zip(q);
    Ok(volume.fold(partial, |t, ((m, l), q)| t + (m - l) * q))
}

fn series_len(series: &[Vec<f64>], what: &'static str, types: usize) -> Result<usize, PricingError> {
    check_len(what, types, series.len())?;
    let n = series.first().map_or(0, Vec::len);
    for s in series {
        check_len(what, n, s.len())?;
    }
    Ok(n)
}

fn column(series: &[Vec<f64>], i: usize) -> Vec<f64> {
    series.iter().map(|s| s[i]).collect()
}

/// Series form of [`price_disturbance_at`]; inputs are indexed `[k][sample]`.
pub fn price_disturbance(sv: &[Vec<f64>], q: &[Vec<f64>], w: &Weights) -> Result<Vec<f64>, PricingError> {
    let n = series_len(sv, "sv_k series", w.types())?;
    check_len("q_k series length", n, series_len(q, "q_k series", w.types())?)?;
    (0..n)
        .map(|i| price_disturbance_at(&column(sv, i), &column(q, i), w))
        .collect()
}

/// Series form of [`price_from_partials_at`].
pub fn price_from_partials(pi: &[Vec<f64>], q: &[Vec<f64>], w: &Weights) -> Result<Vec<f64>, PricingError> {
    let n = series_len(pi, "pi_k series", w.types())?;
    check_len("q_k series length", n, series_len(q, "q_k series", w.types())?)?;
    (0..n)
        .map(|i| price_from_partials_at(&column(pi, i), &column(q, i), w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactPrice {
    /// `p(t) = sum SV_k(t) / sum Q_k(t)`.
    pub price: Vec<f64>,
    /// `p(t) / p_0 - 1`.
    pub disturbance: Vec<f64>,
}

/// Nonlinear price from absolute volumes and values, indexed `[k][sample]`.
pub fn exact_price(q: &[Vec<f64>], sv: &[Vec<f64>], w: &Weights) -> Result<ExactPrice, PricingError> {
    let n = series_len(q, "Q_k series", w.types())?;
    check_len("SV_k series length", n, series_len(sv, "SV_k series", w.types())?)?;
    let mut price = Vec::with_capacity(n);
    let mut disturbance = Vec::with_capacity(n);
    for i in 0..n {
        let total_q: f64 = q.iter().map(|s| s[i]).sum();
        let total_sv: f64 = sv.iter().map(|s| s[i]).sum();
        if !(total_q > 0.0) {
            return Err(PricingError::ZeroVolume(i));
        }
        let p = total_sv / total_q;
        price.push(p);
        disturbance.push(p / w.price0 - 1.0);
    }
    Ok(ExactPrice { price, disturbance })
}

fn guard(what: impl FnOnce() -> String, value: f64) -> Result<f64, PricingError> {
    if value.abs() < DEGENERACY_EPS || !value.is_finite() {
        Err(PricingError::Degenerate { what: what(), value })
    } else {
        Ok(value)
    }
}

fn relative_change(series: &[f64], t: usize, d: usize, what: &'static str) -> Result<f64, PricingError> {
    if d > t || t >= series.len() {
        return Err(PricingError::HorizonOutOfRange { t, d });
    }
    let prev = series[t - d];
    let denom = guard(|| format!("1 + {what}(t-d)"), 1.0 + prev)?;
    Ok((series[t] - prev) / denom)
}

/// `r_k(t, d) = (pi_k(t) - pi_k(t-d)) / (1 + pi_k(t-d))`; `t` and `d` in samples.
pub fn partial_return(pi_k: &[f64], t: usize, d: usize) -> Result<f64, PricingError> {
    relative_change(pi_k, t, d, "pi_k")
}

/// `w_k(t, d) = (q_k(t) - q_k(t-d)) / (1 + q_k(t-d))`.
pub fn volume_return(q_k: &[f64], t: usize, d: usize) -> Result<f64, PricingError> {
    relative_change(q_k, t, d, "q_k")
}

/// Partial price disturbances and volume disturbances on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialSeries {
    #[serde(default)]
    pub t0: f64,
    pub step: f64,
    /// `pi[k][sample]`.
    pub pi: Vec<Vec<f64>>,
    /// `q[k][sample]`.
    pub q: Vec<Vec<f64>>,
}

impl PartialSeries {
    /// Builds `pi_k = sv_k - q_k` from volume and value disturbances.
    pub fn from_disturbances(t0: f64, step: f64, q: Vec<Vec<f64>>, sv: &[Vec<f64>]) -> Self {
        let pi = q
            .iter()
            .zip(sv)
            .map(|(q, sv)| sv.iter().zip(q).map(|(s, q)| s - q).collect())
            .collect();
        Self { t0, step, pi, q }
    }

    pub fn types(&self) -> usize {
        self.pi.len()
    }

    pub fn len(&self) -> usize {
        self.pi.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn time(&self, index: usize) -> f64 {
        self.t0 + index as f64 * self.step
    }

    pub fn validate(&self, types: usize) -> Result<(), PricingError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(PricingError::OffGrid { value: self.step, step: self.step });
        }
        let n = series_len(&self.pi, "pi_k series", types)?;
        check_len("q_k series length", n, series_len(&self.q, "q_k series", types)?)?;
        Ok(())
    }

    /// Number of samples spanned by a horizon `d`, which must sit on the grid.
    pub fn steps_for(&self, d: f64) -> Result<usize, PricingError> {
        let ratio = d / self.step;
        let rounded = ratio.round();
        if !(rounded >= 0.0) || (ratio - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(PricingError::OffGrid { value: d, step: self.step });
        }
        Ok(rounded as usize)
    }

    pub fn index_of(&self, t: f64) -> Result<usize, PricingError> {
        self.steps_for(t - self.t0)
    }

    pub fn composite(&self, w: &Weights) -> Result<Vec<f64>, PricingError> {
        price_from_partials(&self.pi, &self.q, w)
    }
}

/// Return decomposition of one type at one `(t, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TypeReturn {
    pub epsilon: f64,
    pub eta: f64,
    pub r_k: f64,
    pub w_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReturnDecomposition {
    pub t: f64,
    pub d: f64,
    /// `pi(t-d)` and `pi(t)` from the partial-disturbance definition.
    pub pi_prev: f64,
    pub pi_now: f64,
    /// `p(t)/p(t-d) - 1` computed from the composite disturbance.
    pub r_direct: f64,
    /// `drift + partial_component + volume_component`.
    pub r_decomposed: f64,
    /// `sum epsilon_k r_k`.
    pub partial_component: f64,
    /// `sum eta_k w_k`.
    pub volume_component: f64,
    /// Linear-trend term `alpha d / (1 + alpha (t-d) + pi(t-d))`; 0 without trend.
    pub drift: f64,
    pub alpha: f64,
    pub per_type: Vec<TypeReturn>,
}

impl ReturnDecomposition {
    pub fn weight_sum(&self) -> f64 {
        self.per_type.iter().map(|x| x.epsilon + x.eta).sum()
    }

    pub fn identity_residual(&self) -> f64 {
        (self.r_direct - self.r_decomposed).abs()
    }
}

fn decompose(
    series: &PartialSeries,
    w: &Weights,
    t: usize,
    d: usize,
    alpha: f64,
) -> Result<ReturnDecomposition, PricingError> {
    series.validate(w.types())?;
    if d > t || t >= series.len() {
        return Err(PricingError::HorizonOutOfRange { t, d });
    }
    let prev = t - d;
    let pi_prev = price_from_partials_at(&column(&series.pi, prev), &column(&series.q, prev), w)?;
    let pi_now = price_from_partials_at(&column(&series.pi, t), &column(&series.q, t), w)?;
    let t_abs = series.time(t);
    let d_abs = d as f64 * series.step;
    let denom = guard(
        || "1 + alpha (t-d) + pi(t-d)".to_string(),
        1.0 + alpha * (t_abs - d_abs) + pi_prev,
    )?;

    let mut per_type = Vec::with_capacity(w.types());
    for k in 0..w.types() {
        let r_k = partial_return(&series.pi[k], t, d)?;
        let w_k = volume_return(&series.q[k], t, d)?;
        per_type.push(TypeReturn {
            epsilon: w.mu[k] * (1.0 + series.pi[k][prev]) / denom,
            eta: (w.mu[k] - w.lambda[k]) * (1.0 + series.q[k][prev]) / denom,
            r_k,
            w_k,
        });
    }
    let partial_component: f64 = per_type.iter().map(|x| x.epsilon * x.r_k).sum();
    let volume_component: f64 = per_type.iter().map(|x| x.eta * x.w_k).sum();
    let drift = alpha * d_abs / denom;
    Ok(ReturnDecomposition {
        t: t_abs,
        d: d_abs,
        pi_prev,
        pi_now,
        r_direct: (alpha * d_abs + (pi_now - pi_prev)) / denom,
        r_decomposed: drift + (partial_component + volume_component),
        partial_component,
        volume_component,
        drift,
        alpha,
        per_type,
    })
}

/// Return over `d` samples ending at sample `t`, split into partial and volume returns.
pub fn return_decomposition(
    series: &PartialSeries,
    w: &Weights,
    t: usize,
    d: usize,
) -> Result<ReturnDecomposition, PricingError> {
    decompose(series, w, t, d, 0.0)
}

/// Linear trend rates of value (`beta_k`) and volume (`gamma_k`), and the
/// implied price trend `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendParams {
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
}

fn implied_alpha(beta: &[f64], gamma: &[f64], w: &Weights) -> Result<f64, PricingError> {
    check_len("beta_k", w.types(), beta.len())?;
    check_len("gamma_k", w.types(), gamma.len())?;
    Ok((0..w.types()).map(|k| w.mu[k] * beta[k] - w.lambda[k] * gamma[k]).sum())
}

impl TrendParams {
    /// `alpha = sum (mu_k beta_k - lambda_k gamma_k)`.
    pub fn from_rates(beta: Vec<f64>, gamma: Vec<f64>, w: &Weights) -> Result<Self, PricingError> {
        let alpha = implied_alpha(&beta, &gamma, w)?;
        Ok(Self { alpha, beta, gamma })
    }

    /// Checks a supplied `alpha` against the component rates.
    pub fn new(alpha: f64, beta: Vec<f64>, gamma: Vec<f64>, w: &Weights) -> Result<Self, PricingError> {
        let implied = implied_alpha(&beta, &gamma, w)?;
        if (alpha - implied).abs() > TREND_TOLERANCE {
            return Err(PricingError::InconsistentTrend { alpha, implied });
        }
        Ok(Self { alpha, beta, gamma })
    }
}

/// Return with a linear price trend `p(t) = p_0 (1 + alpha t + pi(t))`.
///
/// The drift term `alpha d / (1 + alpha (t-d) + pi(t-d))` is added to partial
/// and volume returns whose weights share that denominator.
pub fn trend_return(
    trend: &TrendParams,
    series: &PartialSeries,
    w: &Weights,
    t: usize,
    d: usize,
) -> Result<ReturnDecomposition, PricingError> {
    let implied = implied_alpha(&trend.beta, &trend.gamma, w)?;
    if (trend.alpha - implied).abs() > TREND_TOLERANCE {
        return Err(PricingError::InconsistentTrend {
            alpha: trend.alpha,
            implied,
        });
    }
    decompose(series, w, t, d, trend.alpha)
}

/// Decomposes every `(t, d)` with `t >= d` for each horizon. Failures are
/// returned alongside the successes rather than aborting the sweep.
pub fn decompose_series(
    series: &PartialSeries,
    w: &Weights,
    horizons: &[usize],
    trend: Option<&TrendParams>,
) -> (Vec<ReturnDecomposition>, Vec<PricingError>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for &d in horizons {
        for t in d..series.len() {
            let result = match trend {
                Some(tr) => trend_return(tr, series, w, t, d),
                None => return_decomposition(series, w, t, d),
            };
            match result {
                Ok(r) => ok.push(r),
                Err(e) => failed.push(e),
            }
        }
    }
    (ok, failed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_type() -> Weights {
        weights(&[60.0, 40.0], &[120.0, 180.0]).unwrap()
    }

    #[test]
    fn weight_examples() {
        let w = two_type();
        assert_eq!(w.lambda, vec![0.6, 0.4]);
        assert_eq!(w.mu, vec![0.4, 0.6]);
        assert_eq!(w.price_k0, vec![2.0, 4.5]);
        assert_eq!(w.price0, 3.0);
        assert!(!w.equal_mean_prices);

        let w = weights(&[10.0], &[30.0]).unwrap();
        assert_eq!((w.lambda.clone(), w.mu.clone(), w.price0), (vec![1.0], vec![1.0], 3.0));

        let w = weights(&[50.0, 50.0], &[150.0, 150.0]).unwrap();
        assert_eq!(w.lambda, vec![0.5, 0.5]);
        assert_eq!(w.mu, w.lambda);
        assert_eq!(w.price_k0, vec![3.0, 3.0]);
        assert!(w.equal_mean_prices);
    }

    #[test]
    fn weight_errors() {
        assert_eq!(weights(&[], &[]), Err(PricingError::Empty));
        assert!(matches!(weights(&[1.0, 0.0], &[1.0, 1.0]), Err(PricingError::NonPositiveMean { k: 1, .. })));
        assert!(matches!(weights(&[1.0], &[-1.0]), Err(PricingError::NonPositiveMean { k: 0, .. })));
        assert!(matches!(weights(&[1.0], &[1.0, 2.0]), Err(PricingError::LengthMismatch { .. })));
    }

    #[test]
    fn price_routes_agree_on_worked_example() {
        let w = two_type();
        let pi = price_disturbance_at(&[0.01, -0.02], &[0.005, 0.01], &w).unwrap();
        assert_abs_diff_eq!(pi, -0.015, epsilon = 1e-15);
        // pi_k = sv_k - q_k
        let pi2 = price_from_partials_at(&[0.005, -0.03], &[0.005, 0.01], &w).unwrap();
        assert_abs_diff_eq!(pi2, -0.015, epsilon = 1e-15);
        assert_eq!(price_disturbance_at(&[0.0, 0.0], &[0.0, 0.0], &w).unwrap(), 0.0);
        assert!(price_disturbance_at(&[0.0], &[0.0, 0.0], &w).is_err());
    }

    #[test]
    fn equal_prices_cancel_volume_terms() {
        let w = weights(&[50.0, 30.0], &[150.0, 90.0]).unwrap();
        let pi = price_disturbance_at(&[0.02, -0.01], &[0.02, -0.01], &w).unwrap();
        assert_eq!(pi, 0.0);
        let from_partials = price_from_partials_at(&[0.01, 0.03], &[0.5, -0.4], &w).unwrap();
        assert_eq!(from_partials, w.mu[0] * 0.01 + w.mu[1] * 0.03);
    }

    #[test]
    fn exact_price_example() {
        let w = two_type();
        let q = vec![vec![60.0 * 1.005], vec![40.0 * 1.01]];
        let sv = vec![vec![120.0 * 1.01], vec![180.0 * 0.98]];
        let e = exact_price(&q, &sv, &w).unwrap();
        assert_abs_diff_eq!(e.price[0], 297.6 / 100.7, epsilon = 1e-12);
        assert_abs_diff_eq!(e.disturbance[0], -0.0148957298, epsilon = 1e-9);
        assert_abs_diff_eq!((e.disturbance[0] - (-0.015)).abs(), 1.04e-4, epsilon = 5e-7);

        let still = exact_price(&[vec![60.0], vec![40.0]], &[vec![120.0], vec![180.0]], &w).unwrap();
        assert_eq!(still.disturbance[0], 0.0);
        assert!(matches!(
            exact_price(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![1.0]], &w),
            Err(PricingError::ZeroVolume(0))
        ));
    }

    #[test]
    fn return_examples() {
        assert_eq!(partial_return(&[0.01, 0.01], 1, 1).unwrap(), 0.0);
        assert_abs_diff_eq!(partial_return(&[0.005, 0.01], 1, 1).unwrap(), 0.005 / 1.005, epsilon = 1e-16);
        assert_abs_diff_eq!(volume_return(&[0.01, 0.02], 1, 1).unwrap(), 0.01 / 1.01, epsilon = 1e-16);
        assert!(matches!(partial_return(&[0.0, 0.0], 0, 1), Err(PricingError::HorizonOutOfRange { .. })));
        assert!(matches!(partial_return(&[-1.0, 0.0], 1, 1), Err(PricingError::Degenerate { .. })));
    }

    fn worked_series() -> PartialSeries {
        PartialSeries {
            t0: 0.0,
            step: 1.0,
            pi: vec![vec![0.005, 0.01], vec![-0.03, -0.01]],
            q: vec![vec![0.005, 0.0], vec![0.01, 0.02]],
        }
    }

    #[test]
    fn worked_return_decomposition() {
        let w = two_type();
        let r = return_decomposition(&worked_series(), &w, 1, 1).unwrap();
        assert_abs_diff_eq!(r.pi_prev, -0.015, epsilon = 1e-15);
        assert_abs_diff_eq!(r.pi_now, 0.002, epsilon = 1e-15);
        assert_abs_diff_eq!(r.r_direct, 0.0172589, epsilon = 5e-8);
        assert_abs_diff_eq!(r.per_type[0].epsilon, 0.408122, epsilon = 5e-7);
        assert_abs_diff_eq!(r.per_type[1].epsilon, 0.590863, epsilon = 5e-7);
        assert_abs_diff_eq!(r.per_type[0].eta, -0.204061, epsilon = 5e-7);
        assert_abs_diff_eq!(r.per_type[1].eta, 0.205076, epsilon = 5e-7);
        assert!((r.weight_sum() - 1.0).abs() <= 1e-12);
        assert!(r.identity_residual() <= 1e-12);
    }

    #[test]
    fn no_change_gives_zero_return() {
        let s = PartialSeries {
            t0: 0.0,
            step: 1.0,
            pi: vec![vec![0.02, 0.02], vec![-0.01, -0.01]],
            q: vec![vec![0.01, 0.01], vec![0.03, 0.03]],
        };
        let r = return_decomposition(&s, &two_type(), 1, 1).unwrap();
        assert_eq!(r.r_direct, 0.0);
        assert!(r.per_type.iter().all(|x| x.r_k == 0.0 && x.w_k == 0.0));
    }

    #[test]
    fn equal_prices_zero_eta() {
        let w = weights(&[20.0, 80.0], &[40.0, 160.0]).unwrap();
        let r = return_decomposition(&worked_series(), &w, 1, 1).unwrap();
        assert!(r.per_type.iter().all(|x| x.eta == 0.0));
        assert_eq!(r.volume_component, 0.0);
    }

    #[test]
    fn trend_examples() {
        let w = weights(&[10.0], &[30.0]).unwrap();
        let s = PartialSeries { t0: 0.0, step: 0.5, pi: vec![vec![0.0; 3]], q: vec![vec![0.0; 3]] };
        let trend = TrendParams::from_rates(vec![0.01], vec![0.0], &w).unwrap();
        assert_eq!(trend.alpha, 0.01);
        let r = trend_return(&trend, &s, &w, 2, 1).unwrap();
        let oracle = (1.0 + 0.01 * 1.0) / (1.0 + 0.01 * 0.5) - 1.0;
        assert_abs_diff_eq!(r.r_decomposed, 0.005 / 1.005, epsilon = 1e-15);
        assert_abs_diff_eq!(r.r_direct, oracle, epsilon = 1e-15);

        // beta = gamma with lambda = mu gives alpha = 0
        let eq = weights(&[50.0, 50.0], &[150.0, 150.0]).unwrap();
        let flat = TrendParams::from_rates(vec![0.02, -0.01], vec![0.02, -0.01], &eq).unwrap();
        assert_eq!(flat.alpha, 0.0);

        assert!(matches!(
            TrendParams::new(0.02, vec![0.01], vec![0.0], &w),
            Err(PricingError::InconsistentTrend { .. })
        ));
        assert!(TrendParams::new(0.01, vec![0.01], vec![0.0], &w).is_ok());
    }

    #[test]
    fn zero_trend_reduces_exactly() {
        let w = two_type();
        let zero = TrendParams::from_rates(vec![0.0; 2], vec![0.0; 2], &w).unwrap();
        let a = trend_return(&zero, &worked_series(), &w, 1, 1).unwrap();
        let b = return_decomposition(&worked_series(), &w, 1, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn grid_helpers() {
        let s = PartialSeries { t0: 1.0, step: 0.25, pi: vec![vec![0.0; 9]], q: vec![vec![0.0; 9]] };
        assert_eq!(s.steps_for(0.75).unwrap(), 3);
        assert!(matches!(s.steps_for(0.3), Err(PricingError::OffGrid { .. })));
        assert_eq!(s.index_of(2.0).unwrap(), 4);
        assert_eq!(s.time(4), 2.0);
    }

    #[test]
    fn sweep_collects_failures() {
        let s = PartialSeries {
            t0: 0.0,
            step: 1.0,
            pi: vec![vec![0.0, -1.0, 0.0]],
            q: vec![vec![0.0, 0.0, 0.0]],
        };
        let w = weights(&[1.0], &[1.0]).unwrap();
        let (ok, failed) = decompose_series(&s, &w, &[1], None);
        assert_eq!(ok.len(), 1);
        assert_eq!(failed.len(), 1);
    }
}
