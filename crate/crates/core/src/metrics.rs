//! Revenue, volatility and bootstrap statistics over simulated days.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{probe_agent, FbsdeSolution};
use crate::grid::TimeGrid;
use crate::lq_control::AgentParams;
use crate::rng::{stream_rng, streams};

fn check_len(got: usize, grid: &TimeGrid) -> Result<()> {
    if got != grid.len() {
        return Err(Error::LengthMismatch { expected: grid.len(), got });
    }
    Ok(())
}

/// Gross trading cash flow `Σ_{i<N} P_i q_i h` (€), with `q` the withdrawal
/// (sold) rate.
pub fn daily_revenue(price: &[f64], withdrawal: &[f64], grid: &TimeGrid) -> Result<f64> {
    check_len(price.len(), grid)?;
    check_len(withdrawal.len(), grid)?;
    let h = grid.dt();
    Ok(price[..grid.steps()].iter().zip(withdrawal).map(|(p, q)| p * q * h).sum())
}

/// Gross revenue minus the running and terminal costs of the agent's
/// objective, `Σ (α/2 q² + β/2 (Q - Q0)²) h + γ/2 (Q_T - Q0)²`.
pub fn net_revenue(price: &[f64], withdrawal: &[f64], level: &[f64], params: &AgentParams, grid: &TimeGrid) -> Result<f64> {
    check_len(level.len(), grid)?;
    let gross = daily_revenue(price, withdrawal, grid)?;
    let h = grid.dt();
    let running: f64 = (0..grid.steps())
        .map(|i| 0.5 * params.alpha * withdrawal[i].powi(2) + 0.5 * params.beta * (level[i] - params.q0_bar).powi(2))
        .sum::<f64>()
        * h;
    let terminal = 0.5 * params.gamma * (level[grid.steps()] - params.q0_bar).powi(2);
    Ok(gross - running - terminal)
}

/// Sample standard deviation of one-step price increments, scaled by
/// `sqrt(steps per 24 h)` (€/MWh per √day).
pub fn realized_volatility(price: &[f64], grid: &TimeGrid) -> Result<f64> {
    check_len(price.len(), grid)?;
    if price.len() < 3 {
        return Err(Error::param("price", "need at least two increments"));
    }
    let inc: Vec<f64> = price.windows(2).map(|w| w[1] - w[0]).collect();
    let m = inc.iter().sum::<f64>() / inc.len() as f64;
    let var = inc.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (inc.len() - 1) as f64;
    let steps_per_day = 24.0 / grid.dt();
    Ok(var.sqrt() * steps_per_day.sqrt())
}

/// `max P - min P` along one path.
pub fn price_range(price: &[f64]) -> f64 {
    let (lo, hi) = price.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| (lo.min(p), hi.max(p)));
    hi - lo
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
}

impl Quantiles {
    pub fn of(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            q05: quantile(&s, 0.05),
            q25: quantile(&s, 0.25),
            q50: quantile(&s, 0.50),
            q75: quantile(&s, 0.75),
            q95: quantile(&s, 0.95),
        }
    }

    /// `q95 - q05`
    pub fn spread(&self) -> f64 {
        self.q95 - self.q05
    }
}

pub fn mean(samples: &[f64]) -> f64 {
    samples.iter().sum::<f64>() / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
}

impl ConfidenceInterval {
    pub fn excludes_zero(&self) -> bool {
        self.lower > 0.0 || self.upper < 0.0
    }
}

/// Percentile bootstrap over `n` paired observations.
///
/// `stat` receives the resampled indices; the point estimate uses the
/// identity sample. Resample `r` draws from its own stream, so the result does
/// not depend on the thread schedule.
pub fn bootstrap<F>(n: usize, resamples: usize, level: f64, seed: u64, stat: F) -> ConfidenceInterval
where
    F: Fn(&[usize]) -> f64 + Sync,
{
    let identity: Vec<usize> = (0..n).collect();
    let estimate = stat(&identity);
    let mut values: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map_init(
            || vec![0; n],
            |idx, r| {
                let mut rng = stream_rng(seed, streams::BOOTSTRAP, r as u64);
                for i in idx.iter_mut() {
                    *i = rng.random_range(0..n);
                }
                stat(idx)
            },
        )
        .collect();
    values.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    ConfidenceInterval { estimate, lower: quantile(&values, tail), upper: quantile(&values, 1.0 - tail) }
}

/// Bootstrap interval for `mean(b) - mean(a)` on paired samples.
pub fn paired_difference(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<ConfidenceInterval> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::LengthMismatch { expected: a.len(), got: b.len() });
    }
    Ok(bootstrap(a.len(), resamples, 0.95, seed, |idx| {
        idx.iter().map(|&i| b[i] - a[i]).sum::<f64>() / idx.len() as f64
    }))
}

/// Per-day statistics of one equilibrium run and the reference agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueReport {
    pub days: usize,
    pub seed: u64,
    pub mean_revenue: f64,
    pub revenue_quantiles: Quantiles,
    pub mean_net_revenue: f64,
    pub mean_volatility: f64,
    pub volatility_quantiles: Quantiles,
    pub mean_price_range: f64,
    pub mean_price: f64,
    #[serde(skip)]
    pub revenue: Vec<f64>,
    #[serde(skip)]
    pub volatility: Vec<f64>,
    #[serde(skip)]
    pub range: Vec<f64>,
}

/// Revenue of `reference` trading against the prices of `sol`, together with
/// price volatility and range, one value per simulated day.
pub fn revenue_report(sol: &FbsdeSolution, reference: &AgentParams, seed: u64) -> Result<RevenueReport> {
    let probe = probe_agent(sol, reference, seed)?;
    let grid = sol.grid;
    let days = sol.price.paths();
    let per_day: Vec<(f64, f64, f64, f64)> = (0..days)
        .into_par_iter()
        .map(|p| {
            let price = sol.price.path(p);
            let q = probe.withdrawal.path(p);
            let gross = daily_revenue(price, q, &grid)?;
            let net = net_revenue(price, q, probe.level.path(p), reference, &grid)?;
            Ok((gross, net, realized_volatility(price, &grid)?, price_range(price)))
        })
        .collect::<Result<_>>()?;
    let revenue: Vec<f64> = per_day.iter().map(|r| r.0).collect();
    let net: Vec<f64> = per_day.iter().map(|r| r.1).collect();
    let volatility: Vec<f64> = per_day.iter().map(|r| r.2).collect();
    let range: Vec<f64> = per_day.iter().map(|r| r.3).collect();
    Ok(RevenueReport {
        days,
        seed,
        mean_revenue: mean(&revenue),
        revenue_quantiles: Quantiles::of(&revenue),
        mean_net_revenue: mean(&net),
        mean_volatility: mean(&volatility),
        volatility_quantiles: Quantiles::of(&volatility),
        mean_price_range: mean(&range),
        mean_price: mean(sol.price.values()),
        revenue,
        volatility,
        range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate_between_order_statistics() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.25), 2.0);
        assert!((quantile(&s, 0.1) - 1.4).abs() < 1e-12);
        let q = Quantiles::of(&[5.0, 1.0, 4.0, 2.0, 3.0]);
        assert!(q.q05 <= q.q25 && q.q25 <= q.q50 && q.q50 <= q.q75 && q.q75 <= q.q95);
    }

    #[test]
    fn bootstrap_of_a_constant_sample_is_degenerate() {
        let ci = bootstrap(50, 200, 0.95, 1, |idx| idx.iter().map(|_| 2.0).sum::<f64>() / idx.len() as f64);
        assert_eq!((ci.estimate, ci.lower, ci.upper), (2.0, 2.0, 2.0));
        assert!(ci.excludes_zero());
    }
}
