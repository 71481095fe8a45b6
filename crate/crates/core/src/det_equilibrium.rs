//! Deterministic toy market: one storage agent facing linear supply
//! `C(P) = C0 + C1 P` and a deterministic demand `D_t`, no price caps.
//!
//! All integrals of hyperbolic kernels against demand or price are running
//! convolutions on the grid (see [`hyperbolic_convolution`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{cumulative_integral, hyperbolic_convolution, TimeFunction, TimeGrid};
use crate::lq_control::{AgentParams, PriceTrajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetMarket {
    /// Baseline net supply (MW).
    pub c0: f64,
    /// Supply slope (MW per €/MWh).
    pub c1: f64,
    /// Demand `D_t` (MW).
    pub demand: TimeFunction,
    pub agent: AgentParams,
    /// Horizon (h).
    pub horizon: f64,
}

impl DetMarket {
    pub fn new(c0: f64, c1: f64, demand: TimeFunction, agent: AgentParams, horizon: f64) -> Result<Self> {
        let m = Self { c0, c1, demand, agent, horizon };
        m.validate()?;
        Ok(m)
    }

    /// Calibrated French market with `p` aggregated unit agents:
    /// `C0 = -7546`, `C1 = 151.77`, `D_t = 6862.5 sin(πt/6) + 1500`, `T = 24`.
    pub fn calibrated(p: f64) -> Result<Self> {
        let unit = AgentParams::new(84.0, 7.0, 500.0, 0.0, 0.0)?;
        Self::new(
            -7546.0,
            151.77,
            TimeFunction::Sinusoid {
                amplitude: 6862.5,
                angular_frequency: std::f64::consts::PI / 6.0,
                offset: 1500.0,
            },
            unit.scaled(p)?,
            24.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !self.c0.is_finite() {
            return Err(Error::param("c0", "must be finite"));
        }
        if !(self.c1.is_finite() && self.c1 > 0.0) {
            return Err(Error::param("c1", format!("must be > 0, got {}", self.c1)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::param("horizon", "must be > 0"));
        }
        self.demand.validate()?;
        self.agent.validate()?;
        let a = &self.agent;
        if a.rho != 0.0 || a.kappa.is_some() || a.jumps.is_some() || a.q0_bar != 0.0 {
            return Err(Error::param(
                "agent",
                "deterministic market needs rho = 0, no external supply, no jumps and a zero reference level",
            ));
        }
        Ok(())
    }

    /// Same market with the agent replaced by `p` aggregated copies of `unit`.
    pub fn with_agents(&self, unit: &AgentParams, p: f64) -> Result<Self> {
        Self::new(self.c0, self.c1, self.demand.clone(), unit.scaled(p)?, self.horizon)
    }

    /// Price without storage, `(D_t - C0)/C1`.
    pub fn no_storage_price(&self, t: f64) -> f64 {
        (self.demand.eval(t) - self.c0) / self.c1
    }

    /// `max_t |(D_t - C0)/C1|` on the grid.
    pub fn price_scale(&self, grid: &TimeGrid) -> f64 {
        grid.times().into_iter().map(|t| self.no_storage_price(t).abs()).fold(0.0, f64::max)
    }
}

/// Optimal response to an exogenous deterministic price.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousStrategy {
    pub c1: f64,
    /// `q_t` (MW) at the grid points.
    pub withdrawal: Vec<f64>,
    /// `Q_t` (MWh) at the grid points, with `Q_0 = 0`.
    pub level: Vec<f64>,
}

fn denominator_c1(params: &AgentParams, omega: f64, horizon: f64) -> f64 {
    params.gamma * omega * (omega * horizon).sinh() + params.beta * (omega * horizon).cosh()
}

fn omega_of(params: &AgentParams) -> f64 {
    (params.beta / params.alpha).sqrt()
}

/// `c1(P) = (γ ∫cosh(ω(T-s)) P_s/(2α) ds + β ∫ sinh(ω(T-s))/ω P_s/(2α) ds) / (γω sinh ωT + β cosh ωT)`.
pub fn exogenous_c1(price: &PriceTrajectory, params: &AgentParams) -> Result<f64> {
    params.validate()?;
    let grid = price.grid();
    let w = omega_of(params);
    let (s, c) = hyperbolic_convolution(w, grid, |t| price.eval(t) / (2.0 * params.alpha))?;
    let n = grid.steps();
    Ok((params.gamma * c[n] + params.beta * s[n] / w) / denominator_c1(params, w, grid.horizon()))
}

/// `q_t = -c1 ω² cosh(ωt) + P_t/(2α) + ∫_0^t ω sinh(ω(t-s)) P_s/(2α) ds` and
/// `Q_t = c1 ω sinh(ωt) - ∫_0^t cosh(ω(t-s)) P_s/(2α) ds`.
pub fn exogenous_strategy(price: &PriceTrajectory, params: &AgentParams) -> Result<ExogenousStrategy> {
    params.validate()?;
    let grid = price.grid();
    let w = omega_of(params);
    let scale = 1.0 / (2.0 * params.alpha);
    let (s, c) = hyperbolic_convolution(w, grid, |t| price.eval(t) * scale)?;
    let n = grid.steps();
    let c1 = (params.gamma * c[n] + params.beta * s[n] / w) / denominator_c1(params, w, grid.horizon());
    let withdrawal = (0..grid.len())
        .map(|k| {
            let t = grid.time(k);
            -c1 * w * w * (w * t).cosh() + price.values()[k] * scale + w * s[k]
        })
        .collect();
    let level = (0..grid.len()).map(|k| c1 * w * (w * grid.time(k)).sinh() - c[k]).collect();
    Ok(ExogenousStrategy { c1, withdrawal, level })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumConstants {
    pub omega: f64,
    /// `ω sqrt(C1 / (C1 + 1/(2α)))`
    pub omega_tilde: f64,
    /// `C1 + 1/(2α)`
    pub k: f64,
    pub a: f64,
    pub b: f64,
    pub a_prime: f64,
    pub b_prime: f64,
    pub c1_tilde: f64,
}

/// Running convolutions shared by the constants and the price formula.
struct Convolutions {
    /// `∫_0^t (D_s - C0) sinh(ω̃(t-s)) ds` and the cosh counterpart.
    sinh_d: Vec<f64>,
    cosh_d: Vec<f64>,
    /// `∫_0^t cosh(ωs) sinh(ω̃(t-s)) ds` and the cosh counterpart.
    sinh_c: Vec<f64>,
    cosh_c: Vec<f64>,
    /// `∫_0^t (D_s - C0) ds`
    cum_d: Vec<f64>,
}

fn convolutions(market: &DetMarket, grid: &TimeGrid, omega: f64, omega_tilde: f64) -> Result<Convolutions> {
    let excess = |t: f64| market.demand.eval(t) - market.c0;
    let (sinh_d, cosh_d) = hyperbolic_convolution(omega_tilde, grid, excess)?;
    let (sinh_c, cosh_c) = hyperbolic_convolution(omega_tilde, grid, |s| (omega * s).cosh())?;
    Ok(Convolutions { sinh_d, cosh_d, sinh_c, cosh_c, cum_d: cumulative_integral(grid, excess) })
}

fn check_grid(market: &DetMarket, grid: &TimeGrid) -> Result<()> {
    if (grid.horizon() - market.horizon).abs() > 1e-12 * market.horizon {
        return Err(Error::param("grid", format!("grid horizon {} differs from market horizon {}", grid.horizon(), market.horizon)));
    }
    Ok(())
}

fn constants_from(market: &DetMarket, grid: &TimeGrid) -> Result<(EquilibriumConstants, Convolutions)> {
    market.validate()?;
    check_grid(market, grid)?;
    let ag = &market.agent;
    let w = omega_of(ag);
    let k = market.c1 + 1.0 / (2.0 * ag.alpha);
    let wt = w * (market.c1 / k).sqrt();
    let conv = convolutions(market, grid, w, wt)?;
    let n = grid.steps();
    let a = w / (wt * k) * conv.sinh_d[n];
    let b = w.powi(3) / (wt * k) * conv.sinh_c[n];
    let a_prime = w / k * conv.cosh_d[n];
    let b_prime = w.powi(3) / k * conv.cosh_c[n];
    let lead = 2.0 * ag.alpha * w * denominator_c1(ag, w, market.horizon);
    let den = lead - ag.gamma * b_prime - ag.beta * b;
    let size = lead.abs() + (ag.gamma * b_prime).abs() + (ag.beta * b).abs();
    if !den.is_finite() || den.abs() <= 1e-12 * size {
        return Err(Error::Singular(format!("denominator of c1 vanishes ({den:e} against scale {size:e})")));
    }
    let c1_tilde = (ag.gamma * a_prime + ag.beta * a) / den;
    Ok((EquilibriumConstants { omega: w, omega_tilde: wt, k, a, b, a_prime, b_prime, c1_tilde }, conv))
}

/// `ω̃, A, B, A', B'` and `c̃1`.
pub fn equilibrium_constants(market: &DetMarket, grid: &TimeGrid) -> Result<EquilibriumConstants> {
    constants_from(market, grid).map(|(c, _)| c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetEquilibrium {
    pub grid: TimeGrid,
    pub constants: EquilibriumConstants,
    /// `X(t)` at the grid points.
    pub x: Vec<f64>,
    pub price: Vec<f64>,
    /// `q_t = D_t - C0 - C1 P_t`.
    pub withdrawal: Vec<f64>,
    /// State of charge from the closed-form triple integral.
    pub level: Vec<f64>,
    /// `max_t |q_t (clearing) - q_t (closed form in X)|`.
    pub withdrawal_discrepancy: f64,
    /// `max_t |Q_t (closed form) - Q_t (best response to P)|`.
    pub level_discrepancy: f64,
    /// `max_t |D_t - C(P_t) - q_t|` with `q_t` the best response to the price.
    pub clearing_residual: f64,
}

impl DetEquilibrium {
    pub fn price_trajectory(&self) -> Result<PriceTrajectory> {
        PriceTrajectory::new(self.grid, self.price.clone())
    }

    pub fn price_range(&self) -> f64 {
        let (lo, hi) = self.price.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &p| (l.min(p), h.max(p)));
        hi - lo
    }
}

/// Equilibrium price, withdrawal and state of charge.
pub fn equilibrium_price(market: &DetMarket, grid: &TimeGrid) -> Result<DetEquilibrium> {
    let (cst, conv) = constants_from(market, grid)?;
    let ag = &market.agent;
    let (w, wt, k, c1t) = (cst.omega, cst.omega_tilde, cst.k, cst.c1_tilde);
    let c = market.c1;
    let two_ac = 1.0 + 2.0 * ag.alpha * c;
    let n = grid.len();
    let mut x = vec![0.0; n];
    let mut price = vec![0.0; n];
    let mut withdrawal = vec![0.0; n];
    let mut level = vec![0.0; n];
    let mut withdrawal_discrepancy: f64 = 0.0;
    for i in 0..n {
        let t = grid.time(i);
        let excess = market.demand.eval(t) - market.c0;
        x[i] = w / (wt * k) * conv.sinh_d[i] + c1t * w.powi(3) / (wt * k) * conv.sinh_c[i];
        let cosh_t = (w * t).cosh();
        price[i] = (excess - w / (2.0 * ag.alpha) * x[i] + c1t * w * w * cosh_t) / k;
        withdrawal[i] = excess - c * price[i];
        let alt = excess / two_ac + ag.alpha * c / two_ac * (w / ag.alpha * x[i] - 2.0 * c1t * w * w * cosh_t);
        withdrawal_discrepancy = withdrawal_discrepancy.max((alt - withdrawal[i]).abs());
        let int_x = (conv.cosh_d[i] + c1t * w * w * conv.cosh_c[i] - conv.cum_d[i] - c1t * w * (w * t).sinh()) / (w * c);
        level[i] = -conv.cum_d[i] / two_ac - w * c / two_ac * int_x + 2.0 * c1t * ag.beta * c / (w * two_ac) * (w * t).sinh();
    }
    let traj = PriceTrajectory::new(*grid, price.clone())?;
    let response = exogenous_strategy(&traj, ag)?;
    let mut clearing_residual: f64 = 0.0;
    let mut level_discrepancy: f64 = 0.0;
    for i in 0..n {
        let d = market.demand.eval(grid.time(i));
        clearing_residual = clearing_residual.max((d - market.c0 - c * price[i] - response.withdrawal[i]).abs());
        level_discrepancy = level_discrepancy.max((level[i] - response.level[i]).abs());
    }
    Ok(DetEquilibrium {
        grid: *grid,
        constants: cst,
        x,
        price,
        withdrawal,
        level,
        withdrawal_discrepancy,
        level_discrepancy,
        clearing_residual,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitEntry {
    pub agents: f64,
    /// `max_t |P_t - (D_t - C0)/C1|`
    pub deviation_from_no_storage: f64,
    /// `max_t |dP/dt|` by forward differences.
    pub max_slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub price_scale: f64,
    pub entries: Vec<LimitEntry>,
    /// Deviation shrinks as `p` decreases along the ladder.
    pub deviation_monotone: bool,
    /// Slope shrinks as `p` increases along the ladder.
    pub slope_monotone: bool,
}

/// Small- and large-capacity limits over a ladder of aggregated agent counts.
///
/// `market.agent` is taken as the unit agent.
pub fn limit_checks(market: &DetMarket, grid: &TimeGrid, p_ladder: &[f64]) -> Result<LimitReport> {
    if p_ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("p_ladder", "must be strictly increasing"));
    }
    let mut entries = Vec::with_capacity(p_ladder.len());
    for &p in p_ladder {
        let m = market.with_agents(&market.agent, p)?;
        let eq = equilibrium_price(&m, grid)?;
        let deviation = eq
            .price
            .iter()
            .enumerate()
            .map(|(i, &pr)| (pr - m.no_storage_price(grid.time(i))).abs())
            .fold(0.0, f64::max);
        let slope = eq.price.windows(2).map(|w| ((w[1] - w[0]) / grid.dt()).abs()).fold(0.0, f64::max);
        entries.push(LimitEntry { agents: p, deviation_from_no_storage: deviation, max_slope: slope });
    }
    let deviation_monotone = entries.windows(2).all(|w| w[0].deviation_from_no_storage <= w[1].deviation_from_no_storage);
    let slope_monotone = entries.windows(2).all(|w| w[1].max_slope <= w[0].max_slope);
    Ok(LimitReport { price_scale: market.price_scale(grid), entries, deviation_monotone, slope_monotone })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TimeGrid {
        TimeGrid::new(24.0, 480).unwrap()
    }

    #[test]
    fn zero_price_zero_strategy() {
        let p = AgentParams::new(84.0, 7.0, 500.0, 0.0, 0.0).unwrap();
        let price = PriceTrajectory::from_fn(grid(), |_| 0.0).unwrap();
        assert_eq!(exogenous_c1(&price, &p).unwrap(), 0.0);
        let s = exogenous_strategy(&price, &p).unwrap();
        assert!(s.withdrawal.iter().chain(s.level.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn constant_price_c1_closed_form() {
        let p = AgentParams::new(84.0, 7.0, 500.0, 0.0, 0.0).unwrap();
        let price = PriceTrajectory::from_fn(grid(), |_| 50.0).unwrap();
        let w = (7.0f64 / 84.0).sqrt();
        let t = 24.0;
        let m = 50.0 / 168.0;
        let exact = (500.0 * m * (w * t).sinh() / w + 7.0 * m * ((w * t).cosh() - 1.0) / (w * w))
            / (500.0 * w * (w * t).sinh() + 7.0 * (w * t).cosh());
        let got = exogenous_c1(&price, &p).unwrap();
        assert!((got - exact).abs() < 1e-12 * exact.abs());
    }

    #[test]
    fn balanced_demand_gives_zero_price() {
        let mut m = DetMarket::calibrated(10_000.0).unwrap();
        m.demand = TimeFunction::Constant { value: m.c0 };
        let cst = equilibrium_constants(&m, &grid()).unwrap();
        assert_eq!(cst.a, 0.0);
        assert_eq!(cst.a_prime, 0.0);
        let eq = equilibrium_price(&m, &grid()).unwrap();
        assert!(eq.price.iter().all(|p| p.abs() < 1e-12));
        assert!(eq.withdrawal.iter().all(|q| q.abs() < 1e-9));
    }

    #[test]
    fn rejects_stochastic_agent() {
        let mut m = DetMarket::calibrated(1.0).unwrap();
        m.agent.rho = 0.1;
        assert!(m.validate().is_err());
        m.agent.rho = 0.0;
        m.c1 = 0.0;
        assert!(equilibrium_price(&m, &grid()).is_err());
    }

    #[test]
    fn omega_tilde_increases_toward_omega() {
        let base = DetMarket::calibrated(1.0).unwrap();
        let mut last = 0.0;
        for alpha in [1e-3, 1e-1, 1e1, 1e3, 1e5] {
            let mut m = base.clone();
            m.agent.alpha = alpha;
            m.agent.beta = alpha / 12.0;
            let c = equilibrium_constants(&m, &grid()).unwrap();
            assert!(c.omega_tilde > last && c.omega_tilde < c.omega);
            last = c.omega_tilde;
        }
        assert!((last - (1.0f64 / 12.0).sqrt()).abs() < 1e-4);
    }
}
