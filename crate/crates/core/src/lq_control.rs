//! Closed-loop optimal control of a price-taking storage agent.
//!
//! The agent withdraws at rate `q` from a level `Q` with
//! `dQ = (-q + kappa) dt + rho dW + jumps` and minimises
//! `E[∫ alpha/2 (q - P/(2 alpha))^2 + beta/2 (Q - Q0)^2 dt + gamma/2 (Q_T - Q0)^2]`.
//! The optimum is the feedback
//! `q* = omega f(t) (Q - Q0) - E[∫_t^T f1(t,s) (P_s/(2 alpha) - kappa_s) ds | F_t] + P_t/(2 alpha)`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{adaptive_gauss_legendre, gauss_legendre, PiecewiseLinear, TimeGrid, MAX_EXPONENT};

const STEP_TOL: f64 = 1e-12;
use crate::rng::{stream_rng, streams};
use crate::stochastics::OUModel;

/// A deterministic price curve: grid samples, linear in between.
pub type PriceTrajectory = PiecewiseLinear;

/// Distribution of jump sizes (MWh).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarkDistribution {
    Constant { value: f64 },
    Normal { mean: f64, std: f64 },
    /// Signed exponential: `sign * Exp(mean)`.
    Exponential { mean: f64, sign: f64 },
}

impl MarkDistribution {
    pub fn mean(&self) -> f64 {
        match *self {
            MarkDistribution::Constant { value } => value,
            MarkDistribution::Normal { mean, .. } => mean,
            MarkDistribution::Exponential { mean, sign } => mean * sign.signum(),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            MarkDistribution::Constant { value } => value,
            MarkDistribution::Normal { mean, std } => Normal::new(mean, std).map(|d| d.sample(rng)).unwrap_or(mean),
            MarkDistribution::Exponential { mean, sign } => {
                Exp::new(1.0 / mean).map(|d| d.sample(rng)).unwrap_or(0.0) * sign.signum()
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            MarkDistribution::Constant { value } => value.is_finite(),
            MarkDistribution::Normal { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            MarkDistribution::Exponential { mean, sign } => mean.is_finite() && mean > 0.0 && sign != 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param("marks", format!("invalid mark distribution {self:?}")))
        }
    }
}

/// Compound-Poisson shocks on the storage level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpSpec {
    /// Jumps per hour.
    pub intensity: f64,
    pub marks: MarkDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentParams {
    /// Withdrawal cost curvature (€·h/MWh²).
    pub alpha: f64,
    /// Holding cost curvature (€/MWh²/h).
    pub beta: f64,
    /// Terminal penalty curvature (€/MWh²).
    pub gamma: f64,
    /// Brownian exposure of the level (MWh/√h).
    #[serde(default)]
    pub rho: f64,
    /// Reference level (MWh); also the initial level.
    #[serde(default)]
    pub q0_bar: f64,
    /// External supply feeding the storage (MW); zero when absent.
    #[serde(default)]
    pub kappa: Option<OUModel>,
    #[serde(default)]
    pub jumps: Option<JumpSpec>,
}

impl AgentParams {
    pub fn new(alpha: f64, beta: f64, gamma: f64, rho: f64, q0_bar: f64) -> Result<Self> {
        let p = Self { alpha, beta, gamma, rho, q0_bar, kappa: None, jumps: None };
        p.validate()?;
        Ok(p)
    }

    /// Representative 1 MWh storage unit: alpha = 84, beta = 7, gamma = 500,
    /// rho = 0.01, reference level 0.5 MWh.
    pub fn representative_unit() -> Self {
        Self { alpha: 84.0, beta: 7.0, gamma: 500.0, rho: 0.01, q0_bar: 0.5, kappa: None, jumps: None }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !self.rho.is_finite() {
            return Err(Error::param("rho", "must be finite"));
        }
        if !self.q0_bar.is_finite() {
            return Err(Error::param("q0_bar", "must be finite"));
        }
        if let Some(k) = &self.kappa {
            k.validate()?;
        }
        if let Some(j) = &self.jumps {
            if !(j.intensity.is_finite() && j.intensity >= 0.0) {
                return Err(Error::param("intensity", "must be finite and >= 0"));
            }
            j.marks.validate()?;
        }
        Ok(())
    }

    /// Parameters `(alpha/p, beta/p, gamma/p)` with everything else unchanged.
    pub fn scaled(&self, p: f64) -> Result<Self> {
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::param("p", format!("scale must be finite and > 0, got {p}")));
        }
        Ok(Self { alpha: self.alpha / p, beta: self.beta / p, gamma: self.gamma / p, ..self.clone() })
    }

    pub fn coefficients(&self, horizon: f64) -> Result<ControlCoefficients> {
        ControlCoefficients::new(self, horizon)
    }

    /// Slope of the myopic response `P / (2 alpha)`.
    pub fn price_sensitivity(&self) -> f64 {
        1.0 / (2.0 * self.alpha)
    }
}

/// `p` identical agents behave as one agent with `(alpha/p, beta/p, gamma/p)`,
/// `rho = sqrt(sum rho_i^2)` and the summed reference level.
///
/// `rhos` lists the individual exposures; when empty, every agent uses `base.rho`.
pub fn aggregate_agents(p: f64, base: &AgentParams, rhos: &[f64]) -> Result<AgentParams> {
    if !(p.is_finite() && p > 0.0) {
        return Err(Error::param("p", format!("agent count must be > 0, got {p}")));
    }
    if base.kappa.is_some() || base.jumps.is_some() {
        return Err(Error::param("base", "aggregation requires agents without external supply or jumps"));
    }
    let rho = if rhos.is_empty() {
        base.rho * p.sqrt()
    } else {
        if (rhos.len() as f64 - p).abs() > 0.0 {
            return Err(Error::LengthMismatch { expected: p as usize, got: rhos.len() });
        }
        rhos.iter().map(|r| r * r).sum::<f64>().sqrt()
    };
    let mut agg = base.scaled(p)?;
    agg.rho = rho;
    agg.q0_bar = base.q0_bar * p;
    Ok(agg)
}

/// Time-dependent feedback coefficients on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCoefficients {
    /// `sqrt(beta/alpha)` (1/h).
    pub omega: f64,
    /// `(sqrt(alpha beta) - gamma) / (sqrt(alpha beta) + gamma)`.
    pub u: f64,
    /// Horizon `T` (h).
    pub horizon: f64,
    one_plus_u: f64,
    one_minus_u: f64,
    sqrt_ab: f64,
}

impl ControlCoefficients {
    pub fn new(params: &AgentParams, horizon: f64) -> Result<Self> {
        params.validate()?;
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("horizon", format!("must be > 0, got {horizon}")));
        }
        let sqrt_ab = (params.alpha * params.beta).sqrt();
        let omega = (params.beta / params.alpha).sqrt();
        if omega * horizon > MAX_EXPONENT {
            return Err(Error::param("omega", format!("omega*T = {} exceeds overflow guard", omega * horizon)));
        }
        let s = sqrt_ab + params.gamma;
        Ok(Self {
            omega,
            u: (sqrt_ab - params.gamma) / s,
            horizon,
            one_plus_u: 2.0 * sqrt_ab / s,
            one_minus_u: 2.0 * params.gamma / s,
            sqrt_ab,
        })
    }

    fn check(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.horizon;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::Domain { t, lo: 0.0, hi: self.horizon });
        }
        Ok(())
    }

    /// `1 + u e^{-2 omega (T-t)}`, written so that it stays accurate when `u ≈ -1`.
    pub fn denominator(&self, t: f64) -> f64 {
        self.one_plus_u + self.u * (-2.0 * self.omega * (self.horizon - t)).exp_m1()
    }

    fn numerator(&self, t: f64) -> f64 {
        self.one_minus_u - self.u * (-2.0 * self.omega * (self.horizon - t)).exp_m1()
    }

    pub(crate) fn f_unchecked(&self, t: f64) -> f64 {
        self.numerator(t) / self.denominator(t)
    }

    /// `f(t,T) = (1 - u e^{-2ω(T-t)}) / (1 + u e^{-2ω(T-t)})`.
    pub fn f(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.f_unchecked(t))
    }

    pub(crate) fn f1_unchecked(&self, t: f64, s: f64) -> f64 {
        let w = self.omega;
        w * ((-w * (s - t)).exp() - self.u * (-w * (2.0 * self.horizon - s - t)).exp()) / self.denominator(t)
    }

    /// `f1(t,s,T) = ω (e^{-ω(s-t)} - u e^{-ω(2T-s-t)}) / (1 + u e^{-2ω(T-t)})`.
    pub fn f1(&self, t: f64, s: f64) -> Result<f64> {
        self.check(t)?;
        self.check(s)?;
        if s < t {
            return Err(Error::Domain { t: s, lo: t, hi: self.horizon });
        }
        Ok(self.f1_unchecked(t, s))
    }

    /// Riccati solution `y_t = sqrt(alpha beta)/2 * f(t,T)`, with `y_T = gamma/2`.
    pub fn riccati_y(&self, t: f64) -> Result<f64> {
        Ok(0.5 * self.sqrt_ab * self.f(t)?)
    }

    /// `F1(t) = ω e^{ωt} / (1 + u e^{-2ω(T-t)})`.
    pub fn big_f1(&self, t: f64) -> f64 {
        self.omega * (self.omega * t).exp() / self.denominator(t)
    }

    /// `F2(t) = u ω e^{-ω(2T-t)} / (1 + u e^{-2ω(T-t)})`.
    pub fn big_f2(&self, t: f64) -> f64 {
        self.u * self.omega * (-self.omega * (2.0 * self.horizon - t)).exp() / self.denominator(t)
    }

    /// `∫_t^T f1(t,s) e^{-decay (s-t)} ds` in closed form.
    pub fn kernel_integral(&self, t: f64, decay: f64) -> f64 {
        let w = self.omega;
        let tau = self.horizon - t;
        let first = if (w + decay) * tau == 0.0 { tau } else { -(-(w + decay) * tau).exp_m1() / (w + decay) };
        let d = w - decay;
        let second = if (d * tau).abs() < 1e-12 { tau } else { (d * tau).exp_m1() / d };
        w * (first - self.u * (-2.0 * w * tau).exp() * second) / self.denominator(t)
    }

    /// Fundamental solution of `Z' = -ω f(t) Z` from `s` to `t >= s`.
    pub fn transition(&self, t: f64, s: f64) -> f64 {
        (-self.omega * (t - s)).exp() * self.denominator(t) / self.denominator(s)
    }
}

/// Closed-loop withdrawal rate given the conditional-expectation term
/// `E[∫_t^T f1(t,s) (P_s/(2 alpha) - kappa_s) ds | F_t]`.
pub fn optimal_control_step(
    level: f64,
    price: f64,
    cond_exp_term: f64,
    t: f64,
    params: &AgentParams,
    coeffs: &ControlCoefficients,
) -> Result<f64> {
    let f = coeffs.f(t)?;
    Ok(coeffs.omega * f * (level - params.q0_bar) - cond_exp_term + price / (2.0 * params.alpha))
}

/// `∫_t^T f1(t,s) P(s)/(2 alpha) ds` for a deterministic piecewise-linear price.
///
/// Uses `f1(t,s) = ω/den(t) [e^{-ω(s-t)} - u e^{-ω(T-t)} e^{-ω(T-s)}]` and two
/// backward recursions that stay bounded for any `ωT`.
#[derive(Debug, Clone)]
pub struct PriceForcing<'a> {
    coeffs: ControlCoefficients,
    price: &'a PriceTrajectory,
    scale: f64,
    /// `∫_{t_k}^T e^{-ω(r-t_k)} P(r) dr`
    decaying: Vec<f64>,
    /// `∫_{t_k}^T e^{-ω(T-r)} P(r) dr`
    terminal: Vec<f64>,
}

impl<'a> PriceForcing<'a> {
    pub fn new(coeffs: ControlCoefficients, alpha: f64, price: &'a PriceTrajectory) -> Self {
        let grid = *price.grid();
        let w = coeffs.omega;
        let tt = coeffs.horizon;
        let n = grid.len();
        let mut decaying = vec![0.0; n];
        let mut terminal = vec![0.0; n];
        for k in (0..grid.steps()).rev() {
            let (a, b) = (grid.time(k), grid.time(k + 1));
            decaying[k] = (-w * (b - a)).exp() * decaying[k + 1]
                + gauss_legendre(|r| (-w * (r - a)).exp() * price.eval(r), a, b);
            terminal[k] = terminal[k + 1] + gauss_legendre(|r| (-w * (tt - r)).exp() * price.eval(r), a, b);
        }
        Self { coeffs, price, scale: 1.0 / (2.0 * alpha), decaying, terminal }
    }

    pub fn at_node(&self, k: usize) -> f64 {
        let t = self.price.grid().time(k);
        self.combine(t, self.decaying[k], self.terminal[k])
    }

    pub fn at(&self, s: f64) -> f64 {
        let grid = self.price.grid();
        let k = grid.interval_of(s);
        let b = grid.time(k + 1);
        let w = self.coeffs.omega;
        let tt = self.coeffs.horizon;
        let dec = (-w * (b - s)).exp() * self.decaying[k + 1]
            + gauss_legendre(|r| (-w * (r - s)).exp() * self.price.eval(r), s, b);
        let term = self.terminal[k + 1] + gauss_legendre(|r| (-w * (tt - r)).exp() * self.price.eval(r), s, b);
        self.combine(s, dec, term)
    }

    fn combine(&self, t: f64, dec: f64, term: f64) -> f64 {
        let c = &self.coeffs;
        let w = c.omega;
        self.scale * w * (dec - c.u * (-w * (c.horizon - t)).exp() * term) / c.denominator(t)
    }
}

/// Left-endpoint quadrature of `∫_{t_k}^T f1(t_k,s) P_s/(2 alpha) ds` on the grid.
pub fn left_endpoint_forcing(coeffs: &ControlCoefficients, alpha: f64, price: &PriceTrajectory) -> Vec<f64> {
    let grid = price.grid();
    let h = grid.dt();
    let p = price.values();
    (0..grid.len())
        .map(|k| {
            let t = grid.time(k);
            (k..grid.steps()).map(|m| coeffs.f1_unchecked(t, grid.time(m)) * p[m]).sum::<f64>() * h / (2.0 * alpha)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AgentScheme {
    /// Exact propagation of the linear feedback over each step, forcing
    /// integrated by Gauss–Legendre quadrature.
    #[default]
    Exponential,
    /// Euler–Maruyama with left-endpoint quadrature of the forcing integral.
    EulerMaruyama,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimulationOptions {
    pub scheme: AgentScheme,
    /// Index of the random stream (one per simulated path).
    pub path_index: u64,
}

/// Controlled trajectory on the price grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPath {
    pub grid: TimeGrid,
    /// Withdrawal rate `q*` (MW) at each grid point.
    pub withdrawal: Vec<f64>,
    /// Storage level `Q` (MWh) at each grid point.
    pub level: Vec<f64>,
    /// External supply `kappa` (MW) at each grid point.
    pub kappa: Vec<f64>,
}

fn kappa_forcing(coeffs: &ControlCoefficients, kappa: Option<&OUModel>, t: f64, k_now: f64) -> f64 {
    match kappa {
        None => 0.0,
        Some(m) => m.mu * coeffs.kernel_integral(t, 0.0) + (k_now - m.mu) * coeffs.kernel_integral(t, m.theta),
    }
}

/// Forward simulation of the closed-loop level for a deterministic price.
///
/// With `rho = 0`, no jumps and no external supply the output is deterministic
/// and independent of the seed.
pub fn simulate_agent(
    params: &AgentParams,
    price: &PriceTrajectory,
    seed: u64,
    opts: &SimulationOptions,
) -> Result<AgentPath> {
    params.validate()?;
    let grid = *price.grid();
    let coeffs = params.coefficients(grid.horizon())?;
    let n = grid.len();
    let h = grid.dt();
    let beta_over = params.price_sensitivity();

    let mut kappa = vec![0.0; n];
    if let Some(m) = &params.kappa {
        let mut rng = stream_rng(seed, streams::AGENT_KAPPA, opts.path_index);
        kappa[0] = m.x0;
        for i in 1..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            kappa[i] = m.step(kappa[i - 1], h, z);
        }
    }

    let mut brownian = stream_rng(seed, streams::AGENT_BROWNIAN, opts.path_index);
    let mut jump_rng = stream_rng(seed, streams::AGENT_JUMPS, opts.path_index);

    let forcing_nodes: Vec<f64>;
    let exact = PriceForcing::new(coeffs, params.alpha, price);
    match opts.scheme {
        AgentScheme::Exponential => forcing_nodes = (0..n).map(|k| exact.at_node(k)).collect(),
        AgentScheme::EulerMaruyama => forcing_nodes = left_endpoint_forcing(&coeffs, params.alpha, price),
    }

    let mut level = vec![0.0; n];
    let mut withdrawal = vec![0.0; n];
    let mut z = 0.0; // level minus reference
    level[0] = params.q0_bar;
    for k in 0..n {
        let t = grid.time(k);
        let i_kappa = kappa_forcing(&coeffs, params.kappa.as_ref(), t, kappa[k]);
        withdrawal[k] = coeffs.omega * coeffs.f_unchecked(t) * z - forcing_nodes[k] + i_kappa
            + price.values()[k] * beta_over;
        if k + 1 == n {
            break;
        }
        let (a, b) = (t, grid.time(k + 1));
        let noise: f64 = StandardNormal.sample(&mut brownian);
        let mut next = match opts.scheme {
            AgentScheme::EulerMaruyama => z + h * (-withdrawal[k] + kappa[k]) + params.rho * h.sqrt() * noise,
            AgentScheme::Exponential => {
                let drift = adaptive_gauss_legendre(
                    |s| {
                        coeffs.transition(b, s)
                            * (exact.at(s) - price.eval(s) * beta_over + kappa[k]
                                - kappa_forcing(&coeffs, params.kappa.as_ref(), s, kappa[k]))
                    },
                    a,
                    b,
                    STEP_TOL,
                );
                let var = adaptive_gauss_legendre(|s| coeffs.transition(b, s).powi(2), a, b, STEP_TOL);
                coeffs.transition(b, a) * z + drift + params.rho * var.sqrt() * noise
            }
        };
        if let Some(j) = &params.jumps {
            if j.intensity > 0.0 {
                let count = Poisson::new(j.intensity * h).map(|d| d.sample(&mut jump_rng)).unwrap_or(0.0) as usize;
                let compensator = j.intensity * j.marks.mean();
                match opts.scheme {
                    AgentScheme::EulerMaruyama => {
                        for _ in 0..count {
                            next += j.marks.sample(&mut jump_rng);
                        }
                        next -= compensator * h;
                    }
                    AgentScheme::Exponential => {
                        for _ in 0..count {
                            let tau = a + (b - a) * jump_rng.random::<f64>();
                            next += coeffs.transition(b, tau) * j.marks.sample(&mut jump_rng);
                        }
                        next -= compensator * adaptive_gauss_legendre(|s| coeffs.transition(b, s), a, b, STEP_TOL);
                    }
                }
            }
        }
        z = next;
        level[k + 1] = params.q0_bar + z;
    }
    Ok(AgentPath { grid, withdrawal, level, kappa })
}
