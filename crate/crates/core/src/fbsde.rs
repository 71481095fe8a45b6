//! Stochastic market equilibrium with several storage agents.
//!
//! Each agent `j` carries two backward components
//! `Y¹_t = E[∫_t^T e^{-ω s}(P_s/(2α) - κ_s) ds | F_t]` and
//! `Y²_t = E[∫_t^T e^{ω s}(P_s/(2α) - κ_s) ds | F_t]`, so that its optimal rate is
//! `q = ω f (Q - Q0) + P/(2α) - F₁ Y¹ + F₂ Y²`. Clearing `D = C(P) + Σ q` then
//! gives the price as a function of the forward state and the `Y`s.
//!
//! The coupled system is solved by Picard iteration on the decoupling field:
//! forward simulation under the previous field, then a backward pass where
//! conditional expectations are least-squares regressions on the state.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{adaptive_gauss_legendre, TimeFunction, TimeGrid};
use crate::lq_control::{aggregate_agents, AgentParams, ControlCoefficients};
use crate::regression::{regress, StepFit};
use crate::rng::{stream_rng, streams};
use crate::stochastics::{simulate_ou_raw, warn_fast_reversion, OUModel, PathSet};

/// Role of a demand component, used by scenario scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Consumption,
    Renewables,
    #[default]
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandComponent {
    pub label: String,
    #[serde(default)]
    pub kind: ComponentKind,
    /// Signed multiplier, e.g. `-1` for renewable production.
    pub weight: f64,
    /// Deterministic part (MW).
    #[serde(default = "TimeFunction::zero")]
    pub profile: TimeFunction,
    /// Stochastic part (MW).
    pub ou: OUModel,
}

/// Residual demand `D_t = Σ_c weight_c (profile_c(t) + X^c_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandModel {
    pub components: Vec<DemandComponent>,
}

impl DemandModel {
    /// Consumption minus renewables, both with the calibrated OU parameters and
    /// flat profiles, scaled by the given multipliers.
    pub fn calibrated(demand_multiplier: f64, renewable_multiplier: f64) -> Self {
        Self {
            components: vec![
                DemandComponent {
                    label: "consumption".into(),
                    kind: ComponentKind::Consumption,
                    weight: demand_multiplier,
                    profile: TimeFunction::zero(),
                    ou: OUModel::calibrated_consumption(),
                },
                DemandComponent {
                    label: "renewables".into(),
                    kind: ComponentKind::Renewables,
                    weight: -renewable_multiplier,
                    profile: TimeFunction::zero(),
                    ou: OUModel::calibrated_renewables(),
                },
            ],
        }
    }

    /// A single noiseless component following `f`.
    pub fn deterministic(f: TimeFunction) -> Self {
        Self {
            components: vec![DemandComponent {
                label: "demand".into(),
                kind: ComponentKind::Consumption,
                weight: 1.0,
                profile: f,
                ou: OUModel { theta: 0.0, mu: 0.0, sigma: 0.0, x0: 0.0 },
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::param("demand", "needs at least one component"));
        }
        for c in &self.components {
            if !c.weight.is_finite() {
                return Err(Error::param("weight", format!("component `{}` has a non-finite weight", c.label)));
            }
            c.profile.validate()?;
            c.ou.validate()?;
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.components.iter().all(|c| c.ou.sigma == 0.0)
    }

    /// `E[D_t]` from the initial values.
    pub fn mean(&self, t: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * (c.profile.eval(t) + c.ou.conditional_mean(c.ou.x0, t)))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochMarket {
    pub c0: f64,
    pub c1: f64,
    /// Lower price cap (€/MWh); none means unbounded.
    #[serde(default)]
    pub price_floor: Option<f64>,
    /// Upper price cap (€/MWh); none means unbounded.
    #[serde(default)]
    pub price_cap: Option<f64>,
    pub agents: Vec<AgentParams>,
    pub demand: DemandModel,
    pub horizon: f64,
}

/// Unit storage agent: 1 MWh with `alpha = 84, beta = 7, gamma = 500`,
/// `rho = 0.01`, reference level 0.5 MWh.
pub fn unit_agent() -> AgentParams {
    AgentParams::representative_unit()
}

impl StochMarket {
    /// Calibrated market with `p` unit agents (p MWh of storage) aggregated
    /// into one, or no storage when `p == 0`.
    pub fn calibrated(p: f64) -> Result<Self> {
        let agents = if p > 0.0 { vec![aggregate_agents(p, &unit_agent(), &[])?] } else { Vec::new() };
        let m = Self {
            c0: -7546.0,
            c1: 151.77,
            price_floor: None,
            price_cap: None,
            agents,
            demand: DemandModel::calibrated(1.0, 1.0),
            horizon: 24.0,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.c0.is_finite() {
            return Err(Error::param("c0", "must be finite"));
        }
        if !(self.c1.is_finite() && self.c1 > 0.0) {
            return Err(Error::param("c1", format!("supply slope must be > 0 for an invertible price map, got {}", self.c1)));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::param("horizon", "must be > 0"));
        }
        let (lo, hi) = self.caps();
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(Error::param("price_cap", format!("need floor < cap, got [{lo}, {hi}]")));
        }
        for a in &self.agents {
            a.validate()?;
            if a.jumps.is_some() {
                return Err(Error::param("jumps", "jump terms are not supported in the equilibrium solver"));
            }
            ControlCoefficients::new(a, self.horizon)?;
        }
        self.demand.validate()
    }

    pub fn caps(&self) -> (f64, f64) {
        (self.price_floor.unwrap_or(f64::NEG_INFINITY), self.price_cap.unwrap_or(f64::INFINITY))
    }

    /// Slope of `L(x) = C(x) + x Σ 1/(2α_j)`.
    pub fn price_map_slope(&self) -> f64 {
        self.c1 + self.agents.iter().map(|a| 1.0 / (2.0 * a.alpha)).sum::<f64>()
    }

    /// `max_t |(E[D_t] - C0)/C1|` on the grid.
    pub fn price_scale(&self, grid: &TimeGrid) -> f64 {
        grid.times().iter().map(|&t| ((self.demand.mean(t) - self.c0) / self.c1).abs()).fold(0.0, f64::max)
    }

    /// Same market with the agent list replaced.
    pub fn with_agents(&self, agents: Vec<AgentParams>) -> Result<Self> {
        let m = Self { agents, ..self.clone() };
        m.validate()?;
        Ok(m)
    }

    /// No noise anywhere: demand, storage levels and external supplies.
    pub fn is_noiseless(&self) -> bool {
        self.demand.is_deterministic()
            && self.agents.iter().all(|a| a.rho == 0.0 && a.kappa.as_ref().is_none_or(|k| k.sigma == 0.0))
    }
}

/// Time-dependent coefficients of one agent on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardCoefficients {
    pub omega: f64,
    pub u: f64,
    /// `ω f(t_i, T)`
    pub omega_f: Vec<f64>,
    /// `F₁(t_i, T)`
    pub f1: Vec<f64>,
    /// `F₂(t_i, T)`
    pub f2: Vec<f64>,
    /// `e^{-ω t_i}`
    pub discount: Vec<f64>,
    /// `e^{ω t_i}`
    pub growth: Vec<f64>,
}

impl BackwardCoefficients {
    pub fn new(agent: &AgentParams, grid: &TimeGrid) -> Result<Self> {
        let c = ControlCoefficients::new(agent, grid.horizon())?;
        let t = grid.times();
        Ok(Self {
            omega: c.omega,
            u: c.u,
            omega_f: t.iter().map(|&s| c.omega * c.f(s).unwrap_or(f64::NAN)).collect(),
            f1: t.iter().map(|&s| c.big_f1(s)).collect(),
            f2: t.iter().map(|&s| c.big_f2(s)).collect(),
            discount: t.iter().map(|&s| (-c.omega * s).exp()).collect(),
            growth: t.iter().map(|&s| (c.omega * s).exp()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler forward step and `Y_i = E[Y_{i+1} + h f(t_i, X_i, Y_{i+1}) | F_i]`.
    Explicit,
    /// Heun forward step and trapezoidal driver
    /// `Y_i = E[Y_{i+1} + h/2 (g_i + g_{i+1}) | F_i]` with forward-pass prices.
    #[default]
    Trapezoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbsdeConfig {
    pub steps: usize,
    pub paths: usize,
    pub max_iterations: usize,
    /// Stop when the sup price change between iterations is below
    /// `tolerance * price_scale`.
    pub tolerance: f64,
    pub basis_degree: usize,
    #[serde(default)]
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for FbsdeConfig {
    fn default() -> Self {
        Self { steps: 96, paths: 4000, max_iterations: 20, tolerance: 1e-3, basis_degree: 2, scheme: Scheme::Trapezoidal, seed: 0 }
    }
}

impl FbsdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::param("steps", "must be >= 1"));
        }
        if self.paths == 0 {
            return Err(Error::param("paths", "must be >= 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be >= 1"));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::param("tolerance", "must be > 0"));
        }
        if self.basis_degree > 4 {
            return Err(Error::param("basis_degree", "must be <= 4"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostic {
    pub iteration: usize,
    pub basis_degree: usize,
    /// `sup |ΔP|` implied by the change of the decoupling field (€/MWh).
    pub sup_change: f64,
    /// Worst relative violation of the normal equations in the backward pass.
    pub normal_residual: f64,
}

#[derive(Debug, Clone)]
pub struct FbsdeSolution {
    pub grid: TimeGrid,
    pub config: FbsdeConfig,
    /// Residual demand `D`.
    pub demand: PathSet,
    /// Stochastic part of every demand component.
    pub components: Vec<PathSet>,
    pub kappa: Vec<PathSet>,
    pub levels: Vec<PathSet>,
    pub y1: Vec<PathSet>,
    pub y2: Vec<PathSet>,
    pub price: PathSet,
    /// Decoupling field per step, targets ordered `(Y¹_0, Y²_0, Y¹_1, ...)`.
    pub fields: Vec<StepFit>,
    pub coefficients: Vec<BackwardCoefficients>,
    pub diagnostics: Vec<IterationDiagnostic>,
    pub converged: bool,
    pub price_scale: f64,
    /// Fraction of (path, step) pairs where a price cap binds.
    pub cap_binding_frequency: f64,
    /// Per agent and step, `(1/h) mean(Y¹_{i+1} ΔW_{i+1})` and the `Y²` analogue.
    pub z_means: Vec<[Vec<f64>; 2]>,
}

impl FbsdeSolution {
    pub fn iterations(&self) -> usize {
        self.diagnostics.len()
    }

    /// State vector of path `p` at step `i`: demand factors, supplies, levels.
    pub fn state(&self, p: usize, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.components.iter().map(|c| c.get(p, i)));
        out.extend(self.kappa.iter().map(|c| c.get(p, i)));
        out.extend(self.levels.iter().map(|c| c.get(p, i)));
    }
}

/// `L⁻¹(d - Σ_j [ω f (Q - Q0) - F₁ Y¹ + F₂ Y²])` clamped to the caps.
/// Returns the capped price and the uncapped value.
#[allow(clippy::too_many_arguments)]
pub fn price_map(
    i: usize,
    levels: &[f64],
    demand: f64,
    y1: &[f64],
    y2: &[f64],
    market: &StochMarket,
    coeffs: &[BackwardCoefficients],
) -> (f64, f64) {
    let mut arg = demand - market.c0;
    for (j, (a, c)) in market.agents.iter().zip(coeffs).enumerate() {
        arg -= c.omega_f[i] * (levels[j] - a.q0_bar) - c.f1[i] * y1[j] + c.f2[i] * y2[j];
    }
    let raw = arg / market.price_map_slope();
    let (lo, hi) = market.caps();
    (raw.clamp(lo, hi), raw)
}

fn withdrawal(i: usize, agent: &AgentParams, c: &BackwardCoefficients, level: f64, price: f64, y1: f64, y2: f64) -> f64 {
    c.omega_f[i] * (level - agent.q0_bar) + price / (2.0 * agent.alpha) - c.f1[i] * y1 + c.f2[i] * y2
}

/// Exogenous inputs shared by every Picard iteration.
struct Drivers {
    grid: TimeGrid,
    paths: usize,
    components: Vec<Vec<f64>>,
    demand: Vec<f64>,
    kappa: Vec<Vec<f64>>,
    /// Standard normals driving each agent's level, `paths × steps`.
    noise: Vec<Vec<f64>>,
}

impl Drivers {
    fn new(market: &StochMarket, grid: &TimeGrid, paths: usize, seed: u64) -> Self {
        let n = grid.len();
        let times = grid.times();
        let components: Vec<Vec<f64>> = market
            .demand
            .components
            .iter()
            .enumerate()
            .map(|(c, comp)| {
                warn_fast_reversion(&comp.ou, grid, &comp.label);
                simulate_ou_raw(&comp.ou, grid, paths, seed, streams::DEMAND_BASE + c as u64)
            })
            .collect();
        let mut demand = vec![0.0; paths * n];
        for (comp, values) in market.demand.components.iter().zip(&components) {
            let profile: Vec<f64> = times.iter().map(|&t| comp.profile.eval(t)).collect();
            for (k, d) in demand.iter_mut().enumerate() {
                *d += comp.weight * (profile[k % n] + values[k]);
            }
        }
        let kappa = market
            .agents
            .iter()
            .enumerate()
            .map(|(j, a)| match &a.kappa {
                Some(m) => simulate_ou_raw(m, grid, paths, seed, streams::KAPPA_BASE + j as u64),
                None => vec![0.0; paths * n],
            })
            .collect();
        let steps = grid.steps();
        let noise = (0..market.agents.len())
            .map(|j| {
                let mut v = vec![0.0; paths * steps];
                v.par_chunks_mut(steps).enumerate().for_each(|(p, row)| {
                    let mut rng = stream_rng(seed, streams::STORAGE_BASE + j as u64, p as u64);
                    for x in row.iter_mut() {
                        *x = StandardNormal.sample(&mut rng);
                    }
                });
                v
            })
            .collect();
        Self { grid: *grid, paths, components, demand, kappa, noise }
    }

    fn state(&self, p: usize, i: usize, levels: &[f64], out: &mut Vec<f64>) {
        let n = self.grid.len();
        out.clear();
        out.extend(self.components.iter().map(|c| c[p * n + i]));
        out.extend(self.kappa.iter().map(|k| k[p * n + i]));
        out.extend_from_slice(levels);
    }
}

struct ForwardPath {
    levels: Vec<Vec<f64>>,
    price: Vec<f64>,
    /// Previous field evaluated along the path, `(Y¹_j, Y²_j)` interleaved per step.
    field: Vec<Vec<f64>>,
    capped: usize,
}

struct Forward {
    levels: Vec<Vec<f64>>,
    price: Vec<f64>,
    field: Vec<Vec<f64>>,
    capped: usize,
}

fn forward_path(
    p: usize,
    market: &StochMarket,
    coeffs: &[BackwardCoefficients],
    drv: &Drivers,
    fields: &[StepFit],
    scheme: Scheme,
) -> ForwardPath {
    let grid = drv.grid;
    let n = grid.len();
    let h = grid.dt();
    let na = market.agents.len();
    let mut q_lvl: Vec<f64> = market.agents.iter().map(|a| a.q0_bar).collect();
    let mut out = ForwardPath {
        levels: vec![vec![0.0; n]; na],
        price: vec![0.0; n],
        field: vec![vec![0.0; n]; 2 * na],
        capped: 0,
    };
    let mut state = Vec::new();
    let mut buf = Vec::new();
    let mut yv = vec![0.0; 2 * na];
    let mut y1 = vec![0.0; na];
    let mut y2 = vec![0.0; na];

    let mut eval = |i: usize, levels: &[f64], state: &mut Vec<f64>, yv: &mut [f64], y1: &mut [f64], y2: &mut [f64]| {
        drv.state(p, i, levels, state);
        fields[i].eval(state, &mut buf, yv);
        for j in 0..na {
            y1[j] = yv[2 * j];
            y2[j] = yv[2 * j + 1];
        }
        let (price, raw) = price_map(i, levels, drv.demand[p * n + i], y1, y2, market, coeffs);
        let drift: Vec<f64> = (0..na)
            .map(|j| {
                -withdrawal(i, &market.agents[j], &coeffs[j], levels[j], price, y1[j], y2[j]) + drv.kappa[j][p * n + i]
            })
            .collect();
        (price, raw, drift)
    };

    for i in 0..n {
        let (price, raw, drift) = eval(i, &q_lvl, &mut state, &mut yv, &mut y1, &mut y2);
        out.price[i] = price;
        if price != raw {
            out.capped += 1;
        }
        for j in 0..na {
            out.levels[j][i] = q_lvl[j];
            out.field[2 * j][i] = yv[2 * j];
            out.field[2 * j + 1][i] = yv[2 * j + 1];
        }
        if i + 1 == n {
            break;
        }
        let shocks: Vec<f64> = (0..na)
            .map(|j| market.agents[j].rho * h.sqrt() * drv.noise[j][p * (n - 1) + i])
            .collect();
        match scheme {
            Scheme::Explicit => {
                for j in 0..na {
                    q_lvl[j] += drift[j] * h + shocks[j];
                }
            }
            Scheme::Trapezoidal => {
                let predicted: Vec<f64> = (0..na).map(|j| q_lvl[j] + drift[j] * h + shocks[j]).collect();
                let (_, _, drift_next) = eval(i + 1, &predicted, &mut state, &mut yv, &mut y1, &mut y2);
                for j in 0..na {
                    q_lvl[j] += 0.5 * h * (drift[j] + drift_next[j]) + shocks[j];
                }
            }
        }
    }
    out
}

fn forward_pass(
    market: &StochMarket,
    coeffs: &[BackwardCoefficients],
    drv: &Drivers,
    fields: &[StepFit],
    scheme: Scheme,
) -> Forward {
    let n = drv.grid.len();
    let na = market.agents.len();
    let per_path: Vec<ForwardPath> =
        (0..drv.paths).into_par_iter().map(|p| forward_path(p, market, coeffs, drv, fields, scheme)).collect();
    let mut fw = Forward {
        levels: vec![vec![0.0; drv.paths * n]; na],
        price: vec![0.0; drv.paths * n],
        field: vec![vec![0.0; drv.paths * n]; 2 * na],
        capped: 0,
    };
    for (p, fp) in per_path.into_iter().enumerate() {
        let r = p * n..(p + 1) * n;
        fw.price[r.clone()].copy_from_slice(&fp.price);
        for j in 0..na {
            fw.levels[j][r.clone()].copy_from_slice(&fp.levels[j]);
        }
        for k in 0..2 * na {
            fw.field[k][r.clone()].copy_from_slice(&fp.field[k]);
        }
        fw.capped += fp.capped;
    }
    fw
}

struct Backward {
    fields: Vec<StepFit>,
    /// Fitted `(Y¹_j, Y²_j)` interleaved, `paths × len` each.
    fitted: Vec<Vec<f64>>,
    normal_residual: f64,
    z_means: Vec<[Vec<f64>; 2]>,
}

fn backward_pass(
    market: &StochMarket,
    coeffs: &[BackwardCoefficients],
    drv: &Drivers,
    fw: &Forward,
    degree: usize,
    scheme: Scheme,
) -> Result<Backward> {
    let grid = drv.grid;
    let n = grid.len();
    let h = grid.dt();
    let na = market.agents.len();
    let paths = drv.paths;
    let mut fields = vec![StepFit::zero(2 * na); n];
    let mut fitted = vec![vec![0.0; paths * n]; 2 * na];
    let mut normal_residual: f64 = 0.0;
    let mut z_means: Vec<[Vec<f64>; 2]> = (0..na).map(|_| [vec![0.0; n - 1], vec![0.0; n - 1]]).collect();

    let driver = |j: usize, p: usize, k: usize, price: f64| -> (f64, f64) {
        let a = &market.agents[j];
        let g = price / (2.0 * a.alpha) - drv.kappa[j][p * n + k];
        (coeffs[j].discount[k] * g, coeffs[j].growth[k] * g)
    };

    for i in (0..n - 1).rev() {
        let states: Vec<Vec<f64>> = (0..paths)
            .into_par_iter()
            .map_init(Vec::new, |buf, p| {
                let lv: Vec<f64> = (0..na).map(|j| fw.levels[j][p * n + i]).collect();
                drv.state(p, i, &lv, buf);
                buf.clone()
            })
            .collect();
        let targets: Vec<Vec<f64>> = match scheme {
            Scheme::Trapezoidal => {
                let mut t = vec![vec![0.0; paths]; 2 * na];
                for p in 0..paths {
                    for j in 0..na {
                        let (a0, b0) = driver(j, p, i, fw.price[p * n + i]);
                        let (a1, b1) = driver(j, p, i + 1, fw.price[p * n + i + 1]);
                        t[2 * j][p] = fitted[2 * j][p * n + i + 1] + 0.5 * h * (a0 + a1);
                        t[2 * j + 1][p] = fitted[2 * j + 1][p * n + i + 1] + 0.5 * h * (b0 + b1);
                    }
                }
                t
            }
            Scheme::Explicit => {
                let mut t = vec![vec![0.0; paths]; 2 * na];
                let mut y1 = vec![0.0; na];
                let mut y2 = vec![0.0; na];
                let mut lv = vec![0.0; na];
                for p in 0..paths {
                    for j in 0..na {
                        y1[j] = fitted[2 * j][p * n + i + 1];
                        y2[j] = fitted[2 * j + 1][p * n + i + 1];
                        lv[j] = fw.levels[j][p * n + i];
                    }
                    let (price, _) = price_map(i, &lv, drv.demand[p * n + i], &y1, &y2, market, coeffs);
                    for j in 0..na {
                        let (a0, b0) = driver(j, p, i, price);
                        t[2 * j][p] = y1[j] + h * a0;
                        t[2 * j + 1][p] = y2[j] + h * b0;
                    }
                }
                t
            }
        };
        for (j, agent) in market.agents.iter().enumerate() {
            if agent.rho != 0.0 {
                let steps = n - 1;
                for (k, z) in z_means[j].iter_mut().enumerate() {
                    let s: f64 = (0..paths)
                        .map(|p| fitted[2 * j + k][p * n + i + 1] * drv.noise[j][p * steps + i] * h.sqrt())
                        .sum();
                    z[i] = s / (paths as f64 * h);
                }
            }
        }
        let reg = regress(&states, &targets, degree, 0, i)?;
        normal_residual = normal_residual.max(reg.normal_residual);
        for (k, col) in reg.fitted.iter().enumerate() {
            for (p, v) in col.iter().enumerate() {
                fitted[k][p * n + i] = *v;
            }
        }
        fields[i] = reg.fit;
    }
    Ok(Backward { fields, fitted, normal_residual, z_means })
}

fn sup_price_change(
    market: &StochMarket,
    coeffs: &[BackwardCoefficients],
    n: usize,
    old: &[Vec<f64>],
    new: &[Vec<f64>],
) -> f64 {
    let slope = market.price_map_slope();
    let total = old.first().map_or(0, |v| v.len());
    (0..total)
        .into_par_iter()
        .map(|k| {
            let i = k % n;
            let s: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(j, c)| {
                    -c.f1[i] * (new[2 * j][k] - old[2 * j][k]) + c.f2[i] * (new[2 * j + 1][k] - old[2 * j + 1][k])
                })
                .sum();
            let v = (s / slope).abs();
            if v.is_nan() { f64::INFINITY } else { v }
        })
        .reduce(|| 0.0, f64::max)
}

const WARM_START_FACTOR: f64 = 10.0;

/// Picard iteration on the decoupling field.
///
/// Iterations start with affine fields and switch to `basis_degree` once the
/// price change is within ten times the tolerance.
///
/// A run that does not reach the tolerance within `max_iterations` is still
/// returned, with `converged == false`.
pub fn solve(market: &StochMarket, config: &FbsdeConfig) -> Result<FbsdeSolution> {
    market.validate()?;
    config.validate()?;
    let grid = TimeGrid::new(market.horizon, config.steps)?;
    let n = grid.len();
    let paths = config.paths;
    let na = market.agents.len();
    let coeffs: Vec<BackwardCoefficients> =
        market.agents.iter().map(|a| BackwardCoefficients::new(a, &grid)).collect::<Result<_>>()?;
    let drv = Drivers::new(market, &grid, paths, config.seed);
    let price_scale = market.price_scale(&grid);

    let mut fields = vec![StepFit::zero(2 * na); n];
    let mut diagnostics = Vec::new();
    let mut converged = na == 0;
    let mut fw = forward_pass(market, &coeffs, &drv, &fields, config.scheme);
    let mut fitted = vec![vec![0.0; paths * n]; 2 * na];
    let mut z_means = Vec::new();
    let mut degree = config.basis_degree.min(1);
    if na > 0 {
        for m in 1..=config.max_iterations {
            let bw = backward_pass(market, &coeffs, &drv, &fw, degree, config.scheme)?;
            let change = sup_price_change(market, &coeffs, n, &fw.field, &bw.fitted);
            diagnostics.push(IterationDiagnostic {
                iteration: m,
                basis_degree: degree,
                sup_change: change,
                normal_residual: bw.normal_residual,
            });
            log::info!("picard iteration {m}: sup price change {change:.3e}");
            fields = bw.fields;
            fitted = bw.fitted;
            z_means = bw.z_means;
            if !change.is_finite() {
                return Err(Error::Singular(format!("Picard iteration {m} produced a non-finite price")));
            }
            if degree < config.basis_degree {
                if change < WARM_START_FACTOR * config.tolerance * price_scale {
                    degree = config.basis_degree;
                }
            } else if change < config.tolerance * price_scale {
                converged = true;
                break;
            }
            if m < config.max_iterations {
                fw = forward_pass(market, &coeffs, &drv, &fields, config.scheme);
            }
        }
        if !converged {
            log::warn!("Picard iteration did not reach tolerance in {} iterations", config.max_iterations);
        }
    }

    let seed = config.seed;
    let mk = |label: String, values: Vec<f64>| PathSet::new(grid, label, seed, paths, values);
    let components = market
        .demand
        .components
        .iter()
        .zip(drv.components.iter())
        .map(|(c, v)| mk(c.label.clone(), v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let kappa = drv.kappa.iter().enumerate().map(|(j, v)| mk(format!("kappa_{j}"), v.clone())).collect::<Result<Vec<_>>>()?;
    let levels = fw.levels.into_iter().enumerate().map(|(j, v)| mk(format!("level_{j}"), v)).collect::<Result<Vec<_>>>()?;
    let mut y1 = Vec::with_capacity(na);
    let mut y2 = Vec::with_capacity(na);
    let mut it = fitted.into_iter();
    for j in 0..na {
        y1.push(mk(format!("y1_{j}"), it.next().unwrap_or_default())?);
        y2.push(mk(format!("y2_{j}"), it.next().unwrap_or_default())?);
    }
    Ok(FbsdeSolution {
        grid,
        config: *config,
        demand: mk("demand".into(), drv.demand)?,
        components,
        kappa,
        levels,
        y1,
        y2,
        price: mk("price".into(), fw.price)?,
        fields,
        coefficients: coeffs,
        diagnostics,
        converged,
        price_scale,
        cap_binding_frequency: fw.capped as f64 / (paths * n) as f64,
        z_means,
    })
}

/// Per-step statistics of `D - C(P) - Σ q` with `q` rebuilt from the
/// solution's `Y`s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClearingReport {
    /// Mean absolute residual over paths where no cap binds.
    pub mean: Vec<f64>,
    /// 99th percentile of the absolute residual where no cap binds.
    pub p99: Vec<f64>,
    /// Fraction of paths at a cap.
    pub capped_fraction: Vec<f64>,
    /// Mean signed slack `D - C(P) - Σ q` over capped paths (positive at the
    /// upper cap: demand is not met).
    pub capped_slack: Vec<f64>,
}

impl ClearingReport {
    pub fn max_uncapped(&self) -> f64 {
        self.p99.iter().copied().fold(0.0, f64::max)
    }

    pub fn overall_mean(&self) -> f64 {
        self.mean.iter().sum::<f64>() / self.mean.len() as f64
    }
}

pub fn clearing_residual(sol: &FbsdeSolution, market: &StochMarket) -> ClearingReport {
    let grid = sol.grid;
    let n = grid.len();
    let paths = sol.price.paths();
    let (lo, hi) = market.caps();
    let mut report = ClearingReport {
        mean: vec![0.0; n],
        p99: vec![0.0; n],
        capped_fraction: vec![0.0; n],
        capped_slack: vec![0.0; n],
    };
    for i in 0..n {
        let mut free = Vec::with_capacity(paths);
        let mut slack = 0.0;
        let mut capped = 0usize;
        for p in 0..paths {
            let price = sol.price.get(p, i);
            let supply: f64 = market.c0 + market.c1 * price;
            let storage: f64 = market
                .agents
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    withdrawal(i, a, &sol.coefficients[j], sol.levels[j].get(p, i), price, sol.y1[j].get(p, i), sol.y2[j].get(p, i))
                })
                .sum();
            let r = sol.demand.get(p, i) - supply - storage;
            if price <= lo || price >= hi {
                capped += 1;
                slack += r;
            } else {
                free.push(r.abs());
            }
        }
        report.capped_fraction[i] = capped as f64 / paths as f64;
        report.capped_slack[i] = if capped > 0 { slack / capped as f64 } else { 0.0 };
        if !free.is_empty() {
            report.mean[i] = free.iter().sum::<f64>() / free.len() as f64;
            free.sort_by(f64::total_cmp);
            let k = ((0.99 * (free.len() - 1) as f64).round() as usize).min(free.len() - 1);
            report.p99[i] = free[k];
        }
    }
    report
}

/// Trajectories of a small price-taking agent trading against the
/// equilibrium prices of a solved market.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub withdrawal: PathSet,
    pub level: PathSet,
    pub y1: PathSet,
    pub y2: PathSet,
}

/// Optimal strategy of `probe` against the equilibrium price of `sol`.
///
/// The probe's conditional expectations are regressed on the market state;
/// its level is propagated exactly for the linear feedback, with the forcing
/// interpolated linearly over each step.
pub fn probe_agent(sol: &FbsdeSolution, probe: &AgentParams, seed: u64) -> Result<ProbeResult> {
    probe.validate()?;
    if probe.kappa.is_some() || probe.jumps.is_some() {
        return Err(Error::param("probe", "probe agent must not have external supply or jumps"));
    }
    let grid = sol.grid;
    let n = grid.len();
    let h = grid.dt();
    let paths = sol.price.paths();
    let cc = ControlCoefficients::new(probe, grid.horizon())?;
    let bc = BackwardCoefficients::new(probe, &grid)?;

    let mut y1 = vec![0.0; paths * n];
    let mut y2 = vec![0.0; paths * n];
    let g = |p: usize, k: usize| sol.price.get(p, k) / (2.0 * probe.alpha);
    for i in (0..n - 1).rev() {
        let states: Vec<Vec<f64>> = (0..paths)
            .map(|p| {
                let mut s = Vec::new();
                sol.state(p, i, &mut s);
                s
            })
            .collect();
        let mut t1 = vec![0.0; paths];
        let mut t2 = vec![0.0; paths];
        for p in 0..paths {
            let (g0, g1) = (g(p, i), g(p, i + 1));
            t1[p] = y1[p * n + i + 1] + 0.5 * h * (bc.discount[i] * g0 + bc.discount[i + 1] * g1);
            t2[p] = y2[p * n + i + 1] + 0.5 * h * (bc.growth[i] * g0 + bc.growth[i + 1] * g1);
        }
        let reg = regress(&states, &[t1, t2], sol.config.basis_degree, sol.levels.len(), i)?;
        for p in 0..paths {
            y1[p * n + i] = reg.fitted[0][p];
            y2[p * n + i] = reg.fitted[1][p];
        }
    }

    // Exact propagator for Z' = -ω f Z + F₁ Y¹ - F₂ Y² - P/(2α), with Y¹, Y²
    // and P linear on each step.
    struct StepWeights {
        phi: f64,
        /// `[kernel][endpoint]` for kernels 1, F₁, F₂.
        w: [[f64; 2]; 3],
        sd: f64,
    }
    let weights: Vec<StepWeights> = (0..n - 1)
        .map(|i| {
            let (a, b) = (grid.time(i), grid.time(i + 1));
            let tol = 1e-12;
            let kernel = |k: usize, s: f64| match k {
                0 => 1.0,
                1 => cc.big_f1(s),
                _ => cc.big_f2(s),
            };
            let mut w = [[0.0; 2]; 3];
            for (k, row) in w.iter_mut().enumerate() {
                row[0] = adaptive_gauss_legendre(|s| cc.transition(b, s) * kernel(k, s) * (b - s) / h, a, b, tol);
                row[1] = adaptive_gauss_legendre(|s| cc.transition(b, s) * kernel(k, s) * (s - a) / h, a, b, tol);
            }
            let var = adaptive_gauss_legendre(|s| cc.transition(b, s).powi(2), a, b, tol);
            StepWeights { phi: cc.transition(b, a), w, sd: var.sqrt() }
        })
        .collect();

    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(seed, streams::PROBE, p as u64);
            let mut level = vec![0.0; n];
            let mut q = vec![0.0; n];
            let m = |k: usize| sol.price.get(p, k) / (2.0 * probe.alpha);
            let mut z = 0.0;
            for i in 0..n {
                level[i] = probe.q0_bar + z;
                q[i] = bc.omega_f[i] * z - bc.f1[i] * y1[p * n + i] + bc.f2[i] * y2[p * n + i] + m(i);
                if i + 1 < n {
                    let sw = &weights[i];
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    let mut forced = 0.0;
                    for (e, k) in [i, i + 1].into_iter().enumerate() {
                        forced += -sw.w[0][e] * m(k) + sw.w[1][e] * y1[p * n + k] - sw.w[2][e] * y2[p * n + k];
                    }
                    z = sw.phi * z + forced + probe.rho * sw.sd * xi;
                }
            }
            (q, level)
        })
        .collect();
    let mut wd = Vec::with_capacity(paths * n);
    let mut lv = Vec::with_capacity(paths * n);
    for (q, l) in rows {
        wd.extend(q);
        lv.extend(l);
    }
    Ok(ProbeResult {
        withdrawal: PathSet::new(grid, "probe_withdrawal", seed, paths, wd)?,
        level: PathSet::new(grid, "probe_level", seed, paths, lv)?,
        y1: PathSet::new(grid, "probe_y1", seed, paths, y1)?,
        y2: PathSet::new(grid, "probe_y2", seed, paths, y2)?,
    })
}
