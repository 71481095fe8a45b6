//! Versioned JSON run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use storage_impact::fbsde::{DemandModel, FbsdeConfig, Scheme};
use storage_impact::lq_control::{aggregate_agents, AgentParams, AgentScheme};
use storage_impact::scenarios::{ScenarioId, StorageConversion, YEARS};
use storage_impact::{OUModel, TimeFunction};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Control,
    DetEq,
    StoEq,
    Calibrate,
    Cannibalize,
    Scenario,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Control => "control",
            Kind::DetEq => "det-eq",
            Kind::StoEq => "sto-eq",
            Kind::Calibrate => "calibrate",
            Kind::Cannibalize => "cannibalize",
            Kind::Scenario => "scenario",
        }
    }

    fn stochastic(self) -> bool {
        matches!(self, Kind::StoEq | Kind::Cannibalize | Kind::Scenario)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<Kind>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub market: MarketBlock,
    /// Storage agents; defaults to 10 000 unit agents, with `rho = 0.01` and
    /// `q0_bar = 0.5` in stochastic runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<Vec<AgentBlock>>,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibrate: Option<CalibrateBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cannibalize: Option<CannibalizeBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    pub c0: f64,
    pub c1: f64,
    #[serde(default)]
    pub price_floor: Option<f64>,
    #[serde(default)]
    pub price_cap: Option<f64>,
    pub horizon: f64,
    /// Defaults to the calibrated sinusoid for deterministic runs and to the
    /// consumption/renewables OU model otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demand: Option<DemandSpec>,
}

impl Default for MarketBlock {
    fn default() -> Self {
        Self { c0: -7546.0, c1: 151.77, price_floor: None, price_cap: None, horizon: 24.0, demand: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemandSpec {
    /// Deterministic demand.
    Deterministic { function: TimeFunction },
    /// Consumption minus renewables with the calibrated OU parameters.
    Calibrated {
        #[serde(default = "one")]
        demand_multiplier: f64,
        #[serde(default = "one")]
        renewable_multiplier: f64,
    },
    /// Explicit components.
    Components { model: DemandModel },
}

fn one() -> f64 {
    1.0
}

pub fn calibrated_sinusoid() -> TimeFunction {
    TimeFunction::Sinusoid { amplitude: 6862.5, angular_frequency: std::f64::consts::PI / 6.0, offset: 1500.0 }
}

impl DemandSpec {
    pub fn model(&self) -> DemandModel {
        match self {
            DemandSpec::Deterministic { function } => DemandModel::deterministic(function.clone()),
            DemandSpec::Calibrated { demand_multiplier, renewable_multiplier } => {
                DemandModel::calibrated(*demand_multiplier, *renewable_multiplier)
            }
            DemandSpec::Components { model } => model.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentBlock {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub q0_bar: f64,
    /// Number of identical agents aggregated into one.
    #[serde(default = "one")]
    pub count: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<OUModel>,
}

impl AgentBlock {
    pub fn unit(&self) -> storage_impact::Result<AgentParams> {
        let mut a = AgentParams::new(self.alpha, self.beta, self.gamma, self.rho, self.q0_bar)?;
        a.kappa = self.kappa;
        Ok(a)
    }

    pub fn aggregated(&self) -> storage_impact::Result<AgentParams> {
        let mut a = aggregate_agents(self.count, &self.unit()?, &[])?;
        a.kappa = self.kappa;
        Ok(a)
    }
}

fn default_agents(stochastic: bool) -> Vec<AgentBlock> {
    let (rho, q0_bar) = if stochastic { (0.01, 0.5) } else { (0.0, 0.0) };
    vec![AgentBlock { alpha: 84.0, beta: 7.0, gamma: 500.0, rho, q0_bar, count: 10_000.0, kappa: None }]
}

fn unit_block() -> AgentBlock {
    AgentBlock { count: 1.0, ..default_agents(true).remove(0) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    pub steps: usize,
    pub paths: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub basis_degree: usize,
    #[serde(default)]
    pub scheme: Scheme,
}

impl Default for Numerics {
    fn default() -> Self {
        let c = FbsdeConfig::default();
        Self {
            steps: c.steps,
            paths: c.paths,
            max_iterations: c.max_iterations,
            tolerance: c.tolerance,
            basis_degree: c.basis_degree,
            scheme: c.scheme,
        }
    }
}

impl Numerics {
    pub fn fbsde(&self, seed: u64) -> FbsdeConfig {
        FbsdeConfig {
            steps: self.steps,
            paths: self.paths,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            basis_degree: self.basis_degree,
            scheme: self.scheme,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBlock {
    /// Exogenous price (€/MWh); defaults to the no-storage price of the market.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<TimeFunction>,
    #[serde(default = "one_path")]
    pub paths: usize,
    #[serde(default)]
    pub scheme: AgentScheme,
}

fn one_path() -> usize {
    1
}

impl Default for ControlBlock {
    fn default() -> Self {
        Self { price: None, paths: 1, scheme: AgentScheme::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateBlock {
    /// Hourly `timestamp,value` CSV, relative to the config file.
    pub data: PathBuf,
    #[serde(default)]
    pub truncate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CannibalizeBlock {
    #[serde(default = "default_ladder")]
    pub ladder_gwh: Vec<f64>,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default = "unit_block")]
    pub reference: AgentBlock,
}

fn default_ladder() -> Vec<f64> {
    vec![0.0, 2.0, 5.0, 10.0]
}

fn default_resamples() -> usize {
    1000
}

impl Default for CannibalizeBlock {
    fn default() -> Self {
        Self { ladder_gwh: default_ladder(), resamples: default_resamples(), reference: unit_block() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    #[serde(default = "all_scenarios")]
    pub scenarios: Vec<ScenarioId>,
    #[serde(default = "all_years")]
    pub years: Vec<f64>,
    #[serde(default)]
    pub conversion: StorageConversion,
    #[serde(default = "unit_block")]
    pub unit: AgentBlock,
    #[serde(default = "unit_block")]
    pub reference: AgentBlock,
}

fn all_scenarios() -> Vec<ScenarioId> {
    ScenarioId::ALL.to_vec()
}

fn all_years() -> Vec<f64> {
    YEARS.iter().map(|&y| y as f64).collect()
}

impl Default for ScenarioBlock {
    fn default() -> Self {
        Self {
            scenarios: all_scenarios(),
            years: all_years(),
            conversion: StorageConversion::default(),
            unit: unit_block(),
            reference: unit_block(),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: SCHEMA_VERSION,
            kind: None,
            seed: 0,
            market: MarketBlock::default(),
            agents: None,
            numerics: Numerics::default(),
            control: None,
            calibrate: None,
            cannibalize: None,
            scenario: None,
            output_dir: None,
        }
    }
}

/// Overrides from the command line, applied after parsing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
}

impl RunConfig {
    /// Fill kind-dependent defaults and command-line overrides, so the
    /// serialized result describes the run completely.
    pub fn resolve(mut self, kind: Kind, o: &Overrides) -> Result<Self, String> {
        if let Some(k) = self.kind {
            if k != kind {
                return Err(format!("config kind `{}` does not match subcommand `{}`", k.name(), kind.name()));
            }
        }
        self.kind = Some(kind);
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = o.paths {
            self.numerics.paths = p;
        }
        if let Some(n) = o.steps {
            self.numerics.steps = n;
        }
        if self.agents.is_none() {
            self.agents = Some(default_agents(kind.stochastic()));
        }
        if self.market.demand.is_none() {
            self.market.demand = Some(if kind.stochastic() {
                DemandSpec::Calibrated { demand_multiplier: 1.0, renewable_multiplier: 1.0 }
            } else {
                DemandSpec::Deterministic { function: calibrated_sinusoid() }
            });
        }
        match kind {
            Kind::Control if self.control.is_none() => self.control = Some(ControlBlock::default()),
            Kind::Cannibalize if self.cannibalize.is_none() => self.cannibalize = Some(CannibalizeBlock::default()),
            Kind::Scenario if self.scenario.is_none() => self.scenario = Some(ScenarioBlock::default()),
            Kind::Calibrate if self.calibrate.is_none() => {
                return Err("calibrate needs a `calibrate.data` file".into());
            }
            _ => {}
        }
        Ok(self)
    }

    pub fn agents(&self) -> &[AgentBlock] {
        self.agents.as_deref().unwrap_or_default()
    }

    pub fn demand(&self) -> DemandModel {
        self.market.demand.as_ref().map_or_else(|| DemandModel::calibrated(1.0, 1.0), DemandSpec::model)
    }

    /// Every range and consistency violation, without running anything.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.version != SCHEMA_VERSION {
            v.push(format!("version: expected {SCHEMA_VERSION}, got {}", self.version));
        }
        let m = &self.market;
        if !m.c0.is_finite() {
            v.push("market.c0: must be finite".into());
        }
        if !(m.c1 > 0.0 && m.c1.is_finite()) {
            v.push(format!("market.c1: supply slope must be > 0 for the price map to be invertible, got {}", m.c1));
        }
        if !(m.horizon > 0.0 && m.horizon.is_finite()) {
            v.push("market.horizon: must be > 0".into());
        }
        if let (Some(lo), Some(hi)) = (m.price_floor, m.price_cap) {
            if !(lo < hi) {
                v.push("market.price_floor: must be below price_cap".into());
            }
        }
        if let Err(e) = self.demand().validate() {
            v.push(format!("market.demand: {e}"));
        }
        for (i, a) in self.agents().iter().enumerate() {
            if let Err(e) = a.aggregated() {
                v.push(format!("agents[{i}]: {e}"));
            }
            if !(a.count > 0.0 && a.count.is_finite()) {
                v.push(format!("agents[{i}].count: must be > 0"));
            }
        }
        if let Err(e) = self.numerics.fbsde(self.seed).validate() {
            v.push(format!("numerics: {e}"));
        }
        match self.kind {
            Some(Kind::DetEq) | Some(Kind::Control) => {
                if !self.demand().is_deterministic() {
                    v.push("market.demand: deterministic runs need deterministic demand".into());
                }
                if self.kind == Some(Kind::DetEq) && (m.price_floor.is_some() || m.price_cap.is_some()) {
                    v.push("market.price_cap: the closed-form equilibrium has no price caps".into());
                }
                if self.kind == Some(Kind::DetEq) && self.agents().len() != 1 {
                    v.push("agents: det-eq takes exactly one (aggregated) agent".into());
                }
                if self.kind == Some(Kind::Control) && self.agents().is_empty() {
                    v.push("agents: control needs an agent".into());
                }
            }
            Some(Kind::StoEq) | Some(Kind::Scenario) | Some(Kind::Cannibalize)
                if !self.demand().is_deterministic() && self.agents().iter().any(|a| a.rho == 0.0) =>
            {
                v.push("agents: stochastic runs need rho > 0 for every agent (non-degenerate storage noise)".into());
            }
            _ => {}
        }
        match self.kind {
            Some(Kind::Cannibalize) => {
                if let Some(c) = &self.cannibalize {
                    if c.ladder_gwh.first() != Some(&0.0) || c.ladder_gwh.windows(2).any(|w| w[1] <= w[0]) {
                        v.push("cannibalize.ladder_gwh: must start at 0 and increase strictly".into());
                    }
                    if c.resamples == 0 {
                        v.push("cannibalize.resamples: must be > 0".into());
                    }
                }
            }
            Some(Kind::Scenario) => {
                if let Some(s) = &self.scenario {
                    if s.years.iter().any(|y| !(2019.0..=2050.0).contains(y)) {
                        v.push("scenario.years: must lie in [2019, 2050]".into());
                    }
                    if !(s.conversion.intraday_share > 0.0 && s.conversion.hours_per_mw > 0.0) {
                        v.push("scenario.conversion: share and hours must be > 0".into());
                    }
                }
            }
            _ => {}
        }
        v
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let noiseless = self.demand().is_deterministic()
            && self.agents().iter().all(|a| a.rho == 0.0 && a.kappa.is_none_or(|k| k.sigma == 0.0));
        if self.kind.is_some_and(Kind::stochastic) && noiseless {
            w.push("all noise is zero: the regression reduces to per-step sample means".into());
        }
        w
    }
}
