//! RTE long-term scenarios and the cannibalization experiment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{solve, ComponentKind, FbsdeConfig, StochMarket};
use crate::lq_control::{aggregate_agents, AgentParams};
use crate::metrics::{bootstrap, revenue_report, ConfidenceInterval, RevenueReport};

pub const YEARS: [u32; 4] = [2019, 2030, 2040, 2050];
const DEMAND: [f64; 4] = [1.0, 1.07, 1.19, 1.36];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    N03,
    N2,
    N1,
    M23,
    M1,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 5] = [ScenarioId::N03, ScenarioId::N2, ScenarioId::N1, ScenarioId::M23, ScenarioId::M1];

    fn column(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ScenarioId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Multipliers and installed storage at the anchor years.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTable {
    pub id: ScenarioId,
    pub years: Vec<u32>,
    pub renewable_multiplier: Vec<f64>,
    /// Installed storage (GW).
    pub storage_gw: Vec<f64>,
    pub demand_multiplier: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPoint {
    pub year: f64,
    pub renewable_multiplier: f64,
    pub storage_gw: f64,
    pub demand_multiplier: f64,
}

impl ScenarioTable {
    pub fn rte(id: ScenarioId) -> Self {
        const RENEWABLES: [[f64; 5]; 4] = [
            [1.0, 1.0, 1.0, 1.0, 1.0],
            [1.92, 1.92, 1.92, 1.92, 1.92],
            [2.58, 2.84, 3.35, 3.83, 4.29],
            [3.16, 3.95, 4.77, 5.50, 6.62],
        ];
        const STORAGE: [[f64; 5]; 4] = [
            [5.0, 5.0, 5.0, 5.0, 5.0],
            [5.5, 5.5, 5.5, 5.5, 5.5],
            [7.1, 8.0, 8.1, 11.6, 15.7],
            [9.0, 10.5, 17.2, 21.2, 29.1],
        ];
        let c = id.column();
        Self {
            id,
            years: YEARS.to_vec(),
            renewable_multiplier: RENEWABLES.iter().map(|r| r[c]).collect(),
            storage_gw: STORAGE.iter().map(|r| r[c]).collect(),
            demand_multiplier: DEMAND.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.years.len();
        if n == 0 {
            return Err(Error::param("years", "table is empty"));
        }
        for len in [self.renewable_multiplier.len(), self.storage_gw.len(), self.demand_multiplier.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, got: len });
            }
        }
        if self.years.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("years", "must be strictly increasing"));
        }
        let bad = |v: &[f64], min: f64| v.iter().any(|x| !(x.is_finite() && *x >= min));
        if bad(&self.renewable_multiplier, 0.0) || bad(&self.demand_multiplier, 0.0) || bad(&self.storage_gw, 0.0) {
            return Err(Error::param("scenario", "multipliers and capacities must be finite and >= 0"));
        }
        Ok(())
    }

    /// Linear interpolation between anchor years.
    pub fn at(&self, year: f64) -> Result<ScenarioPoint> {
        self.validate()?;
        let first = self.years[0] as f64;
        let last = *self.years.last().unwrap_or(&0) as f64;
        if !(year >= first && year <= last) {
            return Err(Error::param("year", format!("{year} outside [{first}, {last}] for scenario {}", self.id)));
        }
        let k = self.years.windows(2).position(|w| year <= w[1] as f64).unwrap_or(0);
        let interp = |v: &[f64]| {
            if self.years.len() == 1 {
                return v[0];
            }
            let (y0, y1) = (self.years[k] as f64, self.years[k + 1] as f64);
            let w = (year - y0) / (y1 - y0);
            v[k] + w * (v[k + 1] - v[k])
        };
        Ok(ScenarioPoint {
            year,
            renewable_multiplier: interp(&self.renewable_multiplier),
            storage_gw: interp(&self.storage_gw),
            demand_multiplier: interp(&self.demand_multiplier),
        })
    }
}

/// Conversion from installed power to intraday storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageConversion {
    /// Share of installed capacity trading intraday.
    pub intraday_share: f64,
    /// MWh of storage per MW of nameplate power.
    pub hours_per_mw: f64,
}

impl Default for StorageConversion {
    fn default() -> Self {
        Self { intraday_share: 0.25, hours_per_mw: 1.0 }
    }
}

impl StorageConversion {
    /// Intraday storage capacity (MWh), which is also the number of unit agents.
    pub fn intraday_mwh(&self, storage_gw: f64) -> f64 {
        storage_gw * 1000.0 * self.intraday_share * self.hours_per_mw
    }
}

/// `base` with consumption scaled by the demand multiplier, renewables by the
/// renewable multiplier, and its agents replaced by the aggregated scenario
/// storage (no agents when the capacity is zero).
pub fn scenario_market(
    base: &StochMarket,
    unit: &AgentParams,
    point: &ScenarioPoint,
    conversion: &StorageConversion,
) -> Result<StochMarket> {
    let mut m = base.clone();
    for c in &mut m.demand.components {
        match c.kind {
            ComponentKind::Consumption => c.weight *= point.demand_multiplier,
            ComponentKind::Renewables => c.weight *= point.renewable_multiplier,
            ComponentKind::Other => {}
        }
    }
    let p = conversion.intraday_mwh(point.storage_gw);
    m.agents = if p > 0.0 { vec![aggregate_agents(p, unit, &[])?] } else { Vec::new() };
    m.validate()?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub id: ScenarioId,
    pub point: ScenarioPoint,
    pub storage_mwh: f64,
    pub converged: bool,
    pub iterations: usize,
    pub report: RevenueReport,
}

pub fn scenario_run(
    table: &ScenarioTable,
    year: f64,
    base: &StochMarket,
    unit: &AgentParams,
    reference: &AgentParams,
    config: &FbsdeConfig,
    conversion: &StorageConversion,
) -> Result<ScenarioResult> {
    let point = table.at(year)?;
    let market = scenario_market(base, unit, &point, conversion)?;
    let sol = solve(&market, config)?;
    let report = revenue_report(&sol, reference, config.seed)?;
    Ok(ScenarioResult {
        id: table.id,
        point,
        storage_mwh: conversion.intraday_mwh(point.storage_gw),
        converged: sol.converged,
        iterations: sol.iterations(),
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderPoint {
    pub added_gwh: f64,
    pub converged: bool,
    pub iterations: usize,
    pub report: RevenueReport,
    /// Mean revenue relative to the zero-addition run, with a paired bootstrap
    /// interval over days.
    pub ratio: ConfidenceInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CannibalizationCurve {
    pub points: Vec<LadderPoint>,
    /// Bootstrap intervals for `ratio[k+1] - ratio[k]`.
    pub steps: Vec<ConfidenceInterval>,
}

impl CannibalizationCurve {
    /// No consecutive increase is significant at the 95% level.
    pub fn weakly_decreasing(&self) -> bool {
        self.steps.iter().all(|s| s.lower <= 0.0)
    }
}

/// Revenue of `reference` as unit agents are added to `base`, one ladder point
/// per entry of `added_gwh` (GWh, i.e. thousands of unit agents). All runs
/// share the seed, so the days are paired.
pub fn cannibalization_curve(
    base: &StochMarket,
    unit: &AgentParams,
    reference: &AgentParams,
    added_gwh: &[f64],
    config: &FbsdeConfig,
    resamples: usize,
) -> Result<CannibalizationCurve> {
    if added_gwh.first() != Some(&0.0) {
        return Err(Error::param("added_gwh", "ladder must start at 0"));
    }
    if added_gwh.windows(2).any(|w| w[1] <= w[0]) || added_gwh.iter().any(|g| !g.is_finite()) {
        return Err(Error::param("added_gwh", "ladder must be finite and strictly increasing"));
    }
    let mut runs = Vec::with_capacity(added_gwh.len());
    for &g in added_gwh {
        let mut m = base.clone();
        if g > 0.0 {
            m.agents.push(aggregate_agents(g * 1000.0, unit, &[])?);
        }
        let sol = solve(&m, config)?;
        let report = revenue_report(&sol, reference, config.seed)?;
        runs.push((g, sol.converged, sol.iterations(), report));
    }
    let baseline = runs[0].3.revenue.clone();
    let days = baseline.len();
    let ratio_of = |rev: &[f64], idx: &[usize]| {
        let (num, den) = idx.iter().fold((0.0, 0.0), |(a, b), &i| (a + rev[i], b + baseline[i]));
        num / den
    };
    let mut points = Vec::with_capacity(runs.len());
    for (g, converged, iterations, report) in runs {
        let ratio = bootstrap(days, resamples, 0.95, config.seed, |idx| ratio_of(&report.revenue, idx));
        points.push(LadderPoint { added_gwh: g, converged, iterations, report, ratio });
    }
    let steps = points
        .windows(2)
        .map(|w| {
            bootstrap(days, resamples, 0.95, config.seed, |idx| {
                ratio_of(&w[1].report.revenue, idx) - ratio_of(&w[0].report.revenue, idx)
            })
        })
        .collect();
    Ok(CannibalizationCurve { points, steps })
}
