//! One function per experiment. Each writes its tables and returns the
//! `results` block of the summary.

use std::fs::File;
use std::path::Path;

use serde_json::{json, Value};
use storage_impact::det_equilibrium::{equilibrium_price, exogenous_strategy, DetMarket};
use storage_impact::fbsde::{clearing_residual, solve, StochMarket};
use storage_impact::lq_control::{simulate_agent, PriceTrajectory, SimulationOptions};
use storage_impact::metrics::{daily_revenue, mean, net_revenue, revenue_report, RevenueReport};
use storage_impact::scenarios::{cannibalization_curve, scenario_run, ScenarioTable};
use storage_impact::stochastics::{calibrate, read_hourly_csv};
use storage_impact::{PiecewiseLinear, TimeFunction, TimeGrid};

use crate::config::{DemandSpec, Kind, RunConfig};
use crate::error::CliError;
use crate::output::{num, OutputDir, Table};

pub struct Outcome {
    pub results: Value,
    /// Set when a solver stopped before reaching its tolerance.
    pub not_converged: Option<String>,
}

fn ok(results: Value) -> Outcome {
    Outcome { results, not_converged: None }
}

fn grid(cfg: &RunConfig) -> Result<TimeGrid, CliError> {
    Ok(TimeGrid::new(cfg.market.horizon, cfg.numerics.steps)?)
}

fn deterministic_demand(cfg: &RunConfig) -> Result<TimeFunction, CliError> {
    match &cfg.market.demand {
        Some(DemandSpec::Deterministic { function }) => Ok(function.clone()),
        _ => Err(CliError::Schema("this experiment needs `market.demand.type = deterministic`".into())),
    }
}

fn stoch_market(cfg: &RunConfig) -> Result<StochMarket, CliError> {
    let m = StochMarket {
        c0: cfg.market.c0,
        c1: cfg.market.c1,
        price_floor: cfg.market.price_floor,
        price_cap: cfg.market.price_cap,
        agents: cfg.agents().iter().map(|a| a.aggregated()).collect::<Result<_, _>>()?,
        demand: cfg.demand(),
        horizon: cfg.market.horizon,
    };
    m.validate()?;
    Ok(m)
}

pub fn run(kind: Kind, cfg: &RunConfig, config_dir: &Path, out: &mut OutputDir) -> Result<Outcome, CliError> {
    match kind {
        Kind::Control => control(cfg, out),
        Kind::DetEq => det_eq(cfg, out),
        Kind::StoEq => sto_eq(cfg, out),
        Kind::Calibrate => calibrate_data(cfg, config_dir, out),
        Kind::Cannibalize => cannibalize(cfg, out),
        Kind::Scenario => scenario(cfg, out),
    }
}

fn control(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let block = cfg.control.clone().unwrap_or_default();
    let agent = cfg.agents().first().ok_or_else(|| CliError::Schema("control needs an agent".into()))?.aggregated()?;
    let grid = grid(cfg)?;
    let price: PriceTrajectory = match &block.price {
        Some(f) => {
            f.validate()?;
            PiecewiseLinear::from_fn(grid, |t| f.eval(t))?
        }
        None => {
            let d = deterministic_demand(cfg)?;
            PiecewiseLinear::from_fn(grid, |t| (d.eval(t) - cfg.market.c0) / cfg.market.c1)?
        }
    };
    if block.paths == 0 {
        return Err(CliError::Schema("control.paths must be > 0".into()));
    }
    let paths = (0..block.paths)
        .map(|p| simulate_agent(&agent, &price, cfg.seed, &SimulationOptions { scheme: block.scheme, path_index: p as u64 }))
        .collect::<Result<Vec<_>, _>>()?;
    let mut header = vec!["time".to_string(), "price".to_string()];
    for p in 0..paths.len() {
        header.push(format!("withdrawal_{p}"));
        header.push(format!("level_{p}"));
    }
    let mut t = Table::new(header);
    for i in 0..grid.len() {
        let mut row = vec![price.values()[i]];
        for a in &paths {
            row.push(a.withdrawal[i]);
            row.push(a.level[i]);
        }
        t.push_timed(grid.time(i), row);
    }
    out.csv("control.csv", &t)?;
    let gross: Vec<f64> =
        paths.iter().map(|a| daily_revenue(price.values(), &a.withdrawal, &grid)).collect::<Result<_, _>>()?;
    let net: Vec<f64> = paths
        .iter()
        .map(|a| net_revenue(price.values(), &a.withdrawal, &a.level, &agent, &grid))
        .collect::<Result<_, _>>()?;
    let terminal: Vec<f64> = paths.iter().map(|a| a.level[grid.steps()]).collect();
    Ok(ok(json!({
        "paths": paths.len(),
        "mean_revenue": mean(&gross),
        "mean_net_revenue": mean(&net),
        "mean_terminal_level": mean(&terminal),
    })))
}

fn det_eq(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let agent = match cfg.agents() {
        [a] => a.aggregated()?,
        _ => return Err(CliError::Schema("det-eq takes exactly one (aggregated) agent".into())),
    };
    let demand = deterministic_demand(cfg)?;
    let market = DetMarket::new(cfg.market.c0, cfg.market.c1, demand.clone(), agent, cfg.market.horizon)?;
    let grid = grid(cfg)?;
    let eq = equilibrium_price(&market, &grid)?;
    let response = exogenous_strategy(&eq.price_trajectory()?, &market.agent)?;
    let mut t = Table::new(["time", "demand", "no_storage_price", "price", "withdrawal", "level", "clearing_residual"]);
    let mut max_residual: f64 = 0.0;
    for i in 0..grid.len() {
        let s = grid.time(i);
        let d = demand.eval(s);
        let residual = d - (market.c0 + market.c1 * eq.price[i]) - response.withdrawal[i];
        max_residual = max_residual.max(residual.abs());
        t.push_timed(s, [d, market.no_storage_price(s), eq.price[i], eq.withdrawal[i], eq.level[i], residual]);
    }
    out.csv("det_eq.csv", &t)?;
    let max_demand = (0..grid.len()).map(|i| demand.eval(grid.time(i)).abs()).fold(0.0, f64::max);
    Ok(ok(json!({
        "constants": eq.constants,
        "max_clearing_residual": max_residual,
        "relative_clearing_residual": max_residual / max_demand,
        "withdrawal_discrepancy": eq.withdrawal_discrepancy,
        "level_discrepancy": eq.level_discrepancy,
        "price_range": eq.price_range(),
        "price_scale": market.price_scale(&grid),
    })))
}

fn report_json(r: &RevenueReport) -> Value {
    serde_json::to_value(r).unwrap_or(Value::Null)
}

fn sto_eq(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let market = stoch_market(cfg)?;
    let sol = solve(&market, &cfg.numerics.fbsde(cfg.seed))?;
    let grid = sol.grid;
    let shown = sol.price.paths().min(20);

    let mut header: Vec<String> =
        ["time", "demand_mean", "price_mean", "price_q05", "price_q25", "price_q50", "price_q75", "price_q95"]
            .iter()
            .map(|s| s.to_string())
            .collect();
    header.extend((0..sol.levels.len()).map(|j| format!("level_mean_{j}")));
    let mut stats = Table::new(header);
    for i in 0..grid.len() {
        let q = storage_impact::metrics::Quantiles::of(&sol.price.column(i));
        let mut row = vec![mean(&sol.demand.column(i)), mean(&sol.price.column(i)), q.q05, q.q25, q.q50, q.q75, q.q95];
        row.extend(sol.levels.iter().map(|l| mean(&l.column(i))));
        stats.push_timed(grid.time(i), row);
    }
    out.csv("price_stats.csv", &stats)?;

    let mut paths = Table::new(std::iter::once("time".to_string()).chain((0..shown).map(|p| format!("price_{p}"))));
    for i in 0..grid.len() {
        paths.push_timed(grid.time(i), (0..shown).map(|p| sol.price.get(p, i)));
    }
    out.csv("price_paths.csv", &paths)?;

    let mut diag = Table::new(["iteration", "basis_degree", "sup_change", "normal_residual"]);
    for d in &sol.diagnostics {
        diag.push(vec![d.iteration.to_string(), d.basis_degree.to_string(), num(d.sup_change), num(d.normal_residual)]);
    }
    out.csv("diagnostics.csv", &diag)?;

    let clearing = clearing_residual(&sol, &market);
    let report = match cfg.agents().first() {
        Some(a) if !market.agents.is_empty() => Some(revenue_report(&sol, &a.unit()?, cfg.seed)?),
        _ => None,
    };
    let results = json!({
        "converged": sol.converged,
        "iterations": sol.iterations(),
        "price_scale": sol.price_scale,
        "cap_binding_frequency": sol.cap_binding_frequency,
        "mean_clearing_residual": clearing.overall_mean(),
        "max_uncapped_clearing_residual": clearing.max_uncapped(),
        "mean_price": mean(sol.price.values()),
        "reference_agent": report.as_ref().map(report_json),
    });
    let not_converged = (!sol.converged).then(|| {
        let last = sol.diagnostics.last().map_or(f64::NAN, |d| d.sup_change);
        format!("Picard iteration stopped after {} iterations with sup price change {last:.3e}", sol.iterations())
    });
    Ok(Outcome { results, not_converged })
}

fn calibrate_data(cfg: &RunConfig, config_dir: &Path, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let block = cfg.calibrate.as_ref().ok_or_else(|| CliError::Schema("missing `calibrate` block".into()))?;
    let path = config_dir.join(&block.data);
    let file = File::open(&path).map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    let series = read_hourly_csv(file)?;
    let c = calibrate(&series.values, block.truncate)?;
    let mut t = Table::new(["hour", "profile"]);
    for (h, v) in c.profile.slots().iter().enumerate() {
        t.push(vec![h.to_string(), num(*v)]);
    }
    out.csv("profile.csv", &t)?;
    out.json("ou_model.json", &serde_json::to_value(c.fit.model).unwrap_or(Value::Null))?;
    Ok(ok(json!({
        "start": series.start.to_string(),
        "hours": series.values.len(),
        "model": c.fit.model,
        "ar_slope": c.fit.a,
        "ar_intercept": c.fit.b,
        "innovation_variance": c.fit.innovation_variance,
        "observations": c.fit.observations,
        "level": c.level(),
        "profile": c.profile.slots(),
    })))
}

fn cannibalize(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let block = cfg.cannibalize.clone().unwrap_or_default();
    let base = stoch_market(cfg)?;
    let unit = cfg.agents().first().map_or_else(|| block.reference.unit(), |a| a.unit())?;
    let reference = block.reference.unit()?;
    let curve = cannibalization_curve(&base, &unit, &reference, &block.ladder_gwh, &cfg.numerics.fbsde(cfg.seed), block.resamples)?;
    let mut t = Table::new([
        "added_gwh",
        "ratio",
        "ratio_lower",
        "ratio_upper",
        "mean_revenue",
        "mean_volatility",
        "mean_price_range",
        "converged",
        "iterations",
    ]);
    for p in &curve.points {
        t.push(vec![
            num(p.added_gwh),
            num(p.ratio.estimate),
            num(p.ratio.lower),
            num(p.ratio.upper),
            num(p.report.mean_revenue),
            num(p.report.mean_volatility),
            num(p.report.mean_price_range),
            p.converged.to_string(),
            p.iterations.to_string(),
        ]);
    }
    out.csv("cannibalization.csv", &t)?;
    let failed: Vec<String> = curve.points.iter().filter(|p| !p.converged).map(|p| num(p.added_gwh)).collect();
    let results = json!({
        "weakly_decreasing": curve.weakly_decreasing(),
        "steps": curve.steps,
        "points": curve.points.iter().map(|p| json!({
            "added_gwh": p.added_gwh,
            "ratio": p.ratio,
            "converged": p.converged,
            "iterations": p.iterations,
            "report": report_json(&p.report),
        })).collect::<Vec<_>>(),
    });
    let not_converged = (!failed.is_empty()).then(|| format!("not converged at {} GWh added", failed.join(", ")));
    Ok(Outcome { results, not_converged })
}

fn scenario(cfg: &RunConfig, out: &mut OutputDir) -> Result<Outcome, CliError> {
    let block = cfg.scenario.clone().unwrap_or_default();
    let mut base = stoch_market(cfg)?;
    base.agents.clear();
    let unit = block.unit.unit()?;
    let reference = block.reference.unit()?;
    let config = cfg.numerics.fbsde(cfg.seed);
    let mut t = Table::new([
        "scenario",
        "year",
        "renewable_multiplier",
        "demand_multiplier",
        "storage_gw",
        "storage_mwh",
        "mean_revenue",
        "revenue_q05",
        "revenue_q25",
        "revenue_q50",
        "revenue_q75",
        "revenue_q95",
        "mean_volatility",
        "mean_price_range",
        "converged",
        "iterations",
    ]);
    let mut runs = Vec::new();
    let mut failed = Vec::new();
    for &id in &block.scenarios {
        let table = ScenarioTable::rte(id);
        for &year in &block.years {
            log::info!("scenario {id} {year}");
            let r = scenario_run(&table, year, &base, &unit, &reference, &config, &block.conversion)?;
            let q = r.report.revenue_quantiles;
            t.push(vec![
                id.to_string(),
                num(year),
                num(r.point.renewable_multiplier),
                num(r.point.demand_multiplier),
                num(r.point.storage_gw),
                num(r.storage_mwh),
                num(r.report.mean_revenue),
                num(q.q05),
                num(q.q25),
                num(q.q50),
                num(q.q75),
                num(q.q95),
                num(r.report.mean_volatility),
                num(r.report.mean_price_range),
                r.converged.to_string(),
                r.iterations.to_string(),
            ]);
            if !r.converged {
                failed.push(format!("{id} {year}"));
            }
            runs.push(json!({
                "scenario": id,
                "year": year,
                "point": r.point,
                "storage_mwh": r.storage_mwh,
                "converged": r.converged,
                "iterations": r.iterations,
                "report": report_json(&r.report),
            }));
        }
    }
    out.csv("scenario.csv", &t)?;
    let not_converged = (!failed.is_empty()).then(|| format!("not converged: {}", failed.join(", ")));
    Ok(Outcome { results: json!({ "runs": runs }), not_converged })
}
