use storage_impact::fbsde::{solve, FbsdeConfig, StochMarket};
use storage_impact::lq_control::AgentParams;
use storage_impact::metrics::*;
use storage_impact::scenarios::*;
use storage_impact::stochastics::simulate_ou;
use storage_impact::{Error, OUModel, SeasonalProfile, TimeGrid};

fn small(paths: usize, seed: u64) -> FbsdeConfig {
    FbsdeConfig { steps: 48, paths, seed, ..Default::default() }
}

#[test]
fn revenue_of_an_idle_agent_is_zero() {
    let grid = TimeGrid::new(24.0, 24).unwrap();
    let price: Vec<f64> = (0..25).map(|i| 40.0 + i as f64).collect();
    assert_eq!(daily_revenue(&price, &[0.0; 25], &grid).unwrap(), 0.0);
}

#[test]
fn constant_price_and_a_neutral_cycle_earn_nothing() {
    let grid = TimeGrid::new(24.0, 24).unwrap();
    let price = vec![55.0; 25];
    let q: Vec<f64> = (0..25).map(|i| if i < 12 { -1.0 } else if i < 24 { 1.0 } else { 0.0 }).collect();
    assert!(daily_revenue(&price, &q, &grid).unwrap().abs() < 1e-12);
}

#[test]
fn buy_low_sell_high() {
    let grid = TimeGrid::new(2.0, 2).unwrap();
    let r = daily_revenue(&[30.0, 100.0, 0.0], &[-1.0, 1.0, 0.0], &grid).unwrap();
    assert!((r - 70.0).abs() < 1e-12);
}

#[test]
fn revenue_rejects_mismatched_lengths() {
    let grid = TimeGrid::new(24.0, 24).unwrap();
    assert!(matches!(daily_revenue(&[1.0; 24], &[0.0; 25], &grid), Err(Error::LengthMismatch { .. })));
}

#[test]
fn net_revenue_charges_the_objective_costs() {
    let grid = TimeGrid::new(2.0, 2).unwrap();
    let a = AgentParams::new(2.0, 1.0, 4.0, 0.0, 0.0).unwrap();
    let price = [30.0, 100.0, 0.0];
    let q = [-1.0, 1.0, 0.0];
    let level = [0.0, 1.0, 0.0];
    let net = net_revenue(&price, &q, &level, &a, &grid).unwrap();
    assert!((net - (70.0 - (1.0 + 1.0 + 0.5))).abs() < 1e-12);
}

#[test]
fn volatility_of_constant_and_linear_prices_is_zero() {
    let grid = TimeGrid::new(24.0, 96).unwrap();
    assert_eq!(realized_volatility(&[42.0; 97], &grid).unwrap(), 0.0);
    let ramp: Vec<f64> = (0..97).map(|i| 10.0 + 0.7 * i as f64).collect();
    assert!(realized_volatility(&ramp, &grid).unwrap() < 1e-12);
    let short = TimeGrid::new(24.0, 1).unwrap();
    assert!(realized_volatility(&[1.0, 2.0], &short).is_err());
}

#[test]
fn volatility_of_an_ou_price_matches_the_increment_variance() {
    let model = OUModel::new(0.5, 60.0, 12.0, 60.0).unwrap();
    let grid = TimeGrid::new(24.0, 96).unwrap();
    let paths = simulate_ou(&model, &SeasonalProfile::zero(), &grid, 4000, 5).unwrap();
    let h = grid.dt();
    let vars: Vec<f64> = paths.iter_paths().map(|p| realized_volatility(p, &grid).unwrap().powi(2)).collect();
    // Started at the mean, the increment variance is
    // Var(X_i) (1 - e^{-θh})² + σ²(1 - e^{-2θh})/(2θ), with Var(X_i) = σ²(1 - e^{-2θt_i})/(2θ).
    let a = (-model.theta * h).exp();
    let s2 = model.sigma.powi(2) * (1.0 - a * a) / (2.0 * model.theta);
    let expected: f64 = (0..grid.steps())
        .map(|i| {
            let var_i = model.sigma.powi(2) * (1.0 - (-2.0 * model.theta * grid.time(i)).exp()) / (2.0 * model.theta);
            var_i * (1.0 - a).powi(2) + s2
        })
        .sum::<f64>()
        / grid.steps() as f64
        * (24.0 / h);
    let m = mean(&vars);
    let se = (vars.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (vars.len() - 1) as f64).sqrt() / (vars.len() as f64).sqrt();
    assert!((m - expected).abs() < 4.0 * se + 0.01 * expected, "mean {m} expected {expected} se {se}");
}

#[test]
fn price_range_and_quantiles() {
    assert_eq!(price_range(&[3.0, -1.0, 7.5, 2.0]), 8.5);
    let q = Quantiles::of(&(0..101).map(|i| i as f64).collect::<Vec<_>>());
    assert_eq!((q.q05, q.q50, q.q95), (5.0, 50.0, 95.0));
    assert_eq!(q.spread(), 90.0);
}

#[test]
fn paired_bootstrap_separates_a_shift_from_noise() {
    let a: Vec<f64> = (0..400).map(|i| ((i * 7919) % 1000) as f64 / 100.0).collect();
    let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + 1.0 + 0.1 * ((i % 7) as f64 - 3.0)).collect();
    let ci = paired_difference(&a, &b, 1000, 3).unwrap();
    assert!(ci.lower > 0.9 && ci.upper < 1.1 && ci.excludes_zero());
    let same = paired_difference(&a, &a, 200, 3).unwrap();
    assert!(!same.excludes_zero());
    assert_eq!(paired_difference(&a, &b, 1000, 3).unwrap(), ci);
    assert!(paired_difference(&a, &b[..10], 10, 3).is_err());
}

#[test]
fn scenario_rows_for_2019_and_m1_2050() {
    let conv = StorageConversion::default();
    for id in ScenarioId::ALL {
        let t = ScenarioTable::rte(id);
        t.validate().unwrap();
        let p = t.at(2019.0).unwrap();
        assert_eq!((p.renewable_multiplier, p.demand_multiplier, p.storage_gw), (1.0, 1.0, 5.0));
        assert_eq!(conv.intraday_mwh(p.storage_gw), 1250.0);
        let p50 = t.at(2050.0).unwrap();
        assert!(p50.renewable_multiplier >= 1.0 && p50.demand_multiplier >= 1.0);
    }
    let p = ScenarioTable::rte(ScenarioId::M1).at(2050.0).unwrap();
    assert_eq!((p.renewable_multiplier, p.storage_gw, p.demand_multiplier), (6.62, 29.1, 1.36));
    assert!(matches!("X9".parse::<ScenarioId>(), Err(Error::UnknownScenario(_))));
    assert!(ScenarioTable::rte(ScenarioId::N2).at(2018.0).is_err());
}

#[test]
fn scenario_market_scales_demand_components_and_storage() {
    let base = StochMarket::calibrated(0.0).unwrap();
    let unit = AgentParams::representative_unit();
    let p = ScenarioTable::rte(ScenarioId::M23).at(2040.0).unwrap();
    let m = scenario_market(&base, &unit, &p, &StorageConversion::default()).unwrap();
    assert_eq!(m.demand.components[0].weight, p.demand_multiplier);
    assert_eq!(m.demand.components[1].weight, -p.renewable_multiplier);
    assert_eq!(m.agents.len(), 1);
    let expected = unit.scaled(StorageConversion::default().intraday_mwh(p.storage_gw)).unwrap();
    assert!((m.agents[0].alpha - expected.alpha).abs() < 1e-15);
    assert_eq!((m.c0, m.c1), (base.c0, base.c1));
}

#[test]
fn cannibalization_ratio_is_one_without_added_storage() {
    let base = StochMarket::calibrated(1250.0).unwrap();
    let unit = AgentParams::representative_unit();
    let curve = cannibalization_curve(&base, &unit, &unit, &[0.0, 5.0], &small(300, 4), 200).unwrap();
    let r0 = curve.points[0].ratio;
    assert_eq!((r0.estimate, r0.lower, r0.upper), (1.0, 1.0, 1.0));
    assert!(curve.points[1].ratio.estimate < 1.0);
    assert_eq!(curve.steps.len(), 1);
    assert!(cannibalization_curve(&base, &unit, &unit, &[1.0, 2.0], &small(300, 4), 10).is_err());
    assert!(cannibalization_curve(&base, &unit, &unit, &[0.0, 2.0, 2.0], &small(300, 4), 10).is_err());
}

#[test]
fn renewables_raise_volatility_and_storage_lowers_it() {
    let unit = AgentParams::representative_unit();
    let mut base = StochMarket::calibrated(2000.0).unwrap();
    let low = revenue_report(&solve(&base, &small(400, 6)).unwrap(), &unit, 6).unwrap();
    base.demand.components[1].weight *= 3.0;
    let high = revenue_report(&solve(&base, &small(400, 6)).unwrap(), &unit, 6).unwrap();
    let ci = paired_difference(&low.volatility, &high.volatility, 500, 6).unwrap();
    assert!(ci.lower > 0.0, "{ci:?}");

    let bare = StochMarket::calibrated(0.0).unwrap();
    let none = solve(&bare, &small(400, 6)).unwrap();
    let vol_none: Vec<f64> = none.price.iter_paths().map(|p| realized_volatility(p, &none.grid).unwrap()).collect();
    let ci = paired_difference(&low.volatility, &vol_none, 500, 6).unwrap();
    assert!(ci.lower > 0.0, "{ci:?}");
}

#[test]
fn reports_are_reproducible() {
    let m = StochMarket::calibrated(1250.0).unwrap();
    let unit = AgentParams::representative_unit();
    let a = revenue_report(&solve(&m, &small(200, 8)).unwrap(), &unit, 8).unwrap();
    let b = revenue_report(&solve(&m, &small(200, 8)).unwrap(), &unit, 8).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(a.revenue, b.revenue);
    let q = a.revenue_quantiles;
    assert!(q.q05 <= q.q25 && q.q25 <= q.q50 && q.q50 <= q.q75 && q.q75 <= q.q95);
    assert_eq!(a.days, 200);
}
