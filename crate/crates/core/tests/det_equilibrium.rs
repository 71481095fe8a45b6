use proptest::prelude::*;
use storage_impact::det_equilibrium::*;
use storage_impact::lq_control::{aggregate_agents, AgentParams, PriceTrajectory};
use storage_impact::{TimeFunction, TimeGrid};

fn grid(steps: usize) -> TimeGrid {
    TimeGrid::new(24.0, steps).unwrap()
}

fn unit() -> AgentParams {
    AgentParams::new(84.0, 7.0, 500.0, 0.0, 0.0).unwrap()
}

fn sinusoid(steps: usize) -> PriceTrajectory {
    PriceTrajectory::from_fn(grid(steps), |t| 60.0 + 30.0 * (std::f64::consts::PI * t / 6.0).sin()).unwrap()
}

#[test]
fn c1_converges_at_second_order_under_refinement() {
    let reference = exogenous_c1(&sinusoid(24 * 160), &unit()).unwrap();
    let errs: Vec<f64> = [24, 48, 96]
        .iter()
        .map(|&n| (exogenous_c1(&sinusoid(n), &unit()).unwrap() - reference).abs())
        .collect();
    for w in errs.windows(2) {
        let ratio = w[1] / w[0];
        assert!((ratio - 0.25).abs() < 0.05, "refinement ratio {ratio}");
    }
    let rich = (4.0 * exogenous_c1(&sinusoid(480), &unit()).unwrap() - exogenous_c1(&sinusoid(240), &unit()).unwrap()) / 3.0;
    assert!((rich - reference).abs() < 1e-6 * reference.abs());
}

#[test]
fn state_difference_quotient_matches_midpoint_withdrawal() {
    let mut errs = Vec::new();
    for n in [48, 96, 192] {
        let s = exogenous_strategy(&sinusoid(n), &unit()).unwrap();
        let h = 24.0 / n as f64;
        let e = (0..n)
            .map(|k| (-(s.level[k + 1] - s.level[k]) / h - 0.5 * (s.withdrawal[k] + s.withdrawal[k + 1])).abs())
            .fold(0.0, f64::max);
        errs.push(e);
    }
    assert!(errs[1] < 0.3 * errs[0] && errs[2] < 0.3 * errs[1], "{errs:?}");
    assert_eq!(exogenous_strategy(&sinusoid(48), &unit()).unwrap().level[0], 0.0);
}

#[test]
fn calibrated_market_clears_after_refinement() {
    let m = DetMarket::calibrated(10_000.0).unwrap();
    let demand_scale = (0..=1920).map(|k| m.demand.eval(k as f64 / 80.0).abs()).fold(1.0, f64::max);
    let coarse = equilibrium_price(&m, &grid(480)).unwrap();
    let fine = equilibrium_price(&m, &grid(1920)).unwrap();
    assert!(fine.clearing_residual < 1e-6 * demand_scale, "{}", fine.clearing_residual);
    assert!(fine.clearing_residual < 0.1 * coarse.clearing_residual);
    assert!(fine.withdrawal_discrepancy < 1e-8 * demand_scale);
    let level_scale = fine.level.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    assert!(fine.level_discrepancy < 1e-5 * level_scale);
    assert!(fine.level_discrepancy < 0.1 * coarse.level_discrepancy);
    assert_eq!(fine.level[0], 0.0);
}

#[test]
fn price_range_narrows_with_storage() {
    let g = grid(480);
    let m = DetMarket::calibrated(10_000.0).unwrap();
    let eq = equilibrium_price(&m, &g).unwrap();
    let no: Vec<f64> = g.times().iter().map(|&t| m.no_storage_price(t)).collect();
    let range = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(eq.price_range() < range(&no));
}

#[test]
fn vanishing_capacity_recovers_no_storage_price() {
    let mut m = DetMarket::calibrated(1e-6).unwrap();
    m.demand = TimeFunction::Constant { value: 1500.0 };
    let eq = equilibrium_price(&m, &grid(96)).unwrap();
    let expected: f64 = (1500.0 + 7546.0) / 151.77;
    assert!((expected - 59.60).abs() < 5e-3);
    assert!(eq.price.iter().all(|p| (p - expected).abs() < 1e-6));
}

#[test]
fn limit_ladders() {
    let g = grid(480);
    let m = DetMarket::calibrated(1.0).unwrap();
    let small = limit_checks(&m, &g, &[1e-6, 1e-3, 1.0]).unwrap();
    assert!(small.deviation_monotone);
    assert!(small.entries[0].deviation_from_no_storage < 1e-3 * small.price_scale);
    let large = limit_checks(&m, &g, &[1e2, 1e4, 1e6, 1e8]).unwrap();
    assert!(large.slope_monotone);
    assert!(large.entries[3].max_slope < 1e-3 * large.price_scale);
    assert!(limit_checks(&m, &g, &[1e4, 1e2]).is_err());
}

#[test]
fn scaled_and_aggregated_routes_agree() {
    let g = grid(240);
    let p = 10_000.0;
    let scaled = DetMarket::calibrated(p).unwrap();
    let mut aggregated = scaled.clone();
    aggregated.agent = aggregate_agents(p, &unit(), &[]).unwrap();
    let a = equilibrium_price(&scaled, &g).unwrap();
    let b = equilibrium_price(&aggregated, &g).unwrap();
    for (x, y) in a.price.iter().zip(&b.price) {
        assert!((x - y).abs() < 1e-8);
    }
}

#[test]
fn x_solves_its_second_order_ode() {
    let g = grid(960);
    let m = DetMarket::calibrated(10_000.0).unwrap();
    let eq = equilibrium_price(&m, &g).unwrap();
    let c = eq.constants;
    assert_eq!(eq.x[0], 0.0);
    let h = g.dt();
    let scale = eq.x.iter().fold(0.0f64, |a, b| a.max(b.abs())) * c.omega_tilde.powi(2);
    for k in 1..g.steps() {
        let t = g.time(k);
        let forcing = c.omega / c.k * (m.demand.eval(t) - m.c0 + c.c1_tilde * c.omega.powi(2) * (c.omega * t).cosh());
        let xdd = (eq.x[k + 1] - 2.0 * eq.x[k] + eq.x[k - 1]) / (h * h);
        let res = xdd - c.omega_tilde.powi(2) * eq.x[k] - forcing;
        assert!(res.abs() < 1e-4 * scale, "k = {k}: residual {res}");
    }
}

#[test]
fn equilibrium_price_is_a_fixed_point_of_the_best_response() {
    let g = grid(1920);
    let m = DetMarket::calibrated(100.0).unwrap();
    let eq = equilibrium_price(&m, &g).unwrap();
    let response = exogenous_strategy(&eq.price_trajectory().unwrap(), &m.agent).unwrap();
    let scale = eq.withdrawal.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for k in 0..g.len() {
        assert!((response.withdrawal[k] - eq.withdrawal[k]).abs() < 1e-5 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn market_clears_for_random_markets(
        alpha in 1e-3f64..100.0, ratio in 0.01f64..1.0, gamma in 1e-3f64..1000.0,
        c1 in 10.0f64..500.0, amp in 0.0f64..8000.0, offset in -2000.0f64..4000.0,
    ) {
        let agent = AgentParams::new(alpha, alpha * ratio, gamma, 0.0, 0.0).unwrap();
        let demand = TimeFunction::Sinusoid { amplitude: amp, angular_frequency: std::f64::consts::PI / 6.0, offset };
        let m = DetMarket::new(-7546.0, c1, demand, agent, 24.0).unwrap();
        let eq = equilibrium_price(&m, &grid(1920)).unwrap();
        let scale = amp + offset.abs() + 7546.0;
        prop_assert!(eq.clearing_residual < 1e-6 * scale, "residual {} scale {}", eq.clearing_residual, scale);
    }
}
