mod common;

use proptest::prelude::*;
use storage_impact::det_equilibrium::exogenous_strategy;
use storage_impact::lq_control::*;
use storage_impact::TimeGrid;

use common::qp::{solve_qp, QpSolution};

fn unit(q0: f64) -> AgentParams {
    AgentParams::new(84.0, 7.0, 500.0, 0.0, q0).unwrap()
}

fn sinusoidal_price(steps: usize) -> PriceTrajectory {
    let grid = TimeGrid::new(24.0, steps).unwrap();
    PriceTrajectory::from_fn(grid, |t| 55.0 + 35.0 * (std::f64::consts::PI * t / 6.0).sin() + 10.0 * (t / 5.0).cos())
        .unwrap()
}

fn deterministic(params: &AgentParams, price: &PriceTrajectory) -> AgentPath {
    simulate_agent(params, price, 0, &SimulationOptions::default()).unwrap()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

// 40-digit evaluations of the closed forms for alpha = 84, beta = 7, gamma = 500, T = 24.
const F_AT_0: f64 = 1.000_001_742_256_570_190_895_086_116_049_052;
const F1_AT_6_12: f64 = 0.051_119_585_726_525_807_147_010_796_185_263_39;
const F_AT_23_999: f64 = 20.497_929_663_481_546_090_052_222_405_314_03;
const F1_AT_0_24: f64 = 0.000_539_500_623_983_138_560_866_524_073_660_916_5;

#[test]
fn kernels_match_high_precision_reference() {
    let c = unit(0.0).coefficients(24.0).unwrap();
    assert!((c.omega - 0.288_675_134_594_812_882_254_574_390_250_978_7).abs() < 1e-16);
    assert!((c.u + 0.907_491_574_960_449_849_608_742_767_865_691_3).abs() < 1e-15);
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    assert!(rel(c.f(0.0).unwrap(), F_AT_0) < 1e-14);
    assert!(rel(c.f(23.999).unwrap(), F_AT_23_999) < 1e-12);
    assert!(rel(c.f1(6.0, 12.0).unwrap(), F1_AT_6_12) < 1e-13);
    assert!(rel(c.f1(0.0, 24.0).unwrap(), F1_AT_0_24) < 1e-12);
}

#[test]
fn riccati_ode_residual_by_central_differences() {
    let p = unit(0.0);
    let c = p.coefficients(24.0).unwrap();
    let h = 1e-5;
    for i in 1..=100 {
        let t = 24.0 * i as f64 / 101.0;
        let y = c.riccati_y(t).unwrap();
        let dy = (c.riccati_y(t + h).unwrap() - c.riccati_y(t - h).unwrap()) / (2.0 * h);
        let rhs = -(p.beta / 2.0 - 2.0 / p.alpha * y * y);
        assert!((dy - rhs).abs() < 1e-6, "t = {t}: {dy} vs {rhs}");
    }
}

#[test]
fn riccati_fixed_point_when_u_vanishes() {
    let g = (84.0f64 * 7.0).sqrt();
    let c = AgentParams::new(84.0, 7.0, g, 0.0, 0.0).unwrap().coefficients(24.0).unwrap();
    for t in [0.0, 1.5, 12.0, 24.0] {
        assert!((c.riccati_y(t).unwrap() - g / 2.0).abs() < 1e-12);
    }
}

#[test]
fn closed_loop_matches_discretized_quadratic_program() {
    for (steps, q0) in [(24, 0.0), (24, 0.5), (96, 0.5)] {
        let params = unit(q0);
        let price = sinusoidal_price(steps);
        let path = deterministic(&params, &price);
        let QpSolution { level, withdrawal } = solve_qp(&params, &price, 256);
        let scale = max_abs(&withdrawal);
        let dq = path.withdrawal.iter().zip(&withdrawal).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let dl = path.level.iter().zip(&level).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dq < 1e-4 * scale, "steps {steps}: withdrawal deviation {dq} vs scale {scale}");
        assert!(dl < 1e-4 * max_abs(&level).max(1e-3), "steps {steps}: level deviation {dl}");
    }
}

#[test]
fn closed_loop_matches_exogenous_price_strategy() {
    let params = unit(0.0);
    for steps in [24, 192] {
        let price = sinusoidal_price(steps);
        let path = deterministic(&params, &price);
        let s = exogenous_strategy(&price, &params).unwrap();
        let scale = max_abs(&s.withdrawal);
        for k in 0..price.grid().len() {
            assert!((path.withdrawal[k] - s.withdrawal[k]).abs() < 1e-6 * scale);
            assert!((path.level[k] - s.level[k]).abs() < 1e-6 * max_abs(&s.level));
        }
    }
}

#[test]
fn euler_scheme_converges_to_exponential_scheme() {
    let params = unit(0.5);
    let mut errs = Vec::new();
    for steps in [96, 192, 384] {
        let price = sinusoidal_price(steps);
        let ex = deterministic(&params, &price);
        let eu = simulate_agent(&params, &price, 0, &SimulationOptions { scheme: AgentScheme::EulerMaruyama, path_index: 0 })
            .unwrap();
        errs.push(ex.level.iter().zip(&eu.level).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    assert!(errs[1] < 0.6 * errs[0] && errs[2] < 0.6 * errs[1], "{errs:?}");
}

fn discrete_cost(p: &AgentParams, grid: &TimeGrid, price: &[f64], q: &[f64], level: &[f64]) -> f64 {
    let h = grid.dt();
    let running: Vec<f64> = (0..grid.len())
        .map(|k| {
            let m = q[k] - price[k] / (2.0 * p.alpha);
            let z = level[k] - p.q0_bar;
            p.alpha / 2.0 * m * m + p.beta / 2.0 * z * z
        })
        .collect();
    let trap: f64 = running.windows(2).map(|w| 0.5 * h * (w[0] + w[1])).sum();
    let zt = level[grid.steps()] - p.q0_bar;
    trap + p.gamma / 2.0 * zt * zt
}

#[test]
fn random_perturbations_never_lower_the_cost() {
    use rand::{Rng, SeedableRng};
    let params = unit(0.5);
    let price = sinusoidal_price(192);
    let grid = *price.grid();
    let path = deterministic(&params, &price);
    let base = discrete_cost(&params, &grid, price.values(), &path.withdrawal, &path.level);
    let scale = max_abs(&path.withdrawal);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let amp: f64 = scale * rng.random_range(0.01..0.2);
        let freq: f64 = rng.random_range(0.05..1.5);
        let phase: f64 = rng.random_range(0.0..6.3);
        let dq: Vec<f64> = grid.times().iter().map(|&t| amp * (freq * t + phase).sin()).collect();
        let dl: Vec<f64> = grid.times().iter().map(|&t| -amp / freq * (phase.cos() - (freq * t + phase).cos())).collect();
        let q2: Vec<f64> = path.withdrawal.iter().zip(&dq).map(|(a, b)| a + b).collect();
        let l2: Vec<f64> = path.level.iter().zip(&dl).map(|(a, b)| a + b).collect();
        let cost = discrete_cost(&params, &grid, price.values(), &q2, &l2);
        assert!(cost >= base, "perturbation lowered cost: {cost} < {base}");
    }
}

#[test]
fn aggregated_agent_equals_sum_of_individuals() {
    let base = unit(0.5);
    let price = sinusoidal_price(48);
    let single = deterministic(&base, &price);
    let agg = aggregate_agents(3.0, &base, &[]).unwrap();
    let group = deterministic(&agg, &price);
    for k in 0..price.grid().len() {
        assert!((3.0 * single.withdrawal[k] - group.withdrawal[k]).abs() < 1e-8);
        assert!((3.0 * single.level[k] - group.level[k]).abs() < 1e-8);
    }
}

#[test]
fn seeded_paths_are_bitwise_reproducible() {
    let mut p = unit(0.5);
    p.rho = 0.01;
    let price = sinusoidal_price(24);
    let a = simulate_agent(&p, &price, 42, &SimulationOptions::default()).unwrap();
    let b = simulate_agent(&p, &price, 42, &SimulationOptions::default()).unwrap();
    let c = simulate_agent(&p, &price, 43, &SimulationOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.level, c.level);
    assert_eq!(a.level[0], 0.5);
    p.rho = 0.0;
    let d = simulate_agent(&p, &price, 1, &SimulationOptions::default()).unwrap();
    let e = simulate_agent(&p, &price, 2, &SimulationOptions::default()).unwrap();
    assert_eq!(d, e);
}

#[test]
fn compensated_noise_leaves_the_mean_path_unchanged() {
    let mut p = unit(0.5);
    p.rho = 0.05;
    p.jumps = Some(JumpSpec { intensity: 0.5, marks: MarkDistribution::Exponential { mean: 0.1, sign: 1.0 } });
    let price = sinusoidal_price(48);
    let det = deterministic(&unit(0.5), &price);
    let n = 4000;
    let mut sum = vec![0.0; price.grid().len()];
    let mut sq = vec![0.0; price.grid().len()];
    for i in 0..n {
        let path = simulate_agent(&p, &price, 9, &SimulationOptions { path_index: i, ..Default::default() }).unwrap();
        for (k, q) in path.level.iter().enumerate() {
            sum[k] += q;
            sq[k] += q * q;
        }
    }
    for k in 0..sum.len() {
        let mean = sum[k] / n as f64;
        let sd = (sq[k] / n as f64 - mean * mean).max(0.0).sqrt();
        assert!((mean - det.level[k]).abs() <= 4.5 * sd / (n as f64).sqrt() + 1e-12, "k = {k}");
    }
}

#[test]
fn external_supply_enters_the_feedback() {
    let mut p = unit(0.5);
    p.kappa = Some(storage_impact::OUModel::new(0.5, 2.0, 0.0, 2.0).unwrap());
    let price = PriceTrajectory::from_fn(TimeGrid::new(24.0, 96).unwrap(), |_| 0.0).unwrap();
    let path = deterministic(&p, &price);
    assert!(path.kappa.iter().all(|&k| (k - 2.0).abs() < 1e-12));
    assert!(path.level.iter().skip(1).any(|&q| (q - 0.5).abs() > 1e-3));
    assert!((path.level[0] - 0.5).abs() == 0.0);
}

proptest! {
    #[test]
    fn scaling_leaves_kernels_unchanged(
        alpha in 0.01f64..500.0, beta in 0.01f64..50.0, gamma in 0.01f64..5000.0,
        c in 1e-3f64..1e3, t in 0.0f64..24.0, ds in 0.0f64..1.0,
    ) {
        let p = AgentParams::new(alpha, beta, gamma, 0.0, 0.0).unwrap();
        let q = AgentParams::new(c * alpha, c * beta, c * gamma, 0.0, 0.0).unwrap();
        let (a, b) = (p.coefficients(24.0).unwrap(), q.coefficients(24.0).unwrap());
        let s = t + ds * (24.0 - t);
        prop_assert!((a.omega - b.omega).abs() <= 1e-12 * a.omega);
        prop_assert!((a.u - b.u).abs() <= 1e-12);
        let (fa, fb) = (a.f(t).unwrap(), b.f(t).unwrap());
        prop_assert!((fa - fb).abs() <= 1e-10 * fa.abs().max(1.0));
        let (ka, kb) = (a.f1(t, s).unwrap(), b.f1(t, s).unwrap());
        prop_assert!((ka - kb).abs() <= 1e-10 * ka.abs().max(1e-300));
    }

    #[test]
    fn f_is_bounded_and_monotone(
        alpha in 0.01f64..500.0, beta in 0.01f64..50.0, gamma in 0.01f64..5000.0, t1 in 0.0f64..24.0, t2 in 0.0f64..24.0,
    ) {
        let p = AgentParams::new(alpha, beta, gamma, 0.0, 0.0).unwrap();
        prop_assume!((beta / alpha).sqrt() * 24.0 < 700.0);
        let c = p.coefficients(24.0).unwrap();
        let bound = 1f64.max(gamma / (alpha * beta).sqrt());
        let (f1, f2) = (c.f(t1).unwrap(), c.f(t2).unwrap());
        prop_assert!(f1.abs() <= bound * (1.0 + 1e-12));
        prop_assert!((c.omega * c.f(24.0).unwrap() - gamma / alpha).abs() <= 1e-10 * (gamma / alpha));
        let (lo, hi) = if t1 <= t2 { (f1, f2) } else { (f2, f1) };
        if c.u < 0.0 {
            prop_assert!(lo <= hi * (1.0 + 1e-12));
        } else if c.u > 0.0 {
            prop_assert!(lo >= hi * (1.0 - 1e-12));
        }
    }
}
