//! Independent reference for the deterministic control problem: minimise the
//! time-discretised cost
//! `Σ h α/2 (q_k - P̄_k/(2α))² + β/2 trapezoid((Q - Q0)²) + γ/2 (Q_M - Q0)²`
//! over the levels on a fine grid, with `q_k = (Q_k - Q_{k+1})/h`.
//! The first-order conditions form a tridiagonal system. Two fine grids are
//! combined by Richardson extrapolation.

use storage_impact::lq_control::{AgentParams, PriceTrajectory};

pub struct QpSolution {
    pub level: Vec<f64>,
    pub withdrawal: Vec<f64>,
}

fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * c[i - 1];
        c[i] = if i + 1 < n { sup[i] / m } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

fn solve_fine(p: &AgentParams, price: &PriceTrajectory, factor: usize) -> QpSolution {
    let grid = price.grid();
    let big_m = grid.steps() * factor;
    let h = grid.horizon() / big_m as f64;
    let m: Vec<f64> = (0..big_m).map(|k| price.eval((k as f64 + 0.5) * h) / (2.0 * p.alpha)).collect();
    let (a, b, g) = (p.alpha, p.beta, p.gamma);
    let mut sub = vec![-a / h; big_m];
    let mut diag = vec![2.0 * a / h + b * h; big_m];
    let sup = vec![-a / h; big_m];
    let mut rhs = vec![0.0; big_m];
    for j in 1..big_m {
        rhs[j - 1] = a * (m[j] - m[j - 1]);
    }
    sub[0] = 0.0;
    diag[big_m - 1] = a / h + b * h / 2.0 + g;
    rhs[big_m - 1] = -a * m[big_m - 1];
    let mut z = vec![0.0];
    z.extend(thomas(&sub, &diag, &sup, &rhs));
    let q: Vec<f64> = z.windows(2).map(|w| (w[0] - w[1]) / h).collect();

    let n = grid.len();
    let mut level = vec![0.0; n];
    let mut withdrawal = vec![0.0; n];
    for k in 0..n {
        let j = k * factor;
        level[k] = p.q0_bar + z[j];
        let left = (j >= 2).then(|| 1.5 * q[j - 1] - 0.5 * q[j - 2]);
        let right = (j + 1 < big_m).then(|| 1.5 * q[j] - 0.5 * q[j + 1]);
        withdrawal[k] = match (left, right) {
            (Some(l), Some(r)) => 0.5 * (l + r),
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!(),
        };
    }
    QpSolution { level, withdrawal }
}

/// Richardson-extrapolated minimiser sampled at the price grid nodes.
pub fn solve_qp(p: &AgentParams, price: &PriceTrajectory, factor: usize) -> QpSolution {
    let coarse = solve_fine(p, price, factor);
    let fine = solve_fine(p, price, 2 * factor);
    let rich = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (4.0 * y - x) / 3.0).collect();
    QpSolution { level: rich(&coarse.level, &fine.level), withdrawal: rich(&coarse.withdrawal, &fine.withdrawal) }
}
