//! Uniform time grids, per-interval quadrature and deterministic time functions.
//!
//! Every integral over a grid is evaluated interval by interval with a
//! five-point Gauss–Legendre rule, so integrands that are only piecewise
//! smooth (kinks at grid nodes, e.g. linearly interpolated prices) keep the
//! full order of the rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stochastics::SeasonalProfile;

/// Largest `rate * horizon` for which hyperbolic kernels are evaluated.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("horizon", format!("must be finite and > 0, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::param("steps", "grid needs at least 2 points"));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of intervals.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid points (`steps + 1`).
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            self.horizon * i as f64 / self.steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.time(i)).collect()
    }

    /// Interval index containing `t`, clamped to the grid.
    pub fn interval_of(&self, t: f64) -> usize {
        let k = (t / self.dt()).floor();
        if k <= 0.0 {
            0
        } else {
            (k as usize).min(self.steps - 1)
        }
    }
}

const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Five-point Gauss–Legendre rule on `[a, b]`.
pub fn gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    if half == 0.0 {
        return 0.0;
    }
    let mid = 0.5 * (a + b);
    GL_NODES
        .iter()
        .zip(GL_WEIGHTS.iter())
        .map(|(x, w)| w * f(mid + half * x))
        .sum::<f64>()
        * half
}

/// Adaptive bisection on top of [`gauss_legendre`], for integrands with a
/// nearby singularity.
pub fn adaptive_gauss_legendre<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let mid = 0.5 * (a + b);
        let left = gauss_legendre(f, a, mid);
        let right = gauss_legendre(f, mid, b);
        let both = left + right;
        if depth == 0 || (both - whole).abs() <= tol * both.abs().max(f64::MIN_POSITIVE) {
            both
        } else {
            rec(f, a, mid, left, tol, depth - 1) + rec(f, mid, b, right, tol, depth - 1)
        }
    }
    let whole = gauss_legendre(&f, a, b);
    rec(&f, a, b, whole, tol, 40)
}

/// `∫_0^T f` summed over the grid intervals.
pub fn integrate_on_grid<F: Fn(f64) -> f64>(f: F, grid: &TimeGrid) -> f64 {
    (0..grid.steps())
        .map(|k| gauss_legendre(&f, grid.time(k), grid.time(k + 1)))
        .sum()
}

/// Running hyperbolic convolutions at every grid node:
/// `S_k = ∫_0^{t_k} sinh(rate (t_k - s)) g(s) ds` and
/// `C_k = ∫_0^{t_k} cosh(rate (t_k - s)) g(s) ds`.
///
/// Uses the addition formulas to step from `t_k` to `t_{k+1}`, which avoids
/// the cancellation of an `e^{+x}` / `e^{-x}` split.
pub fn hyperbolic_convolution<F: Fn(f64) -> f64>(
    rate: f64,
    grid: &TimeGrid,
    g: F,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rate.abs() * grid.horizon() > MAX_EXPONENT {
        return Err(Error::param(
            "rate",
            format!("rate*T = {} exceeds overflow guard {MAX_EXPONENT}", rate * grid.horizon()),
        ));
    }
    let h = grid.dt();
    let (sh, ch) = ((rate * h).sinh(), (rate * h).cosh());
    let mut s = vec![0.0; grid.len()];
    let mut c = vec![0.0; grid.len()];
    for k in 0..grid.steps() {
        let (a, b) = (grid.time(k), grid.time(k + 1));
        let local_s = gauss_legendre(|x| (rate * (b - x)).sinh() * g(x), a, b);
        let local_c = gauss_legendre(|x| (rate * (b - x)).cosh() * g(x), a, b);
        s[k + 1] = ch * s[k] + sh * c[k] + local_s;
        c[k + 1] = ch * c[k] + sh * s[k] + local_c;
    }
    Ok((s, c))
}

/// Cumulative `∫_0^{t_k} g` at every grid node.
pub fn cumulative_integral<F: Fn(f64) -> f64>(grid: &TimeGrid, g: F) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for k in 0..grid.steps() {
        out[k + 1] = out[k] + gauss_legendre(&g, grid.time(k), grid.time(k + 1));
    }
    out
}

/// Values sampled on a uniform grid, linearly interpolated in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    grid: TimeGrid,
    values: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::param("values", format!("non-finite value at index {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn<F: Fn(f64) -> f64>(grid: TimeGrid, f: F) -> Result<Self> {
        let values = grid.times().into_iter().map(f).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, t: f64) -> f64 {
        let k = self.grid.interval_of(t);
        let (a, b) = (self.grid.time(k), self.grid.time(k + 1));
        let w = ((t - a) / (b - a)).clamp(0.0, 1.0);
        self.values[k] * (1.0 - w) + self.values[k + 1] * w
    }
}

/// A deterministic function of time in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFunction {
    Constant { value: f64 },
    /// `amplitude * sin(angular_frequency * t) + offset`
    Sinusoid { amplitude: f64, angular_frequency: f64, offset: f64 },
    /// Piecewise-constant hour-of-day profile.
    Hourly { profile: SeasonalProfile },
    /// Uniformly spaced samples over `[0, horizon]`, linearly interpolated.
    Sampled { horizon: f64, values: Vec<f64> },
}

impl TimeFunction {
    pub fn zero() -> Self {
        TimeFunction::Constant { value: 0.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant { value } => *value,
            TimeFunction::Sinusoid { amplitude, angular_frequency, offset } => {
                amplitude * (angular_frequency * t).sin() + offset
            }
            TimeFunction::Hourly { profile } => profile.value_at(t),
            TimeFunction::Sampled { horizon, values } => {
                let n = values.len() - 1;
                let x = (t / horizon * n as f64).clamp(0.0, n as f64);
                let k = (x.floor() as usize).min(n.saturating_sub(1));
                let w = x - k as f64;
                if n == 0 {
                    values[0]
                } else {
                    values[k] * (1.0 - w) + values[k + 1] * w
                }
            }
        }
    }

    /// Analytic time derivative where available, central difference otherwise.
    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            TimeFunction::Constant { .. } => 0.0,
            TimeFunction::Sinusoid { amplitude, angular_frequency, .. } => {
                amplitude * angular_frequency * (angular_frequency * t).cos()
            }
            _ => {
                let eps = 1e-6;
                (self.eval(t + eps) - self.eval(t - eps)) / (2.0 * eps)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TimeFunction::Constant { value } if !value.is_finite() => {
                Err(Error::param("time_function", "non-finite constant"))
            }
            TimeFunction::Sinusoid { amplitude, angular_frequency, offset }
                if !(amplitude.is_finite() && angular_frequency.is_finite() && offset.is_finite()) =>
            {
                Err(Error::param("time_function", "non-finite sinusoid parameter"))
            }
            TimeFunction::Hourly { profile } => profile.validate(),
            TimeFunction::Sampled { horizon, values } => {
                if values.is_empty() || !(horizon.is_finite() && *horizon > 0.0) {
                    return Err(Error::param("time_function", "sampled function needs values and a positive horizon"));
                }
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::param("time_function", "non-finite sample"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_degenerate_input() {
        assert!(TimeGrid::new(24.0, 0).is_err());
        assert!(TimeGrid::new(0.0, 10).is_err());
        assert!(TimeGrid::new(f64::NAN, 10).is_err());
        let g = TimeGrid::new(24.0, 96).unwrap();
        assert_eq!(g.len(), 97);
        assert_eq!(g.time(96), 24.0);
        assert_eq!(g.interval_of(24.0), 95);
        assert_eq!(g.interval_of(-1.0), 0);
    }

    #[test]
    fn gauss_legendre_is_exact_for_degree_nine() {
        let v = gauss_legendre(|x| x.powi(9) + 3.0 * x.powi(4), 0.0, 2.0);
        let exact = 2f64.powi(10) / 10.0 + 3.0 * 2f64.powi(5) / 5.0;
        assert!((v - exact).abs() < 1e-10 * exact);
    }

    #[test]
    fn hyperbolic_convolution_matches_closed_form() {
        // g = 1: S = (cosh(rt)-1)/r, C = sinh(rt)/r
        let grid = TimeGrid::new(24.0, 48).unwrap();
        let r = 0.3;
        let (s, c) = hyperbolic_convolution(r, &grid, |_| 1.0).unwrap();
        for (k, t) in grid.times().into_iter().enumerate() {
            let es = ((r * t).cosh() - 1.0) / r;
            let ec = (r * t).sinh() / r;
            assert!((s[k] - es).abs() < 1e-9 * (1.0 + es.abs()));
            assert!((c[k] - ec).abs() < 1e-9 * (1.0 + ec.abs()));
        }
    }

    #[test]
    fn overflow_guard() {
        let grid = TimeGrid::new(24.0, 10).unwrap();
        assert!(hyperbolic_convolution(30.0, &grid, |_| 1.0).is_err());
    }

    #[test]
    fn piecewise_linear_interpolates() {
        let grid = TimeGrid::new(2.0, 2).unwrap();
        let p = PiecewiseLinear::new(grid, vec![0.0, 10.0, 0.0]).unwrap();
        assert_eq!(p.eval(0.5), 5.0);
        assert_eq!(p.eval(1.5), 5.0);
        assert_eq!(p.eval(2.0), 0.0);
        assert!(PiecewiseLinear::new(grid, vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn sampled_time_function() {
        let f = TimeFunction::Sampled { horizon: 24.0, values: vec![0.0, 24.0] };
        assert!((f.eval(6.0) - 6.0).abs() < 1e-12);
        assert!((f.derivative(6.0) - 1.0).abs() < 1e-6);
    }
}
