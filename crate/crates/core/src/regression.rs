//! Per-time-step least-squares regression on polynomial features of the
//! forward state.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHUNK: usize = 256;
const MIN_PIVOT: f64 = 1e-12;
const NEAR_COLLINEAR: f64 = 1e-3;

/// Exponent vectors of all monomials of total degree `<= degree` in `vars`
/// variables, constant first, then by degree.
pub fn monomials(vars: usize, degree: usize) -> Vec<Vec<u8>> {
    fn rec(vars: usize, left: usize, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if cur.len() == vars {
            out.push(cur.clone());
            return;
        }
        for e in (0..=left).rev() {
            cur.push(e as u8);
            rec(vars, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    for d in 0..=degree {
        let mut level = Vec::new();
        rec(vars, d, &mut Vec::with_capacity(vars), &mut level);
        out.extend(level.into_iter().filter(|m| m.iter().map(|&e| e as usize).sum::<usize>() == d));
    }
    out
}

/// Fitted conditional-expectation map at one time step.
///
/// Active state variables are centred and whitened, `z = L⁻¹(x - mean)` with
/// `L Lᵀ` their sample covariance, then clamped to `bounds` before the
/// monomials are formed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFit {
    /// Indices of the state variables that vary across paths.
    pub active: Vec<usize>,
    pub mean: Vec<f64>,
    /// `L⁻¹`, row-major lower triangular.
    pub whitening: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
    pub exponents: Vec<Vec<u8>>,
    /// One coefficient vector per regressed target.
    pub coefficients: Vec<Vec<f64>>,
}

impl StepFit {
    /// Identically zero map for `targets` outputs.
    pub fn zero(targets: usize) -> Self {
        Self {
            active: Vec::new(),
            mean: Vec::new(),
            whitening: Vec::new(),
            bounds: Vec::new(),
            exponents: vec![Vec::new()],
            coefficients: vec![vec![0.0]; targets],
        }
    }

    fn whiten(&self, state: &[f64], z: &mut [f64]) {
        let d = self.active.len();
        for a in 0..d {
            z[a] = (0..=a).map(|b| self.whitening[a * d + b] * (state[self.active[b]] - self.mean[b])).sum();
        }
    }

    pub fn basis_len(&self) -> usize {
        self.exponents.len()
    }

    pub fn features(&self, state: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let mut x = vec![0.0; self.active.len()];
        self.whiten(state, &mut x);
        for (z, &(lo, hi)) in x.iter_mut().zip(&self.bounds) {
            *z = z.clamp(lo, hi);
        }
        for e in &self.exponents {
            let mut prod = 1.0;
            for (xi, &p) in x.iter().zip(e) {
                for _ in 0..p {
                    prod *= xi;
                }
            }
            out.push(prod);
        }
    }

    /// Evaluate every target at `state`.
    pub fn eval(&self, state: &[f64], buf: &mut Vec<f64>, out: &mut [f64]) {
        self.features(state, buf);
        for (o, c) in out.iter_mut().zip(&self.coefficients) {
            *o = c.iter().zip(buf.iter()).map(|(a, b)| a * b).sum();
        }
    }
}

/// Result of one regression step.
#[derive(Debug, Clone)]
pub struct Regression {
    pub fit: StepFit,
    /// Fitted values, `fitted[target][path]`.
    pub fitted: Vec<Vec<f64>>,
    /// `max |Bᵀ(y - ŷ)| / sqrt(Σ B² Σ y²)` over basis functions and targets.
    pub normal_residual: f64,
}

/// Least squares of each target on polynomial features of the state.
///
/// `states[p]` is the state vector of path `p`; `targets[k][p]` the k-th
/// response on path `p`. Variables whose spread is negligible are dropped.
/// The last `linear_tail` state variables enter jointly affinely (possibly
/// multiplied by monomials of the others) and are never clamped; the other
/// whitened coordinates are clamped to their sample range.
pub fn regress(
    states: &[Vec<f64>],
    targets: &[Vec<f64>],
    degree: usize,
    linear_tail: usize,
    step: usize,
) -> Result<Regression> {
    let n = states.len();
    if n == 0 {
        return Err(Error::BasisDegeneracy { step, reason: "no paths".into() });
    }
    let dim = states[0].len();
    let mut active = Vec::new();
    let mut mean = Vec::new();
    for v in 0..dim {
        let m = states.iter().map(|s| s[v]).sum::<f64>() / n as f64;
        let var = states.iter().map(|s| (s[v] - m).powi(2)).sum::<f64>() / n as f64;
        if var.sqrt() > 1e-9 * m.abs().max(1e-6) {
            active.push(v);
            mean.push(m);
        }
    }
    let cov_of = |idx: &[usize], mu: &[f64]| {
        DMatrix::from_fn(idx.len(), idx.len(), |a, b| {
            states.iter().map(|s| (s[idx[a]] - mu[a]) * (s[idx[b]] - mu[b])).sum::<f64>() / n as f64
        })
    };
    let full = cov_of(&active, &mean);
    if let Some(chol) = full.clone().cholesky() {
        let l = chol.l();
        if let Some(a) = (0..active.len()).find(|&a| !(l[(a, a)] * l[(a, a)] / full[(a, a)] > MIN_PIVOT)) {
            return Err(Error::BasisDegeneracy {
                step,
                reason: format!("state variable {} is collinear with the others", active[a]),
            });
        }
    } else if !active.is_empty() {
        return Err(Error::BasisDegeneracy { step, reason: "state covariance is not positive definite".into() });
    }
    let mut kept: Vec<usize> = Vec::new();
    for a in 0..active.len() {
        let mut idx: Vec<usize> = kept.iter().map(|&k| active[k]).collect();
        idx.push(active[a]);
        let mu: Vec<f64> = kept.iter().map(|&k| mean[k]).chain([mean[a]]).collect();
        let c = cov_of(&idx, &mu);
        let last = idx.len() - 1;
        let pivot = c.clone().cholesky().map_or(0.0, |ch| ch.l()[(last, last)].powi(2) / c[(last, last)]);
        if pivot > NEAR_COLLINEAR {
            kept.push(a);
        }
    }
    let active: Vec<usize> = kept.iter().map(|&k| active[k]).collect();
    let mean: Vec<f64> = kept.iter().map(|&k| mean[k]).collect();
    let d = active.len();
    let cov = cov_of(&active, &mean);
    let whitening = if d == 0 {
        Vec::new()
    } else {
        let l = cov.clone().cholesky().ok_or_else(|| Error::BasisDegeneracy {
            step,
            reason: "state covariance is not positive definite".into(),
        })?.l();
        let inv = l.solve_lower_triangular(&DMatrix::identity(d, d)).ok_or_else(|| Error::BasisDegeneracy {
            step,
            reason: "singular state covariance".into(),
        })?;
        (0..d * d).map(|k| inv[(k / d, k % d)]).collect()
    };
    let linear: Vec<bool> = active.iter().map(|&v| v + linear_tail >= dim).collect();
    let exponents = if d == 0 {
        vec![Vec::new()]
    } else {
        monomials(d, degree)
            .into_iter()
            .filter(|m| m.iter().zip(&linear).filter(|(_, &l)| l).map(|(&e, _)| e).sum::<u8>() <= 1)
            .collect()
    };
    let mut fit = StepFit { active, mean, whitening, bounds: vec![(0.0, 0.0); d], exponents, coefficients: Vec::new() };
    let mut z = vec![0.0; d];
    let mut range = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
    for s in states {
        fit.whiten(s, &mut z);
        for (r, &v) in range.iter_mut().zip(&z) {
            *r = (r.0.min(v), r.1.max(v));
        }
    }
    fit.bounds = range
        .into_iter()
        .zip(&linear)
        .map(|((lo, hi), &l)| if l { (f64::NEG_INFINITY, f64::INFINITY) } else { (lo, hi) })
        .collect();
    let k = fit.basis_len();
    let t = targets.len();
    if n < k {
        return Err(Error::BasisDegeneracy { step, reason: format!("{n} paths for {k} basis functions") });
    }

    let partials: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = states
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut gram = vec![0.0; k * k];
            let mut rhs = vec![0.0; k * t];
            let mut yy = vec![0.0; t];
            let mut buf = Vec::with_capacity(k);
            for (o, s) in chunk.iter().enumerate() {
                let p = c * CHUNK + o;
                fit.features(s, &mut buf);
                for a in 0..k {
                    for b in a..k {
                        gram[a * k + b] += buf[a] * buf[b];
                    }
                    for (j, y) in targets.iter().enumerate() {
                        rhs[j * k + a] += buf[a] * y[p];
                    }
                }
                for (j, y) in targets.iter().enumerate() {
                    yy[j] += y[p] * y[p];
                }
            }
            (gram, rhs, yy)
        })
        .collect();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k * t];
    let mut yy = vec![0.0; t];
    for (g, r, y) in &partials {
        gram.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        rhs.iter_mut().zip(r).for_each(|(a, b)| *a += b);
        yy.iter_mut().zip(y).for_each(|(a, b)| *a += b);
    }
    let g = DMatrix::from_fn(k, k, |a, b| if a <= b { gram[a * k + b] } else { gram[b * k + a] });
    let chol = g.clone().cholesky().ok_or_else(|| Error::BasisDegeneracy {
        step,
        reason: "Gram matrix is not positive definite".into(),
    })?;
    let l = chol.l();
    for a in 0..k {
        let pivot = l[(a, a)] * l[(a, a)] / g[(a, a)];
        if !(pivot > MIN_PIVOT) {
            return Err(Error::BasisDegeneracy {
                step,
                reason: format!("relative pivot {pivot:e} for basis function {a}"),
            });
        }
    }
    let mut coefficients = Vec::with_capacity(t);
    for j in 0..t {
        let b = DVector::from_column_slice(&rhs[j * k..(j + 1) * k]);
        coefficients.push(chol.solve(&b).iter().copied().collect::<Vec<f64>>());
    }
    fit.coefficients = coefficients;

    let fitted: Vec<Vec<f64>> = (0..t)
        .map(|j| {
            states
                .par_iter()
                .map_init(
                    || Vec::with_capacity(k),
                    |buf, s| {
                        fit.features(s, buf);
                        fit.coefficients[j].iter().zip(buf.iter()).map(|(a, b)| a * b).sum()
                    },
                )
                .collect()
        })
        .collect();

    let mut normal_residual: f64 = 0.0;
    let mut buf = Vec::with_capacity(k);
    let mut bt_r = vec![0.0; k * t];
    for (p, s) in states.iter().enumerate() {
        fit.features(s, &mut buf);
        for j in 0..t {
            let r = targets[j][p] - fitted[j][p];
            for a in 0..k {
                bt_r[j * k + a] += buf[a] * r;
            }
        }
    }
    for j in 0..t {
        for a in 0..k {
            let den = (gram[a * k + a] * yy[j]).sqrt();
            if den > 0.0 {
                normal_residual = normal_residual.max(bt_r[j * k + a].abs() / den);
            }
        }
    }
    Ok(Regression { fit, fitted, normal_residual })
}
