//! Ornstein–Uhlenbeck models with an hour-of-day profile: calibration from
//! hourly data and reproducible path simulation.

use std::io::Read;

use chrono::{DateTime, Duration, NaiveDateTime, Timelike};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng::{stream_rng, streams};

/// `dX = theta (mu - X) dt + sigma dW`, `X_0 = x0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OUModel {
    /// Mean-reversion speed (1/h).
    pub theta: f64,
    /// Long-run mean (MW).
    pub mu: f64,
    /// Diffusion scale (MW/√h).
    pub sigma: f64,
    /// Initial value (MW).
    #[serde(default)]
    pub x0: f64,
}

impl OUModel {
    pub fn new(theta: f64, mu: f64, sigma: f64, x0: f64) -> Result<Self> {
        let m = Self { theta, mu, sigma, x0 };
        m.validate()?;
        Ok(m)
    }

    /// Residual consumption estimates used for the French intraday market.
    pub fn calibrated_consumption() -> Self {
        Self { theta: 316.0, mu: 8.09, sigma: 35615.0, x0: 8.09 }
    }

    /// Renewable production estimates used for the French intraday market.
    pub fn calibrated_renewables() -> Self {
        Self { theta: 176.0, mu: 7.58, sigma: 26219.0, x0: 7.58 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta.is_finite() && self.theta >= 0.0) {
            return Err(Error::param("theta", format!("must be finite and >= 0, got {}", self.theta)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::param("sigma", format!("must be finite and >= 0, got {}", self.sigma)));
        }
        if !self.mu.is_finite() || !self.x0.is_finite() {
            return Err(Error::param("mu", "mean and initial value must be finite"));
        }
        Ok(())
    }

    pub fn stationary_variance(&self) -> Option<f64> {
        (self.theta > 0.0).then(|| self.sigma * self.sigma / (2.0 * self.theta))
    }

    /// Conditional mean after `h` hours starting from `x`.
    pub fn conditional_mean(&self, x: f64, h: f64) -> f64 {
        self.mu + (x - self.mu) * (-self.theta * h).exp()
    }

    /// Standard deviation of the exact transition over `h` hours.
    pub fn transition_std(&self, h: f64) -> f64 {
        if self.theta == 0.0 {
            self.sigma * h.sqrt()
        } else {
            self.sigma * (-(-2.0 * self.theta * h).exp_m1() / (2.0 * self.theta)).sqrt()
        }
    }

    /// Exact transition driven by a standard normal `z`.
    pub fn step(&self, x: f64, h: f64, z: f64) -> f64 {
        self.conditional_mean(x, h) + self.transition_std(h) * z
    }

    /// Euler–Maruyama transition, kept for convergence comparisons.
    pub fn euler_step(&self, x: f64, h: f64, z: f64) -> f64 {
        x + self.theta * (self.mu - x) * h + self.sigma * h.sqrt() * z
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma == 0.0
    }
}

/// Hour-of-day means, piecewise constant on `[h, h+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SeasonalProfile(Vec<f64>);

impl SeasonalProfile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let p = Self(values);
        p.validate()?;
        Ok(p)
    }

    pub fn zero() -> Self {
        Self(vec![0.0; 24])
    }

    pub fn constant(v: f64) -> Self {
        Self(vec![v; 24])
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() != 24 {
            return Err(Error::LengthMismatch { expected: 24, got: self.0.len() });
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("profile", "non-finite hourly mean"));
        }
        Ok(())
    }

    pub fn slots(&self) -> &[f64] {
        &self.0
    }

    pub fn slot_of(t: f64) -> usize {
        (t.floor() as i64).rem_euclid(24) as usize
    }

    pub fn value_at(&self, t: f64) -> f64 {
        self.0[Self::slot_of(t)]
    }
}

/// Hour-of-day profile and the residual `data - profile`.
///
/// `data` must cover whole days unless `truncate` is set, in which case the
/// trailing partial day is dropped.
pub fn deseasonalize(data: &[f64], truncate: bool) -> Result<(SeasonalProfile, Vec<f64>)> {
    if data.len() < 24 {
        return Err(Error::Data(format!("need at least one full day of hourly data, got {} values", data.len())));
    }
    let usable = if data.len() % 24 == 0 {
        data.len()
    } else if truncate {
        data.len() - data.len() % 24
    } else {
        return Err(Error::Data(format!(
            "{} hourly values is not a whole number of days (enable truncation to drop the last {} values)",
            data.len(),
            data.len() % 24
        )));
    };
    if let Some(i) = data[..usable].iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at index {i}")));
    }
    let days = (usable / 24) as f64;
    let mut profile = vec![0.0; 24];
    for (j, v) in data[..usable].iter().enumerate() {
        profile[j % 24] += v;
    }
    profile.iter_mut().for_each(|p| *p /= days);
    let residual = data[..usable].iter().enumerate().map(|(j, v)| v - profile[j % 24]).collect();
    Ok((SeasonalProfile(profile), residual))
}

/// Result of an exact-discretisation maximum-likelihood OU fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuFit {
    pub model: OUModel,
    /// AR(1) slope `X_{k+1} = a X_k + b + eps`.
    pub a: f64,
    pub b: f64,
    /// MLE of the innovation variance.
    pub innovation_variance: f64,
    pub observations: usize,
}

/// Gaussian MLE of `(theta, mu, sigma)` from observations spaced `dt` hours apart.
///
/// The exact OU transition is an AR(1) with `a = e^{-theta dt}`,
/// `b = mu (1 - a)` and innovation variance `sigma^2 (1 - a^2) / (2 theta)`,
/// so the likelihood is maximised by the least-squares AR(1) fit.
pub fn ou_mle_fit(series: &[f64], dt: f64) -> Result<OuFit> {
    if series.len() < 3 {
        return Err(Error::Data(format!("OU fit needs at least 3 observations, got {}", series.len())));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::param("dt", format!("must be > 0, got {dt}")));
    }
    let n = series.len() - 1;
    let x = &series[..n];
    let y = &series[1..];
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(u, v)| (u - mx) * (v - my)).sum();
    if sxx <= f64::EPSILON * (1.0 + mx * mx) * n as f64 {
        return Err(Error::NonStationaryFit { a: f64::NAN, n: series.len(), reason: "series has zero variance".into() });
    }
    let a = sxy / sxx;
    let b = my - a * mx;
    if !(a > 0.0 && a < 1.0) {
        let reason = if a <= 0.0 {
            format!(
                "AR slope <= 0: mean reversion too fast to resolve at dt = {dt} h (sample variance {:.4e})",
                sxx / n as f64
            )
        } else {
            "AR slope >= 1: no mean reversion detected".to_string()
        };
        return Err(Error::NonStationaryFit { a, n: series.len(), reason });
    }
    let innovation_variance = x.iter().zip(y).map(|(u, v)| (v - a * u - b).powi(2)).sum::<f64>() / n as f64;
    let theta = -a.ln() / dt;
    let mu = b / (1.0 - a);
    let sigma = (innovation_variance * 2.0 * theta / (1.0 - a * a)).sqrt();
    Ok(OuFit {
        model: OUModel { theta, mu, sigma, x0: series[0] },
        a,
        b,
        innovation_variance,
        observations: series.len(),
    })
}

/// Hour-of-day profile and OU fit of the deseasonalized residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub profile: SeasonalProfile,
    pub fit: OuFit,
}

impl Calibration {
    /// Long-run level `mean(profile) + mu`.
    pub fn level(&self) -> f64 {
        self.profile.slots().iter().sum::<f64>() / 24.0 + self.fit.model.mu
    }
}

/// Deseasonalize hourly data, then fit an OU model to the residual.
pub fn calibrate(hourly: &[f64], truncate: bool) -> Result<Calibration> {
    let (profile, residual) = deseasonalize(hourly, truncate)?;
    let fit = ou_mle_fit(&residual, 1.0)?;
    Ok(Calibration { profile, fit })
}

/// Simulated processes: one row per path, one column per grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub grid: TimeGrid,
    pub label: String,
    pub seed: u64,
    paths: usize,
    values: Vec<f64>,
}

impl PathSet {
    pub fn new(grid: TimeGrid, label: impl Into<String>, seed: u64, paths: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != paths * grid.len() {
            return Err(Error::LengthMismatch { expected: paths * grid.len(), got: values.len() });
        }
        Ok(Self { grid, label: label.into(), seed, paths, values })
    }

    pub fn zeros(grid: TimeGrid, label: impl Into<String>, seed: u64, paths: usize) -> Self {
        Self { grid, label: label.into(), seed, paths, values: vec![0.0; paths * grid.len()] }
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.grid.len()
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[p * n..(p + 1) * n]
    }

    pub fn path_mut(&mut self, p: usize) -> &mut [f64] {
        let n = self.grid.len();
        &mut self.values[p * n..(p + 1) * n]
    }

    pub fn get(&self, p: usize, i: usize) -> f64 {
        self.values[p * self.grid.len() + i]
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.paths).map(|p| self.get(p, i)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter_paths(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.grid.len())
    }

    pub fn mean_path(&self) -> Vec<f64> {
        (0..self.grid.len())
            .map(|i| (0..self.paths).map(|p| self.get(p, i)).sum::<f64>() / self.paths as f64)
            .collect()
    }
}

/// OU deviations without the profile, one row per path, on stream `stream`.
pub(crate) fn simulate_ou_raw(model: &OUModel, grid: &TimeGrid, paths: usize, seed: u64, stream: u64) -> Vec<f64> {
    let n = grid.len();
    let h = grid.dt();
    let mut values = vec![0.0; paths * n];
    values.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        let mut rng = stream_rng(seed, stream, p as u64);
        row[0] = model.x0;
        for i in 1..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            row[i] = model.step(row[i - 1], h, z);
        }
    });
    values
}

pub(crate) fn warn_fast_reversion(model: &OUModel, grid: &TimeGrid, what: &str) {
    if model.theta * grid.dt() > 5.0 {
        log::warn!(
            "{what}: theta*dt = {:.1} > 5, the process is sampled in its near-white-noise regime",
            model.theta * grid.dt()
        );
    }
}

/// `profile + OU` paths sampled with the exact transition.
pub fn simulate_ou(
    model: &OUModel,
    profile: &SeasonalProfile,
    grid: &TimeGrid,
    paths: usize,
    seed: u64,
) -> Result<PathSet> {
    model.validate()?;
    profile.validate()?;
    if paths == 0 {
        return Err(Error::param("paths", "need at least one path"));
    }
    warn_fast_reversion(model, grid, "simulate_ou");
    let mut values = simulate_ou_raw(model, grid, paths, seed, streams::OU_SIMULATION);
    let shift: Vec<f64> = grid.times().iter().map(|&t| profile.value_at(t)).collect();
    for row in values.chunks_mut(grid.len()) {
        row.iter_mut().zip(&shift).for_each(|(v, s)| *v += s);
    }
    PathSet::new(*grid, "ou", seed, paths, values)
}

/// Hourly series parsed from a `timestamp,value` CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlySeries {
    pub start: NaiveDateTime,
    pub values: Vec<f64>,
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Strict reader for hourly `timestamp,value` data with a header row.
///
/// Timestamps must fall on the hour and be consecutive; every missing hour is
/// reported.
pub fn read_hourly_csv<R: Read>(reader: R) -> Result<HourlySeries> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let mut stamps: Vec<NaiveDateTime> = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Data(format!("row {}: {e}", line + 2)))?;
        if rec.len() != 2 {
            return Err(Error::Data(format!("row {}: expected 2 columns, got {}", line + 2, rec.len())));
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| Error::Data(format!("row {}: unparseable timestamp `{}`", line + 2, &rec[0])))?;
        if ts.minute() != 0 || ts.second() != 0 {
            return Err(Error::Data(format!("row {}: timestamp {ts} is not on the hour", line + 2)));
        }
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| Error::Data(format!("row {}: unparseable value `{}`", line + 2, &rec[1])))?;
        if !v.is_finite() {
            return Err(Error::Data(format!("row {}: non-finite value", line + 2)));
        }
        stamps.push(ts);
        values.push(v);
    }
    let Some(&start) = stamps.first() else {
        return Err(Error::Data("no data rows".into()));
    };
    let mut missing = Vec::new();
    for w in stamps.windows(2) {
        let gap = w[1] - w[0];
        if gap <= Duration::zero() {
            return Err(Error::Data(format!("timestamps not strictly increasing at {}", w[1])));
        }
        let mut t = w[0] + Duration::hours(1);
        while t < w[1] {
            missing.push(t);
            t += Duration::hours(1);
        }
    }
    if !missing.is_empty() {
        let shown: Vec<String> = missing.iter().take(20).map(|t| t.to_string()).collect();
        let more = if missing.len() > 20 { format!(" (+{} more)", missing.len() - 20) } else { String::new() };
        return Err(Error::Data(format!("{} missing hours: {}{more}", missing.len(), shown.join(", "))));
    }
    Ok(HourlySeries { start, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_data_has_flat_profile_and_zero_residual() {
        let data = vec![3.5; 48];
        let (p, r) = deseasonalize(&data, false).unwrap();
        assert!(p.slots().iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert!(r.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn periodic_data_has_zero_residual() {
        let data: Vec<f64> = (0..24 * 5).map(|j| ((j % 24) as f64).sin() * 100.0).collect();
        let (_, r) = deseasonalize(&data, false).unwrap();
        assert!(r.iter().all(|&v| v.abs() < 1e-10));
    }

    #[test]
    fn partial_days_rejected_unless_truncating() {
        let data = vec![1.0; 50];
        assert!(deseasonalize(&data, false).is_err());
        let (_, r) = deseasonalize(&data, true).unwrap();
        assert_eq!(r.len(), 48);
        assert!(deseasonalize(&[1.0; 10], true).is_err());
    }

    #[test]
    fn residual_has_zero_mean_per_slot() {
        let data: Vec<f64> = (0..24 * 7).map(|j| (j as f64 * 0.37).sin() * 10.0 + j as f64).collect();
        let (_, r) = deseasonalize(&data, false).unwrap();
        for h in 0..24 {
            let m: f64 = r.iter().skip(h).step_by(24).sum::<f64>();
            assert!(m.abs() < 1e-9);
        }
    }

    #[test]
    fn constant_series_is_non_stationary() {
        let err = ou_mle_fit(&[2.0; 100], 1.0).unwrap_err();
        assert!(matches!(err, Error::NonStationaryFit { .. }));
        assert!(ou_mle_fit(&[1.0, 2.0], 1.0).is_err());
        assert!(ou_mle_fit(&[1.0, 2.0, 1.5], 0.0).is_err());
    }

    #[test]
    fn sigma_zero_relaxes_exponentially() {
        let m = OUModel::new(0.5, 10.0, 0.0, 0.0).unwrap();
        let grid = TimeGrid::new(24.0, 24).unwrap();
        let prof = SeasonalProfile::constant(1.0);
        let ps = simulate_ou(&m, &prof, &grid, 3, 1).unwrap();
        for p in 0..3 {
            for (i, t) in grid.times().into_iter().enumerate() {
                let expect = 10.0 * (1.0 - (-0.5 * t).exp()) + 1.0;
                assert!((ps.get(p, i) - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn simulation_is_reproducible_and_rejects_zero_paths() {
        let m = OUModel::new(2.0, 0.0, 3.0, 0.0).unwrap();
        let grid = TimeGrid::new(24.0, 48).unwrap();
        let a = simulate_ou(&m, &SeasonalProfile::zero(), &grid, 5, 9).unwrap();
        let b = simulate_ou(&m, &SeasonalProfile::zero(), &grid, 5, 9).unwrap();
        assert_eq!(a, b);
        assert!(simulate_ou(&m, &SeasonalProfile::zero(), &grid, 0, 9).is_err());
    }

    #[test]
    fn profile_slots() {
        assert_eq!(SeasonalProfile::slot_of(0.0), 0);
        assert_eq!(SeasonalProfile::slot_of(23.99), 23);
        assert_eq!(SeasonalProfile::slot_of(24.0), 0);
        assert!(SeasonalProfile::new(vec![0.0; 23]).is_err());
    }

    #[test]
    fn csv_reader_reports_gaps() {
        let ok = "timestamp,value\n2024-01-01T00:00:00Z,1.0\n2024-01-01T01:00:00Z,2.0\n";
        let s = read_hourly_csv(ok.as_bytes()).unwrap();
        assert_eq!(s.values, vec![1.0, 2.0]);

        let gap = "timestamp,value\n2024-01-01T00:00:00,1\n2024-01-01T03:00:00,2\n";
        let err = read_hourly_csv(gap.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("2 missing hours"), "{err}");
        assert!(err.contains("2024-01-01 01:00:00"));

        let bad = "timestamp,value\n2024-01-01T00:30:00,1\n";
        assert!(read_hourly_csv(bad.as_bytes()).is_err());
        let bad = "timestamp,value\nyesterday,1\n";
        assert!(read_hourly_csv(bad.as_bytes()).is_err());
        let bad = "timestamp,value\n2024-01-01T01:00:00,1\n2024-01-01T00:00:00,1\n";
        assert!(read_hourly_csv(bad.as_bytes()).is_err());
    }
}
