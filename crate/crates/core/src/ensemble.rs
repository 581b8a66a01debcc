//! Error covariances, joint Gaussian sampling and trajectory ensembles.
//!
//! Every simulated path draws from its own ChaCha stream keyed by
//! `(seed, sim)`, so trajectory `s` is identical however the simulations are
//! scheduled across threads.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{psd_factor, symmetrize};
use crate::timebase::{format_timestamp, parse_timestamp};

/// Simulated values beyond this magnitude abort the simulation.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    Temperature,
    State,
    LoadAr,
    Other,
}

/// Symmetric error covariance with the diagonal jitter applied to factor it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorCovariance {
    pub matrix: DMatrix<f64>,
    pub jitter_applied: f64,
    pub source: CovarianceSource,
}

impl ErrorCovariance {
    pub fn new(mut matrix: DMatrix<f64>, source: CovarianceSource) -> Result<Self> {
        if !matrix.is_square() {
            return invalid("covariance must be square");
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariance".into()));
        }
        symmetrize(&mut matrix);
        Ok(Self {
            matrix,
            jitter_applied: 0.0,
            source,
        })
    }

    pub fn zeros(n: usize, source: CovarianceSource) -> Self {
        Self {
            matrix: DMatrix::zeros(n, n),
            jitter_applied: 0.0,
            source,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn is_zero(&self) -> bool {
        self.matrix.iter().all(|v| *v == 0.0)
    }

    /// Shrinks off-diagonal entries: `(1 − δ)Σ + δ·diag(Σ)`.
    pub fn shrink_to_diagonal(&mut self, delta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&delta) {
            return invalid(format!("shrinkage {delta} outside [0, 1]"));
        }
        let n = self.dim();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    self.matrix[(i, j)] *= 1.0 - delta;
                }
            }
        }
        Ok(())
    }
}

/// Zero-mean covariance of residual rows (`T × n`): `Σ εεᵀ / (T − 1)`.
pub fn estimate_covariance(residuals: &DMatrix<f64>, source: CovarianceSource) -> Result<ErrorCovariance> {
    let t = residuals.nrows();
    if t < 2 {
        return invalid(format!("covariance needs at least 2 residual rows, got {t}"));
    }
    let sigma = residuals.tr_mul(residuals) / (t as f64 - 1.0);
    ErrorCovariance::new(sigma, source)
}

/// Covariance of residual columns given as one vector per series.
pub fn estimate_covariance_columns(columns: &[Vec<f64>], source: CovarianceSource) -> Result<ErrorCovariance> {
    let t = columns.first().map(|c| c.len()).unwrap_or(0);
    if columns.iter().any(|c| c.len() != t) {
        return invalid("residual series differ in length");
    }
    let m = DMatrix::from_fn(t, columns.len(), |i, j| columns[j][i]);
    estimate_covariance(&m, source)
}

/// Draws `N(0, Σ)` vectors through a lower-triangular factor.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    lower: DMatrix<f64>,
    zero: bool,
    jitter: f64,
}

impl GaussianSampler {
    pub fn new(cov: &ErrorCovariance) -> Result<Self> {
        let factor = psd_factor(&cov.matrix)?;
        if factor.jitter > 0.0 {
            log::debug!("{:?} covariance needed jitter {:e}", cov.source, factor.jitter);
        }
        Ok(Self {
            zero: factor.lower.iter().all(|v| *v == 0.0),
            lower: factor.lower,
            jitter: factor.jitter,
        })
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter
    }

    pub fn is_zero(&self) -> bool {
        self.zero
    }

    /// Writes one draw into `out`. A zero covariance consumes no randomness.
    pub fn draw<R: Rng>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
        let n = self.dim();
        if self.zero {
            out[..n].fill(0.0);
            return;
        }
        for v in z[..n].iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += self.lower[(i, k)] * z[k];
            }
            out[i] = acc;
        }
    }
}

/// Random stream dedicated to simulation `sim` under `seed`.
pub fn stream_rng(seed: u64, sim: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sim);
    rng
}

/// Mixes a master seed with a sub-index (experiment, stage, ...).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Error draws laid out as `(sim, step, series)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDraws {
    pub n_sims: usize,
    pub steps: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub jitter_applied: f64,
}

impl ErrorDraws {
    pub fn get(&self, sim: usize, step: usize) -> &[f64] {
        let o = (sim * self.steps + step) * self.dim;
        &self.values[o..o + self.dim]
    }
}

/// i.i.d. `N(0, Σ)` draws for `n_sims × steps`.
pub fn sample_errors(cov: &ErrorCovariance, steps: usize, n_sims: usize, seed: u64) -> Result<ErrorDraws> {
    let sampler = GaussianSampler::new(cov)?;
    let dim = sampler.dim();
    let blocks: Vec<Vec<f64>> = (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let mut z = vec![0.0; dim];
            let mut block = vec![0.0; steps * dim];
            for step in block.chunks_mut(dim.max(1)).take(steps) {
                sampler.draw(&mut rng, &mut z, step);
            }
            block
        })
        .collect();
    Ok(ErrorDraws {
        n_sims,
        steps,
        dim,
        values: blocks.concat(),
        jitter_applied: sampler.jitter_applied(),
    })
}

pub(crate) fn check_divergence(v: f64, what: &str) -> Result<()> {
    if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged(format!("{what} reached {v:e}")));
    }
    Ok(())
}

pub(crate) fn default_series_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("y{i}")).collect()
}

/// Simulated future paths, laid out as `(sim, series, horizon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    series: Vec<String>,
    n_sims: usize,
    horizon: usize,
    values: Vec<f64>,
    /// Last in-sample timestamp; step `h` (1-based) lies `h·step_hours` later.
    pub origin: Option<NaiveDateTime>,
    pub step_hours: i64,
}

impl TrajectoryEnsemble {
    pub fn new(series: Vec<String>, n_sims: usize, horizon: usize, values: Vec<f64>) -> Result<Self> {
        if n_sims == 0 || horizon == 0 || series.is_empty() {
            return invalid("an ensemble needs at least one simulation, step and series");
        }
        if values.len() != n_sims * series.len() * horizon {
            return invalid(format!(
                "ensemble of {n_sims}×{}×{horizon} given {} values",
                series.len(),
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory ensemble".into()));
        }
        Ok(Self {
            series,
            n_sims,
            horizon,
            values,
            origin: None,
            step_hours: 1,
        })
    }

    pub fn zeros(series: Vec<String>, n_sims: usize, horizon: usize) -> Result<Self> {
        let n = series.len();
        Self::new(series, n_sims, horizon, vec![0.0; n_sims * n * horizon])
    }

    /// Assembles from per-simulation blocks of `series × horizon` values.
    pub fn from_blocks(series: Vec<String>, horizon: usize, blocks: Vec<Vec<f64>>) -> Result<Self> {
        let n_sims = blocks.len();
        Self::new(series, n_sims, horizon, blocks.concat())
    }

    pub fn with_origin(mut self, origin: NaiveDateTime, step_hours: i64) -> Self {
        self.origin = Some(origin);
        self.step_hours = step_hours;
        self
    }

    pub fn series(&self) -> &[String] {
        &self.series
    }

    pub fn rename(&mut self, names: Vec<String>) -> Result<()> {
        if names.len() != self.series.len() {
            return invalid("series name count mismatch");
        }
        self.series = names;
        Ok(())
    }

    pub fn n_series(&self) -> usize {
        self.series.len()
    }

    pub fn n_sims(&self) -> usize {
        self.n_sims
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn series_index(&self, name: &str) -> Option<usize> {
        self.series.iter().position(|s| s == name)
    }

    pub fn get(&self, sim: usize, series: usize, h: usize) -> f64 {
        self.values[(sim * self.n_series() + series) * self.horizon + h]
    }

    /// One trajectory of one series over the horizon.
    pub fn path(&self, sim: usize, series: usize) -> &[f64] {
        let o = (sim * self.n_series() + series) * self.horizon;
        &self.values[o..o + self.horizon]
    }

    pub fn path_mut(&mut self, sim: usize, series: usize) -> &mut [f64] {
        let o = (sim * self.n_series() + series) * self.horizon;
        let h = self.horizon;
        &mut self.values[o..o + h]
    }

    /// All simulated values of one cell.
    pub fn cell(&self, series: usize, h: usize) -> Vec<f64> {
        (0..self.n_sims).map(|s| self.get(s, series, h)).collect()
    }

    pub fn timestamp(&self, h: usize) -> Option<NaiveDateTime> {
        self.origin
            .map(|o| o + Duration::hours(self.step_hours * (h as i64 + 1)))
    }

    /// Simulations of `self` followed by those of `other`.
    pub fn merge(&self, other: &TrajectoryEnsemble) -> Result<TrajectoryEnsemble> {
        if self.series != other.series || self.horizon != other.horizon {
            return invalid("ensembles differ in series or horizon");
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let mut e = Self::new(self.series.clone(), self.n_sims + other.n_sims, self.horizon, values)?;
        e.origin = self.origin;
        e.step_hours = self.step_hours;
        Ok(e)
    }

    /// Restricts to the given series, in order.
    pub fn select(&self, indices: &[usize]) -> Result<TrajectoryEnsemble> {
        if indices.iter().any(|&j| j >= self.n_series()) {
            return invalid("series index out of range");
        }
        let mut values = Vec::with_capacity(self.n_sims * indices.len() * self.horizon);
        for s in 0..self.n_sims {
            for &j in indices {
                values.extend_from_slice(self.path(s, j));
            }
        }
        let mut e = Self::new(
            indices.iter().map(|&j| self.series[j].clone()).collect(),
            self.n_sims,
            self.horizon,
            values,
        )?;
        e.origin = self.origin;
        e.step_hours = self.step_hours;
        Ok(e)
    }

    /// Keeps the given simulations, in order; repeats are allowed.
    pub fn select_sims(&self, sims: &[usize]) -> Result<TrajectoryEnsemble> {
        if sims.iter().any(|&s| s >= self.n_sims) {
            return invalid("simulation index out of range");
        }
        let block = self.n_series() * self.horizon;
        let mut values = Vec::with_capacity(sims.len() * block);
        for &s in sims {
            values.extend_from_slice(&self.values[s * block..(s + 1) * block]);
        }
        let mut e = Self::new(self.series.clone(), sims.len(), self.horizon, values)?;
        e.origin = self.origin;
        e.step_hours = self.step_hours;
        Ok(e)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["series", "horizon_index", "timestamp", "sim_or_prob", "value"])?;
        for (j, name) in self.series.iter().enumerate() {
            for s in 0..self.n_sims {
                for h in 0..self.horizon {
                    let ts = self.timestamp(h).map(format_timestamp).unwrap_or_default();
                    w.write_record([
                        name.clone(),
                        (h + 1).to_string(),
                        ts,
                        s.to_string(),
                        self.get(s, j, h).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<TrajectoryEnsemble> {
        let mut r = csv::Reader::from_path(path)?;
        let mut cells: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        let mut series: Vec<String> = Vec::new();
        let mut stamps: BTreeMap<usize, NaiveDateTime> = BTreeMap::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_err = |m: &str| Error::Parse {
                row: i + 2,
                message: m.to_string(),
            };
            let name = rec.get(0).ok_or_else(|| parse_err("missing series"))?;
            let j = match series.iter().position(|s| s == name) {
                Some(j) => j,
                None => {
                    series.push(name.to_string());
                    series.len() - 1
                }
            };
            let h: usize = rec
                .get(1)
                .and_then(|v| v.parse().ok())
                .filter(|h| *h >= 1)
                .ok_or_else(|| parse_err("bad horizon_index"))?;
            if let Some(ts) = rec.get(2).filter(|v| !v.is_empty()) {
                stamps.insert(h - 1, parse_timestamp(ts).map_err(|_| parse_err("bad timestamp"))?);
            }
            let s: usize = rec
                .get(3)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err("bad sim index"))?;
            let v: f64 = rec
                .get(4)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| parse_err("bad value"))?;
            cells.insert((s, j, h - 1), v);
        }
        let n_sims = cells.keys().map(|k| k.0 + 1).max().unwrap_or(0);
        let horizon = cells.keys().map(|k| k.2 + 1).max().unwrap_or(0);
        let n = series.len();
        if cells.len() != n_sims * n * horizon {
            return invalid("ensemble CSV has missing cells");
        }
        let values = cells.into_values().collect();
        let mut e = Self::new(series, n_sims, horizon, values)?;
        if let (Some(t0), Some(t1)) = (stamps.get(&0), stamps.get(&1)) {
            let step = (*t1 - *t0).num_hours();
            e = e.with_origin(*t0 - Duration::hours(step), step);
        } else if let Some(t0) = stamps.get(&0) {
            e = e.with_origin(*t0 - Duration::hours(1), 1);
        }
        Ok(e)
    }
}

/// Type-7 quantile of an ascending sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let h = (m as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    if lo + 1 >= m {
        return sorted[m - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Empirical quantiles, laid out as `(probability, series, horizon)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileGrid {
    pub probabilities: Vec<f64>,
    pub series: Vec<String>,
    pub horizon: usize,
    pub values: Vec<f64>,
    pub origin: Option<NaiveDateTime>,
    pub step_hours: i64,
}

impl QuantileGrid {
    pub fn get(&self, p: usize, series: usize, h: usize) -> f64 {
        self.values[(p * self.series.len() + series) * self.horizon + h]
    }

    pub fn path(&self, p: usize, series: usize) -> &[f64] {
        let o = (p * self.series.len() + series) * self.horizon;
        &self.values[o..o + self.horizon]
    }

    pub fn probability_index(&self, p: f64) -> Option<usize> {
        self.probabilities.iter().position(|q| (q - p).abs() < 1e-9)
    }

    pub fn timestamp(&self, h: usize) -> Option<NaiveDateTime> {
        self.origin
            .map(|o| o + Duration::hours(self.step_hours * (h as i64 + 1)))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["series", "horizon_index", "timestamp", "sim_or_prob", "value"])?;
        for (j, name) in self.series.iter().enumerate() {
            for (pi, p) in self.probabilities.iter().enumerate() {
                for h in 0..self.horizon {
                    let ts = self.timestamp(h).map(format_timestamp).unwrap_or_default();
                    w.write_record([
                        name.clone(),
                        (h + 1).to_string(),
                        ts,
                        p.to_string(),
                        self.get(pi, j, h).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Quantiles 0.05, 0.10, …, 0.95.
pub fn default_probabilities() -> Vec<f64> {
    (1..=19).map(|i| i as f64 * 0.05).map(|p| (p * 100.0).round() / 100.0).collect()
}

pub fn ensemble_quantiles(ens: &TrajectoryEnsemble, probabilities: &[f64]) -> Result<QuantileGrid> {
    if probabilities.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
        return invalid("probabilities must lie in (0, 1)");
    }
    if probabilities.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("probabilities must be strictly increasing");
    }
    let n = ens.n_series();
    let horizon = ens.horizon();
    let np = probabilities.len();
    let mut values = vec![0.0; np * n * horizon];
    let cells: Vec<Vec<f64>> = (0..n * horizon)
        .into_par_iter()
        .map(|c| {
            let (j, h) = (c / horizon, c % horizon);
            let mut sample = ens.cell(j, h);
            sample.sort_by(f64::total_cmp);
            probabilities.iter().map(|p| quantile_sorted(&sample, *p)).collect()
        })
        .collect();
    for (c, qs) in cells.iter().enumerate() {
        let (j, h) = (c / horizon, c % horizon);
        for (pi, q) in qs.iter().enumerate() {
            values[(pi * n + j) * horizon + h] = *q;
        }
    }
    Ok(QuantileGrid {
        probabilities: probabilities.to_vec(),
        series: ens.series().to_vec(),
        horizon,
        values,
        origin: ens.origin,
        step_hours: ens.step_hours,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn covariance_hand_example() {
        let r = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let c = estimate_covariance(&r, CovarianceSource::Other).unwrap();
        assert_eq!(c.matrix, DMatrix::from_row_slice(2, 2, &[2.0, -2.0, -2.0, 2.0]));
    }

    #[test]
    fn covariance_zero_and_single_series() {
        let c = estimate_covariance(&DMatrix::zeros(5, 3), CovarianceSource::State).unwrap();
        assert!(c.is_zero());
        let e = [0.5, -1.0, 2.0, 0.25];
        let c = estimate_covariance(&DMatrix::from_column_slice(4, 1, &e), CovarianceSource::State).unwrap();
        let oracle: f64 = e.iter().map(|v| v * v).sum::<f64>() / 3.0;
        assert!((c.matrix[(0, 0)] - oracle).abs() < 1e-15);
        assert!(estimate_covariance(&DMatrix::zeros(1, 2), CovarianceSource::State).is_err());
    }

    #[test]
    fn zero_covariance_draws_zero() {
        let d = sample_errors(&ErrorCovariance::zeros(3, CovarianceSource::Other), 10, 4, 1).unwrap();
        assert!(d.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_draws_match_identity() {
        let cov = ErrorCovariance::new(DMatrix::identity(3, 3), CovarianceSource::Other).unwrap();
        let d = sample_errors(&cov, 1000, 100, 7).unwrap();
        let m = DMatrix::from_row_slice(100_000, 3, &d.values);
        let s = m.tr_mul(&m) / 100_000.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((s[(i, j)] - target).abs() < 0.05);
            }
        }
    }

    #[test]
    fn near_psd_gets_first_jitter() {
        // eigenvalues 2 and -1e-12
        let v = nalgebra::DVector::from_vec(vec![1.0, 1.0]) / 2f64.sqrt();
        let w = nalgebra::DVector::from_vec(vec![1.0, -1.0]) / 2f64.sqrt();
        let m = &v * v.transpose() * 2.0 - &w * w.transpose() * 1e-12;
        let cov = ErrorCovariance::new(m, CovarianceSource::Other).unwrap();
        let s = GaussianSampler::new(&cov).unwrap();
        assert!((s.jitter_applied() - 1e-10).abs() < 1e-20);
        let d = sample_errors(&cov, 1, 1, 0).unwrap();
        assert_eq!(d.jitter_applied, s.jitter_applied());
    }

    #[test]
    fn indefinite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let cov = ErrorCovariance::new(m, CovarianceSource::Other).unwrap();
        match sample_errors(&cov, 1, 1, 0) {
            Err(Error::NotPositiveSemidefinite { min_eigenvalue }) => assert!((min_eigenvalue + 1.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn draws_independent_of_thread_count() {
        let cov = ErrorCovariance::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
            CovarianceSource::Other,
        )
        .unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| sample_errors(&cov, 50, 64, 99).unwrap())
        };
        assert_eq!(run(1).values, run(8).values);
    }

    #[test]
    fn quantile_examples() {
        let values: Vec<f64> = (1..=200).map(|v| v as f64).collect();
        let e = TrajectoryEnsemble::new(vec!["a".into()], 200, 1, values).unwrap();
        let q = ensemble_quantiles(&e, &[0.5]).unwrap();
        assert_eq!(q.get(0, 0, 0), 100.5);
        let c = TrajectoryEnsemble::new(vec!["a".into()], 5, 2, vec![3.0; 10]).unwrap();
        let q = ensemble_quantiles(&c, &default_probabilities()).unwrap();
        assert!(q.values.iter().all(|v| *v == 3.0));
        assert!(ensemble_quantiles(&c, &[0.5, 0.2]).is_err());
        assert!(ensemble_quantiles(&c, &[0.0]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let origin = parse_timestamp("2023-01-01T08:00").unwrap();
        let e = TrajectoryEnsemble::new(vec!["FR".into(), "DE".into()], 3, 4, (0..24).map(|v| v as f64 * 0.5).collect())
            .unwrap()
            .with_origin(origin, 1);
        let p = dir.path().join("e.csv");
        e.write_csv(&p).unwrap();
        let back = TrajectoryEnsemble::read_csv(&p).unwrap();
        assert_eq!(back, e);
        let q = ensemble_quantiles(&e, &[0.1, 0.9]).unwrap();
        q.write_csv(&dir.path().join("q.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("q.csv")).unwrap();
        assert!(text.starts_with("series,horizon_index,timestamp,sim_or_prob,value"));
        assert!(text.contains("FR,1,2023-01-01T09:00,0.1,"));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(TrajectoryEnsemble::new(vec!["a".into()], 1, 1, vec![f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn covariance_is_psd(rows in proptest::collection::vec(proptest::collection::vec(-100.0f64..100.0, 3), 2..30)) {
            let t = rows.len();
            let m = DMatrix::from_fn(t, 3, |i, j| rows[i][j]);
            let c = estimate_covariance(&m, CovarianceSource::Other).unwrap();
            let scale = c.trace().max(1.0);
            prop_assert!(crate::linalg::min_symmetric_eigenvalue(&c.matrix) >= -1e-10 * scale);
            prop_assert_eq!(c.matrix.clone(), c.matrix.transpose());
        }

        #[test]
        fn quantiles_monotone_and_duplication_invariant(values in proptest::collection::vec(-50.0f64..50.0, 8..40)) {
            let m = values.len() / 2;
            let e = TrajectoryEnsemble::new(vec!["a".into(), "b".into()], m, 1, values[..2 * m].to_vec()).unwrap();
            let probs = default_probabilities();
            let q = ensemble_quantiles(&e, &probs).unwrap();
            for j in 0..2 {
                for p in 1..probs.len() {
                    prop_assert!(q.get(p, j, 0) >= q.get(p - 1, j, 0));
                }
            }
            // type-7 is exactly duplication invariant at the median and stays
            // within the bracketing order statistics elsewhere
            let doubled = ensemble_quantiles(&e.merge(&e).unwrap(), &probs).unwrap();
            let median = q.probability_index(0.5).unwrap();
            for j in 0..2 {
                let mut sorted = e.cell(j, 0);
                sorted.sort_by(f64::total_cmp);
                for (pi, p) in probs.iter().enumerate() {
                    let (a, b) = (q.get(pi, j, 0), doubled.get(pi, j, 0));
                    if pi == median {
                        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
                    }
                    let h = (m as f64 - 1.0) * p;
                    let lo = sorted[h.floor() as usize];
                    let hi = sorted[(h.ceil() as usize).min(m - 1)];
                    prop_assert!(b >= lo - 1e-9 && b <= hi + 1e-9);
                }
            }
        }
    }
}
