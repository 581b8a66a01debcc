//! Autoregressions: dense multivariate VAR on a fixed lag set, and sparse
//! univariate Post-Lasso AR with lag selection along a Lasso path.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    check_divergence, default_series_names, estimate_covariance, stream_rng, CovarianceSource,
    ErrorCovariance, GaussianSampler, TrajectoryEnsemble,
};
use crate::error::{ensure_finite, invalid, Result};
use crate::linalg::{ols, solve_spd};

/// `y_t = ν + Σ_{k∈S} φ_k y_{t−k} + ε_t` with `ν = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarModel {
    pub lags: Vec<usize>,
    /// One `n × n` matrix per lag, in the order of `lags`.
    pub coefficients: Vec<DMatrix<f64>>,
    pub intercept: Vec<f64>,
    pub covariance: ErrorCovariance,
    /// Rows `ε_{p+1} … ε_T` where `p = max(S)`.
    pub residuals: DMatrix<f64>,
}

impl VarModel {
    pub fn n_series(&self) -> usize {
        self.intercept.len()
    }

    pub fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(0)
    }

    /// `Σ φ_k y_{t−k}` where `past(k)` returns `y_{t−k}`.
    fn predict<'a>(&self, past: impl Fn(usize) -> &'a [f64], out: &mut [f64]) {
        out.copy_from_slice(&self.intercept);
        for (k, phi) in self.lags.iter().zip(&self.coefficients) {
            let y = past(*k);
            for i in 0..out.len() {
                for j in 0..y.len() {
                    out[i] += phi[(i, j)] * y[j];
                }
            }
        }
    }

    /// Largest modulus among the companion-matrix eigenvalues.
    pub fn spectral_radius(&self) -> f64 {
        let n = self.n_series();
        let p = self.max_lag();
        if p == 0 {
            return 0.0;
        }
        let mut c = DMatrix::zeros(n * p, n * p);
        for (k, phi) in self.lags.iter().zip(&self.coefficients) {
            c.view_mut((0, (k - 1) * n), (n, n)).copy_from(phi);
        }
        for i in n..n * p {
            c[(i, i - n)] = 1.0;
        }
        c.complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }
}

fn validate_lags(lags: &[usize]) -> Result<Vec<usize>> {
    let mut l = lags.to_vec();
    l.sort_unstable();
    l.dedup();
    if l.is_empty() || l[0] == 0 {
        return invalid("lag set must be non-empty and contain only positive lags");
    }
    Ok(l)
}

/// Per-equation least squares on a `T × n` panel.
pub fn fit_var(panel: &DMatrix<f64>, lags: &[usize]) -> Result<VarModel> {
    let lags = validate_lags(lags)?;
    let (t_len, n) = panel.shape();
    let p = *lags.last().unwrap_or(&0);
    if t_len <= p + n * lags.len() {
        return invalid(format!(
            "VAR with {} lags on {n} series needs more than {} observations, got {t_len}",
            lags.len(),
            p + n * lags.len()
        ));
    }
    ensure_finite(panel.as_slice(), "VAR panel")?;
    let rows = t_len - p;
    let x = DMatrix::from_fn(rows, n * lags.len(), |r, c| {
        let (li, j) = (c / n, c % n);
        panel[(p + r - lags[li], j)]
    });
    let mut coefficients = vec![DMatrix::zeros(n, n); lags.len()];
    for i in 0..n {
        let y = DVector::from_fn(rows, |r, _| panel[(p + r, i)]);
        let b = ols(&x, &y)?;
        for (li, phi) in coefficients.iter_mut().enumerate() {
            for j in 0..n {
                phi[(i, j)] = b[li * n + j];
            }
        }
    }
    let mut model = VarModel {
        lags,
        coefficients,
        intercept: vec![0.0; n],
        covariance: ErrorCovariance::zeros(n, CovarianceSource::State),
        residuals: DMatrix::zeros(rows, n),
    };
    let mut pred = vec![0.0; n];
    let rows_of: Vec<Vec<f64>> = (0..t_len).map(|t| panel.row(t).iter().copied().collect()).collect();
    for r in 0..rows {
        let t = p + r;
        model.predict(|k| &rows_of[t - k], &mut pred);
        for j in 0..n {
            model.residuals[(r, j)] = panel[(t, j)] - pred[j];
        }
    }
    model.covariance = estimate_covariance(&model.residuals, CovarianceSource::State)?;
    Ok(model)
}

/// Trailing `p` rows of a `T × n` history, oldest first.
fn history_rows(history: &DMatrix<f64>, p: usize) -> Result<Vec<Vec<f64>>> {
    if history.nrows() < p {
        return invalid(format!("history of {} rows shorter than lag {p}", history.nrows()));
    }
    Ok((history.nrows() - p..history.nrows())
        .map(|t| history.row(t).iter().copied().collect())
        .collect())
}

/// Simulates `h` steps ahead with the model's own covariance.
pub fn var_simulate(
    model: &VarModel,
    history: &DMatrix<f64>,
    h: usize,
    n_sims: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    var_simulate_with(model, history, h, &model.covariance, n_sims, seed)
}

pub fn var_simulate_with(
    model: &VarModel,
    history: &DMatrix<f64>,
    h: usize,
    cov: &ErrorCovariance,
    n_sims: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let n = model.n_series();
    if history.ncols() != n || cov.dim() != n {
        return invalid("history or covariance dimension differs from the model");
    }
    let p = model.max_lag();
    let start = history_rows(history, p)?;
    let sampler = GaussianSampler::new(cov)?;
    let blocks = (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let mut path = start.clone();
            let (mut z, mut eps, mut pred) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            let mut out = vec![0.0; n * h];
            for step in 0..h {
                let now = path.len();
                model.predict(|k| &path[now - k], &mut pred);
                sampler.draw(&mut rng, &mut z, &mut eps);
                for j in 0..n {
                    pred[j] += eps[j];
                    check_divergence(pred[j], "VAR simulation")?;
                    out[j * h + step] = pred[j];
                }
                path.push(pred.clone());
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryEnsemble::from_blocks(default_series_names(n), h, blocks)
}

/// Deterministic forecast (`ε = 0`), `h × n`.
pub fn var_forecast(model: &VarModel, history: &DMatrix<f64>, h: usize) -> Result<DMatrix<f64>> {
    let zero = ErrorCovariance::zeros(model.n_series(), CovarianceSource::State);
    let e = var_simulate_with(model, history, h, &zero, 1, 0)?;
    Ok(DMatrix::from_fn(h, model.n_series(), |i, j| e.get(0, j, i)))
}

/// Sparse AR with lags chosen by Lasso and coefficients refitted by OLS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostLassoArModel {
    pub p_max: usize,
    /// Selected lags, ascending; every entry carries a coefficient.
    pub lags: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub sigma2: f64,
    /// Lasso penalty of the selected path point.
    pub lambda: f64,
    /// Residuals of the refit for `t = p_max … T−1`.
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl PostLassoArModel {
    pub fn empty(p_max: usize) -> Self {
        Self {
            p_max,
            lags: Vec::new(),
            coefficients: Vec::new(),
            sigma2: 0.0,
            lambda: 0.0,
            residuals: Vec::new(),
        }
    }

    /// One-step prediction where `past(k)` returns `y_{t−k}`.
    #[inline]
    pub fn predict(&self, past: impl Fn(usize) -> f64) -> f64 {
        self.lags
            .iter()
            .zip(&self.coefficients)
            .map(|(k, c)| c * past(*k))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoSettings {
    pub n_lambdas: usize,
    pub min_ratio: f64,
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for LassoSettings {
    fn default() -> Self {
        Self {
            n_lambdas: 50,
            min_ratio: 1e-3,
            tolerance: 1e-7,
            max_sweeps: 10_000,
        }
    }
}

/// One point of the Lasso path with its refit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoPathPoint {
    pub lambda: f64,
    pub support: Vec<usize>,
    /// Lasso coefficients on the original lag scale, aligned with `support`.
    pub lasso_coefficients: Vec<f64>,
    pub lasso_rss: f64,
    pub refit_rss: f64,
    pub bic: f64,
}

/// Sufficient statistics of the lag regression `y_t ~ y_{t−1} … y_{t−P}`
/// over `t = P … n−1`.
struct LagSystem {
    n_eff: usize,
    yy: f64,
    /// `G[k−1][l−1] = Σ y_{t−k} y_{t−l}`
    gram: DMatrix<f64>,
    /// `c[k−1] = Σ y_t y_{t−k}`
    cross: DVector<f64>,
}

fn lag_system(y: &[f64], p: usize) -> LagSystem {
    let n = y.len();
    let mut gram = DMatrix::zeros(p, p);
    for l in 1..=p {
        gram[(0, l - 1)] = (p..n).map(|t| y[t - 1] * y[t - l]).sum();
    }
    // shifting both lags by one moves the summation window back one step
    for k in 1..p {
        for l in k..p {
            gram[(k, l)] = gram[(k - 1, l - 1)] + y[p - 1 - k] * y[p - 1 - l] - y[n - 1 - k] * y[n - 1 - l];
        }
    }
    for k in 0..p {
        for l in 0..k {
            gram[(k, l)] = gram[(l, k)];
        }
    }
    let cross = DVector::from_fn(p, |k, _| (p..n).map(|t| y[t] * y[t - k - 1]).sum());
    LagSystem {
        n_eff: n - p,
        yy: (p..n).map(|t| y[t] * y[t]).sum(),
        gram,
        cross,
    }
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// OLS on a lag subset via the normal equations; returns (φ, RSS).
fn refit(sys: &LagSystem, support: &[usize]) -> Option<(Vec<f64>, f64)> {
    if support.is_empty() {
        return Some((Vec::new(), sys.yy));
    }
    let idx: Vec<usize> = support.iter().map(|k| k - 1).collect();
    let g = DMatrix::from_fn(idx.len(), idx.len(), |a, b| sys.gram[(idx[a], idx[b])]);
    let c = DVector::from_fn(idx.len(), |a, _| sys.cross[idx[a]]);
    let phi = solve_spd(&g, &c).ok()?;
    let rss = (sys.yy - phi.dot(&c)).max(0.0);
    Some((phi.iter().copied().collect(), rss))
}

fn bic(rss: f64, n: usize, k: usize) -> f64 {
    let n = n as f64;
    n * (rss.max(f64::MIN_POSITIVE) / n).ln() + k as f64 * n.ln()
}

fn validate_ar_input(y: &[f64], p_max: usize) -> Result<()> {
    if p_max == 0 {
        return invalid("p_max must be positive");
    }
    if y.len() <= p_max + 10 {
        return invalid(format!(
            "autoregression with p_max = {p_max} needs more than {} observations, got {}",
            p_max + 10,
            y.len()
        ));
    }
    ensure_finite(y, "autoregression input")
}

fn is_constant(y: &[f64]) -> bool {
    y.iter().all(|v| *v == y[0])
}

/// Lasso path on standardized lags with refit diagnostics per point.
pub fn lasso_path(y: &[f64], p_max: usize, settings: &LassoSettings) -> Result<Vec<LassoPathPoint>> {
    validate_ar_input(y, p_max)?;
    if is_constant(y) {
        return Ok(Vec::new());
    }
    let sys = lag_system(y, p_max);
    Ok(run_path(&sys, p_max, settings))
}

fn run_path(sys: &LagSystem, p: usize, settings: &LassoSettings) -> Vec<LassoPathPoint> {
    let n = sys.n_eff as f64;
    let scale: Vec<f64> = (0..p).map(|k| (sys.gram[(k, k)] / n).sqrt()).collect();
    let usable: Vec<usize> = (0..p).filter(|&k| scale[k] > 0.0).collect();
    // standardized system
    let gs = DMatrix::from_fn(p, p, |a, b| {
        if scale[a] > 0.0 && scale[b] > 0.0 {
            sys.gram[(a, b)] / (scale[a] * scale[b])
        } else {
            0.0
        }
    });
    let cs: Vec<f64> = (0..p)
        .map(|k| if scale[k] > 0.0 { sys.cross[k] / scale[k] } else { 0.0 })
        .collect();
    let lambda_max = usable.iter().map(|&k| cs[k].abs()).fold(0.0, f64::max) / n;
    if lambda_max == 0.0 {
        return vec![LassoPathPoint {
            lambda: 0.0,
            support: Vec::new(),
            lasso_coefficients: Vec::new(),
            lasso_rss: sys.yy,
            refit_rss: sys.yy,
            bic: bic(sys.yy, sys.n_eff, 0),
        }];
    }
    let count = settings.n_lambdas.max(1);
    let lambdas: Vec<f64> = (0..count)
        .map(|i| {
            if count == 1 {
                lambda_max
            } else {
                lambda_max * settings.min_ratio.powf(i as f64 / (count - 1) as f64)
            }
        })
        .collect();

    let tol = settings.tolerance * sys.yy.sqrt();
    let mut b = vec![0.0; p];
    let mut r = cs.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut refits: HashMap<Vec<usize>, Option<(Vec<f64>, f64)>> = HashMap::new();
    let mut points = Vec::with_capacity(count);

    let update = |k: usize, thr: f64, b: &mut [f64], r: &mut [f64]| -> f64 {
        let z = r[k] + n * b[k];
        let new = soft_threshold(z, thr) / n;
        let delta = new - b[k];
        if delta != 0.0 {
            b[k] = new;
            let col = gs.column(k);
            for (ri, g) in r.iter_mut().zip(col.iter()) {
                *ri -= g * delta;
            }
        }
        // change of the fitted values, in the scale of y
        delta.abs() * n.sqrt()
    };

    for &lambda in &lambdas {
        let thr = n * lambda;
        for _ in 0..settings.max_sweeps {
            let mut change = 0.0f64;
            for &k in &usable {
                change = change.max(update(k, thr, &mut b, &mut r));
            }
            active = usable.iter().copied().filter(|&k| b[k] != 0.0).collect();
            if change < tol {
                break;
            }
            for _ in 0..settings.max_sweeps {
                let mut inner = 0.0f64;
                for &k in &active {
                    inner = inner.max(update(k, thr, &mut b, &mut r));
                }
                if inner < tol {
                    break;
                }
            }
        }
        let support: Vec<usize> = active.iter().filter(|&&k| b[k] != 0.0).map(|k| k + 1).collect();
        let bc: f64 = (0..p).map(|k| b[k] * cs[k]).sum();
        let br: f64 = (0..p).map(|k| b[k] * r[k]).sum();
        let lasso_rss = (sys.yy - bc - br).max(0.0);
        let fit = refits
            .entry(support.clone())
            .or_insert_with(|| {
                if 2 * support.len() > sys.n_eff {
                    None
                } else {
                    refit(sys, &support)
                }
            })
            .clone();
        let (refit_rss, score) = match fit {
            Some((_, rss)) => (rss, bic(rss, sys.n_eff, support.len())),
            None => (f64::NAN, f64::INFINITY),
        };
        points.push(LassoPathPoint {
            lambda,
            lasso_coefficients: support.iter().map(|k| b[k - 1] / scale[k - 1]).collect(),
            support,
            lasso_rss,
            refit_rss,
            bic: score,
        });
    }
    points
}

/// Post-Lasso AR with the default 50-point path and BIC selection.
pub fn fit_post_lasso_ar(y: &[f64], p_max: usize) -> Result<PostLassoArModel> {
    fit_post_lasso_ar_with(y, p_max, &LassoSettings::default())
}

pub fn fit_post_lasso_ar_with(y: &[f64], p_max: usize, settings: &LassoSettings) -> Result<PostLassoArModel> {
    validate_ar_input(y, p_max)?;
    if is_constant(y) {
        return Ok(PostLassoArModel::empty(p_max));
    }
    let sys = lag_system(y, p_max);
    let path = run_path(&sys, p_max, settings);
    let best = path
        .iter()
        .filter(|pt| pt.bic.is_finite())
        .fold(None::<&LassoPathPoint>, |acc, pt| match acc {
            Some(a) if a.bic <= pt.bic => Some(a),
            _ => Some(pt),
        });
    let Some(best) = best else {
        return Ok(PostLassoArModel::empty(p_max));
    };
    let (coefficients, rss) = refit(&sys, &best.support).unwrap_or((Vec::new(), sys.yy));
    let mut model = PostLassoArModel {
        p_max,
        lags: best.support.clone(),
        coefficients,
        sigma2: 0.0,
        lambda: best.lambda,
        residuals: Vec::new(),
    };
    model.residuals = (p_max..y.len())
        .map(|t| y[t] - model.predict(|k| y[t - k]))
        .collect();
    let dof = (sys.n_eff - model.lags.len()).max(1) as f64;
    model.sigma2 = rss / dof;
    Ok(model)
}

/// Joint simulation of independent-coefficient AR models with
/// cross-correlated innovations. Each step costs `O(Σ|S_i|)`.
pub fn ar_simulate(
    models: &[PostLassoArModel],
    history: &[&[f64]],
    h: usize,
    cov: &ErrorCovariance,
    n_sims: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let n = models.len();
    if history.len() != n {
        return invalid("one history per model is required");
    }
    if cov.dim() != n {
        return invalid(format!("covariance is {}×{}, expected {n}×{n}", cov.dim(), cov.dim()));
    }
    let depth: Vec<usize> = models.iter().map(|m| m.lags.last().copied().unwrap_or(0)).collect();
    for (j, m) in models.iter().enumerate() {
        if history[j].len() < m.p_max.max(depth[j]) {
            return invalid(format!(
                "history of series {j} ({} values) shorter than p_max = {}",
                history[j].len(),
                m.p_max
            ));
        }
    }
    let sampler = GaussianSampler::new(cov)?;
    let blocks = (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            // per series: realized tail followed by the simulated values
            let mut bufs: Vec<Vec<f64>> = (0..n)
                .map(|j| {
                    let hist = history[j];
                    let mut b = Vec::with_capacity(depth[j] + h);
                    b.extend_from_slice(&hist[hist.len() - depth[j]..]);
                    b
                })
                .collect();
            let (mut z, mut eps) = (vec![0.0; n], vec![0.0; n]);
            let mut out = vec![0.0; n * h];
            for step in 0..h {
                sampler.draw(&mut rng, &mut z, &mut eps);
                for j in 0..n {
                    let buf = &bufs[j];
                    let now = buf.len();
                    let v = models[j].predict(|k| buf[now - k]) + eps[j];
                    check_divergence(v, "autoregressive simulation")?;
                    bufs[j].push(v);
                    out[j * h + step] = v;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryEnsemble::from_blocks(default_series_names(n), h, blocks)
}

/// Deterministic continuation of the history with zero innovations.
pub fn ar_forecast(model: &PostLassoArModel, history: &[f64], h: usize) -> Result<Vec<f64>> {
    let zero = ErrorCovariance::zeros(1, CovarianceSource::Other);
    let e = ar_simulate(std::slice::from_ref(model), &[history], h, &zero, 1, 0)?;
    Ok(e.path(0, 0).to_vec())
}
