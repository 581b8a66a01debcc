//! Vector error correction: `ΔY_t = ν + ΓΔY_{t−1} + αβᵀY_{t−1} + ε_t` with
//! `ν = 0`, estimated by Johansen's reduced-rank regression.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    check_divergence, default_series_names, estimate_covariance, stream_rng, CovarianceSource,
    ErrorCovariance, GaussianSampler, TrajectoryEnsemble,
};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::linalg::{ols, psd_factor, symmetrize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VecmModel {
    pub rank: usize,
    /// Short-run matrix, `n × n`.
    pub gamma: DMatrix<f64>,
    /// Loadings, `n × r`.
    pub alpha: DMatrix<f64>,
    /// Cointegrating vectors, `n × r`, first nonzero entry of each column 1.
    pub beta: DMatrix<f64>,
    pub intercept: Vec<f64>,
    pub covariance: ErrorCovariance,
    /// Rows `ε_3 … ε_T` (the first two observations seed the lags).
    pub residuals: DMatrix<f64>,
    /// Generalized eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
}

impl VecmModel {
    pub fn n_series(&self) -> usize {
        self.gamma.nrows()
    }

    /// `Π = αβᵀ`.
    pub fn pi(&self) -> DMatrix<f64> {
        &self.alpha * self.beta.transpose()
    }

    /// `ΓΔy + Πy` for the previous difference `dy` and level `y`.
    fn step(&self, pi: &DMatrix<f64>, dy: &[f64], y: &[f64], out: &mut [f64]) {
        let n = self.n_series();
        for i in 0..n {
            let mut acc = self.intercept[i];
            for j in 0..n {
                acc += self.gamma[(i, j)] * dy[j] + pi[(i, j)] * y[j];
            }
            out[i] = acc;
        }
    }
}

fn residualize(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = y.clone();
    for j in 0..y.ncols() {
        let col = y.column(j).into_owned();
        let b = ols(x, &col)?;
        out.set_column(j, &(col - x * b));
    }
    Ok(out)
}

fn normalize_columns(beta: &mut DMatrix<f64>) {
    for mut col in beta.column_iter_mut() {
        let max = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if let Some(first) = col.iter().copied().find(|v| v.abs() > 1e-12 * max) {
            col /= first;
        }
    }
}

/// Fits the model with cointegration rank `r` on a `T × n` panel.
pub fn fit_vecm(panel: &DMatrix<f64>, r: usize) -> Result<VecmModel> {
    let (t_len, n) = panel.shape();
    if r == 0 || r >= n {
        return invalid(format!("cointegration rank must satisfy 1 ≤ r < n = {n}, got {r}"));
    }
    ensure_finite(panel.as_slice(), "VECM panel")?;
    let rows = t_len.saturating_sub(2);
    if rows < 2 * n + r + 2 {
        return invalid(format!("VECM on {n} series needs more than {} observations, got {t_len}", 2 * n + r + 3));
    }
    // t = 2 … T−1 (0-based): ΔY_t, ΔY_{t−1}, Y_{t−1}
    let dy = DMatrix::from_fn(rows, n, |i, j| panel[(i + 2, j)] - panel[(i + 1, j)]);
    let dy_lag = DMatrix::from_fn(rows, n, |i, j| panel[(i + 1, j)] - panel[(i, j)]);
    let y_lag = DMatrix::from_fn(rows, n, |i, j| panel[(i + 1, j)]);

    let r0 = residualize(&dy, &dy_lag)?;
    let r1 = residualize(&y_lag, &dy_lag)?;
    let m = rows as f64;
    let s00 = r0.tr_mul(&r0) / m;
    let s01 = r0.tr_mul(&r1) / m;
    let s11 = r1.tr_mul(&r1) / m;
    let s00_inv = s00
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("VECM S00".into()))?
        .inverse();
    let l = psd_factor(&s11)
        .map_err(|_| Error::Singular("VECM S11".into()))?
        .lower;
    let singular = || Error::Singular("VECM eigenproblem".into());
    // L⁻¹ S10 S00⁻¹ S01 L⁻ᵀ
    let a = s01.transpose() * &s00_inv * &s01;
    let la = l.solve_lower_triangular(&a).ok_or_else(singular)?;
    let mut c = l.solve_lower_triangular(&la.transpose()).ok_or_else(singular)?;
    symmetrize(&mut c);
    let eig = c.symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let v = DMatrix::from_fn(n, r, |i, k| eig.eigenvectors[(i, order[k])]);
    let mut beta = l.tr_solve_lower_triangular(&v).ok_or_else(singular)?;
    normalize_columns(&mut beta);

    // α and Γ by least squares given β
    let ect = &y_lag * &beta;
    let mut x = DMatrix::zeros(rows, n + r);
    x.view_mut((0, 0), (rows, n)).copy_from(&dy_lag);
    x.view_mut((0, n), (rows, r)).copy_from(&ect);
    let mut gamma = DMatrix::zeros(n, n);
    let mut alpha = DMatrix::zeros(n, r);
    for i in 0..n {
        let b = ols(&x, &DVector::from_column_slice(dy.column(i).as_slice()))?;
        for j in 0..n {
            gamma[(i, j)] = b[j];
        }
        for k in 0..r {
            alpha[(i, k)] = b[n + k];
        }
    }
    let residuals = &dy - &dy_lag * gamma.transpose() - &ect * alpha.transpose();
    let covariance = estimate_covariance(&residuals, CovarianceSource::State)?;
    Ok(VecmModel {
        rank: r,
        gamma,
        alpha,
        beta,
        intercept: vec![0.0; n],
        covariance,
        residuals,
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i]).collect(),
    })
}

/// Level trajectories with the model's own covariance.
pub fn vecm_simulate(
    model: &VecmModel,
    history: &DMatrix<f64>,
    h: usize,
    n_sims: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    vecm_simulate_with(model, history, h, &model.covariance, n_sims, seed)
}

pub fn vecm_simulate_with(
    model: &VecmModel,
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
    let t = history.nrows();
    if t < 2 {
        return invalid("VECM simulation needs the last two observations");
    }
    let y_t: Vec<f64> = history.row(t - 1).iter().copied().collect();
    let dy_t: Vec<f64> = (0..n).map(|j| history[(t - 1, j)] - history[(t - 2, j)]).collect();
    let pi = model.pi();
    let sampler = GaussianSampler::new(cov)?;
    let blocks = (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let (mut y, mut dy) = (y_t.clone(), dy_t.clone());
            let (mut z, mut eps, mut next) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            let mut out = vec![0.0; n * h];
            for step in 0..h {
                model.step(&pi, &dy, &y, &mut next);
                sampler.draw(&mut rng, &mut z, &mut eps);
                for j in 0..n {
                    dy[j] = next[j] + eps[j];
                    y[j] += dy[j];
                    check_divergence(y[j], "VECM simulation")?;
                    out[j * h + step] = y[j];
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    TrajectoryEnsemble::from_blocks(default_series_names(n), h, blocks)
}

/// Deterministic level forecast, `h × n`.
pub fn vecm_forecast(model: &VecmModel, history: &DMatrix<f64>, h: usize) -> Result<DMatrix<f64>> {
    let zero = ErrorCovariance::zeros(model.n_series(), CovarianceSource::State);
    let e = vecm_simulate_with(model, history, h, &zero, 1, 0)?;
    Ok(DMatrix::from_fn(h, model.n_series(), |i, j| e.get(0, j, i)))
}
