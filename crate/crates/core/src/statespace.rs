//! Additive exponential smoothing with level (and seasonal) states.
//!
//! The level-only recursion `l_t = l_{t−1} + α(y_t − l_{t−1})` smooths hourly
//! temperatures with a fixed α. The seasonal model
//!
//! ```text
//! y_τ = l_{τ−1} + s_{τ−m} + ε_τ
//! l_τ = l_{τ−1} + α ε_τ
//! s_τ = s_{τ−m} + γ ε_τ
//! ```
//!
//! shares α and γ across all series and is estimated by minimizing the trace
//! of the zero-mean residual covariance. There is no trend state.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{
    check_divergence, default_series_names, estimate_covariance, stream_rng, CovarianceSource,
    ErrorCovariance, GaussianSampler, TrajectoryEnsemble,
};
use crate::error::{ensure_finite, invalid, Result};

const SEARCH_LO: f64 = 0.001;
const SEARCH_HI: f64 = 0.999;
const GRID_POINTS: usize = 20;
const GOLDEN_ITERATIONS: usize = 40;
const REFINE_ROUNDS: usize = 3;

/// Level-only smoothing of a single series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VetsLevelModel {
    pub alpha: f64,
    pub initial_level: f64,
    pub final_level: f64,
    /// `l_1 … l_T`.
    pub levels: Vec<f64>,
    /// One-step errors `y_t − l_{t−1}`.
    pub residuals: Vec<f64>,
}

impl VetsLevelModel {
    /// Level at `t` (0 is the initial level).
    pub fn level(&self, t: usize) -> f64 {
        if t == 0 {
            self.initial_level
        } else {
            self.levels[t - 1]
        }
    }
}

/// Level smoothing with `l₀` = mean of the first 24 observations.
pub fn ets_level_smooth(y: &[f64], alpha: f64) -> Result<VetsLevelModel> {
    if y.is_empty() {
        return invalid("level smoothing needs at least one observation");
    }
    let head = &y[..y.len().min(24)];
    let l0 = head.iter().sum::<f64>() / head.len() as f64;
    ets_level_smooth_from(y, alpha, l0)
}

pub fn ets_level_smooth_from(y: &[f64], alpha: f64, initial_level: f64) -> Result<VetsLevelModel> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return invalid(format!("smoothing parameter {alpha} outside (0, 1]"));
    }
    ensure_finite(y, "series to smooth")?;
    let mut l = initial_level;
    let mut levels = Vec::with_capacity(y.len());
    let mut residuals = Vec::with_capacity(y.len());
    for &v in y {
        let e = v - l;
        l += alpha * e;
        residuals.push(e);
        levels.push(l);
    }
    Ok(VetsLevelModel {
        alpha,
        initial_level,
        final_level: l,
        levels,
        residuals,
    })
}

/// Jointly estimated additive level + seasonal model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VetsModel {
    pub alpha: f64,
    pub gamma: f64,
    pub period: usize,
    /// Rows `l_0 … l_T`.
    pub levels: DMatrix<f64>,
    /// Rows `s_{1−m} … s_T`.
    pub seasonals: DMatrix<f64>,
    /// Rows `ε_1 … ε_T`.
    pub residuals: DMatrix<f64>,
    pub covariance: ErrorCovariance,
}

impl VetsModel {
    pub fn n_series(&self) -> usize {
        self.levels.ncols()
    }

    pub fn n_obs(&self) -> usize {
        self.residuals.nrows()
    }

    /// Level state at time `t ∈ 0..=T`.
    pub fn level(&self, t: usize, series: usize) -> f64 {
        self.levels[(t, series)]
    }

    /// Seasonal state at time `t ∈ 1−m..=T`.
    pub fn seasonal(&self, t: isize, series: usize) -> f64 {
        self.seasonals[((t + self.period as isize - 1) as usize, series)]
    }

    pub fn final_levels(&self) -> Vec<f64> {
        let t = self.n_obs();
        (0..self.n_series()).map(|j| self.levels[(t, j)]).collect()
    }

    /// A multi-series level-only model (no seasonal state, γ = 0).
    pub fn level_only(alpha: f64, final_levels: &[f64], covariance: ErrorCovariance) -> Result<Self> {
        let n = final_levels.len();
        if covariance.dim() != n {
            return invalid("covariance dimension differs from series count");
        }
        Ok(Self {
            alpha,
            gamma: 0.0,
            period: 1,
            levels: DMatrix::from_row_slice(1, n, final_levels),
            seasonals: DMatrix::zeros(1, n),
            residuals: DMatrix::zeros(0, n),
            covariance,
        })
    }
}

/// Candidate values of α and γ evaluated before refinement.
pub fn vets_search_grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|i| SEARCH_LO + (SEARCH_HI - SEARCH_LO) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

struct Init {
    l0: Vec<f64>,
    s0: Vec<Vec<f64>>,
}

fn initial_states(panel: &DMatrix<f64>, m: usize) -> Init {
    let n = panel.ncols();
    let mut l0 = vec![0.0; n];
    let mut s0 = vec![vec![0.0; m]; n];
    for j in 0..n {
        let mean = (0..m).map(|t| panel[(t, j)]).sum::<f64>() / m as f64;
        l0[j] = mean;
        let dev: Vec<f64> = (0..m).map(|t| panel[(t, j)] - mean).collect();
        let c = dev.iter().sum::<f64>() / m as f64;
        s0[j] = dev.iter().map(|d| d - c).collect();
    }
    Init { l0, s0 }
}

fn sum_squared_errors(panel: &DMatrix<f64>, m: usize, init: &Init, alpha: f64, gamma: f64) -> f64 {
    let (t_len, n) = panel.shape();
    let mut total = 0.0;
    let mut ring = vec![0.0; m];
    for j in 0..n {
        let mut l = init.l0[j];
        ring.copy_from_slice(&init.s0[j]);
        for t in 0..t_len {
            let k = t % m;
            let e = panel[(t, j)] - l - ring[k];
            l += alpha * e;
            ring[k] += gamma * e;
            total += e * e;
        }
    }
    total
}

/// `trace(Σ̂)` of the one-step errors at `(α, γ)`.
pub fn vets_objective(panel: &DMatrix<f64>, m: usize, alpha: f64, gamma: f64) -> Result<f64> {
    check_vets_input(panel, m)?;
    let init = initial_states(panel, m);
    Ok(sum_squared_errors(panel, m, &init, alpha, gamma) / (panel.nrows() as f64 - 1.0))
}

fn check_vets_input(panel: &DMatrix<f64>, m: usize) -> Result<()> {
    if m == 0 {
        return invalid("seasonal period must be positive");
    }
    if panel.nrows() < 2 * m {
        return invalid(format!(
            "seasonal smoothing needs at least {} observations, got {}",
            2 * m,
            panel.nrows()
        ));
    }
    if panel.ncols() == 0 {
        return invalid("empty panel");
    }
    ensure_finite(panel.as_slice(), "state panel")
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Estimates the seasonal model on a `T × n` weekly panel.
pub fn fit_vets(panel: &DMatrix<f64>, m: usize) -> Result<VetsModel> {
    check_vets_input(panel, m)?;
    let init = initial_states(panel, m);
    let sse = |a: f64, g: f64| sum_squared_errors(panel, m, &init, a, g);
    let grid = vets_search_grid();
    let (mut ia, mut ig, mut best) = (0, 0, f64::INFINITY);
    for (i, &a) in grid.iter().enumerate() {
        for (k, &g) in grid.iter().enumerate() {
            let v = sse(a, g);
            if v < best {
                (ia, ig, best) = (i, k, v);
            }
        }
    }
    let (mut alpha, mut gamma) = (grid[ia], grid[ig]);
    let bracket = |i: usize| (grid[i.saturating_sub(1)], grid[(i + 1).min(grid.len() - 1)]);
    let (a_lo, a_hi) = bracket(ia);
    let (g_lo, g_hi) = bracket(ig);
    for _ in 0..REFINE_ROUNDS {
        let (a, v) = golden_section(|a| sse(a, gamma), a_lo, a_hi);
        if v < best {
            alpha = a;
            best = v;
        }
        let (g, v) = golden_section(|g| sse(alpha, g), g_lo, g_hi);
        if v < best {
            gamma = g;
            best = v;
        }
    }
    Ok(run_vets(panel, m, &init, alpha, gamma)?)
}

fn run_vets(panel: &DMatrix<f64>, m: usize, init: &Init, alpha: f64, gamma: f64) -> Result<VetsModel> {
    let (t_len, n) = panel.shape();
    let mut levels = DMatrix::zeros(t_len + 1, n);
    let mut seasonals = DMatrix::zeros(t_len + m, n);
    let mut residuals = DMatrix::zeros(t_len, n);
    for j in 0..n {
        levels[(0, j)] = init.l0[j];
        for k in 0..m {
            seasonals[(k, j)] = init.s0[j][k];
        }
        for t in 0..t_len {
            // time τ = t + 1; s_{τ−m} sits in row t, s_τ in row t + m
            let e = panel[(t, j)] - levels[(t, j)] - seasonals[(t, j)];
            residuals[(t, j)] = e;
            levels[(t + 1, j)] = levels[(t, j)] + alpha * e;
            seasonals[(t + m, j)] = seasonals[(t, j)] + gamma * e;
        }
    }
    let covariance = estimate_covariance(&residuals, CovarianceSource::State)?;
    Ok(VetsModel {
        alpha,
        gamma,
        period: m,
        levels,
        seasonals,
        residuals,
        covariance,
    })
}

/// Deterministic forecasts with all future errors set to zero.
pub trait VetsForecast {
    /// `h × n` matrix of forecasts for steps `1..=h`.
    fn forecast(&self, h: usize) -> DMatrix<f64>;
}

impl VetsForecast for VetsLevelModel {
    fn forecast(&self, h: usize) -> DMatrix<f64> {
        DMatrix::from_element(h, 1, self.final_level)
    }
}

impl VetsForecast for VetsModel {
    fn forecast(&self, h: usize) -> DMatrix<f64> {
        let t = self.n_obs() as isize;
        let m = self.period as isize;
        DMatrix::from_fn(h, self.n_series(), |i, j| {
            let step = i as isize + 1;
            let phase = t + step - m * ((step + m - 1) / m);
            self.level(self.n_obs(), j) + self.seasonal(phase, j)
        })
    }
}

pub fn vets_forecast(model: &impl VetsForecast, h: usize) -> DMatrix<f64> {
    model.forecast(h)
}

/// Simulated observations together with the level path behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct VetsSimulation {
    pub observations: TrajectoryEnsemble,
    pub levels: TrajectoryEnsemble,
}

/// Runs the recursions forward with fresh `N(0, Σ)` errors.
pub fn vets_simulate(
    model: &VetsModel,
    h: usize,
    cov: &ErrorCovariance,
    n_sims: usize,
    seed: u64,
) -> Result<VetsSimulation> {
    let n = model.n_series();
    if cov.dim() != n {
        return invalid(format!("covariance is {}×{}, model has {n} series", cov.dim(), cov.dim()));
    }
    if h == 0 || n_sims == 0 {
        return invalid("simulation needs a positive horizon and count");
    }
    let sampler = GaussianSampler::new(cov)?;
    let t = model.n_obs();
    let m = model.period;
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let mut level: Vec<f64> = model.final_levels();
            // ring[k] holds s_{T−m+1+k}, rows T..T+m−1 of the seasonal matrix
            let mut ring: Vec<Vec<f64>> = (0..n)
                .map(|j| (0..m).map(|k| model.seasonals[(t + k, j)]).collect())
                .collect();
            let (mut z, mut eps) = (vec![0.0; n], vec![0.0; n]);
            let mut obs = vec![0.0; n * h];
            let mut lev = vec![0.0; n * h];
            for step in 0..h {
                sampler.draw(&mut rng, &mut z, &mut eps);
                let k = step % m;
                for j in 0..n {
                    let y = level[j] + ring[j][k] + eps[j];
                    level[j] += model.alpha * eps[j];
                    ring[j][k] += model.gamma * eps[j];
                    check_divergence(y, "seasonal smoothing simulation")?;
                    obs[j * h + step] = y;
                    lev[j * h + step] = level[j];
                }
            }
            Ok((obs, lev))
        })
        .collect::<Result<_>>()?;
    let (obs, lev): (Vec<_>, Vec<_>) = blocks.into_iter().unzip();
    Ok(VetsSimulation {
        observations: TrajectoryEnsemble::from_blocks(default_series_names(n), h, obs)?,
        levels: TrajectoryEnsemble::from_blocks(default_series_names(n), h, lev)?,
    })
}
