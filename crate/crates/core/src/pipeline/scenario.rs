//! Extreme-scenario selection and per-component load decomposition.
//!
//! For each stochastic stage the minimum trajectory is the one with the
//! largest summed shortfall below the 5 % quantile, the maximum the one with
//! the largest summed excess over the 95 % quantile, and the medium one the
//! trajectory whose horizon sum is the median of all sums. Ties go to the
//! lowest simulation index.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::ensemble::{quantile_sorted, TrajectoryEnsemble};
use crate::error::{invalid, Result};
use crate::timebase::format_timestamp;

use super::stages::{FittedSystem, ForecastProduct, LoadInputs};

pub const LOWER_PROBABILITY: f64 = 0.05;
pub const UPPER_PROBABILITY: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StochasticStage {
    Temperature,
    State,
    Autoregressive,
}

impl StochasticStage {
    pub const ALL: [StochasticStage; 3] = [
        StochasticStage::Temperature,
        StochasticStage::State,
        StochasticStage::Autoregressive,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            StochasticStage::Temperature => "temperature",
            StochasticStage::State => "state",
            StochasticStage::Autoregressive => "autoregressive",
        }
    }
}

/// Selected trajectories of one stage and the statistics behind them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSelection {
    pub stage: StochasticStage,
    pub series: String,
    pub min: usize,
    pub max: usize,
    pub medium: usize,
    /// `Σ_h max(q_0.05(h) − x_s(h), 0)` per simulation.
    pub under: Vec<f64>,
    /// `Σ_h max(x_s(h) − q_0.95(h), 0)` per simulation.
    pub over: Vec<f64>,
    /// `Σ_h x_s(h)` per simulation.
    pub sums: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSelection {
    pub country: String,
    pub stages: Vec<StageSelection>,
}

/// Trajectory index used for each stage in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioChoice {
    pub temperature: usize,
    pub state: usize,
    pub autoregressive: usize,
}

impl ScenarioSelection {
    pub fn stage(&self, stage: StochasticStage) -> &StageSelection {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage is selected")
    }

    /// Cold temperature, high state and high autoregressive deviation.
    pub fn stress_choice(&self) -> ScenarioChoice {
        ScenarioChoice {
            temperature: self.stage(StochasticStage::Temperature).min,
            state: self.stage(StochasticStage::State).max,
            autoregressive: self.stage(StochasticStage::Autoregressive).max,
        }
    }

    pub fn medium_choice(&self) -> ScenarioChoice {
        ScenarioChoice {
            temperature: self.stage(StochasticStage::Temperature).medium,
            state: self.stage(StochasticStage::State).medium,
            autoregressive: self.stage(StochasticStage::Autoregressive).medium,
        }
    }

    /// Writes the selected trajectories with the quantile band per stage.
    pub fn write_trajectories(&self, product: &ForecastProduct, path: &Path) -> Result<()> {
        let i = country_index(product, &self.country)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["stage", "selection", "simulation", "timestamp", "value", "q05", "q95"])?;
        for sel in &self.stages {
            let (ens, j) = stage_series(product, sel.stage, i);
            for (label, s) in [("min", sel.min), ("medium", sel.medium), ("max", sel.max)] {
                for (h, v) in ens.path(s, j).iter().enumerate() {
                    w.write_record([
                        sel.stage.label().to_string(),
                        label.to_string(),
                        s.to_string(),
                        ens.timestamp(h).map(format_timestamp).unwrap_or_default(),
                        v.to_string(),
                        sel.lower[h].to_string(),
                        sel.upper[h].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn country_index(product: &ForecastProduct, country: &str) -> Result<usize> {
    product
        .countries
        .iter()
        .position(|c| c == country)
        .ok_or_else(|| crate::Error::InvalidInput(format!("country `{country}` is not in the forecast")))
}

/// Stage ensemble and series index of country `i`; temperature uses the
/// fast-smoothed series.
fn stage_series(product: &ForecastProduct, stage: StochasticStage, i: usize) -> (&TrajectoryEnsemble, usize) {
    match stage {
        StochasticStage::Temperature => (&product.temperature, 2 * i),
        StochasticStage::State => (&product.state, i),
        StochasticStage::Autoregressive => (&product.autoregressive, i),
    }
}

/// First index attaining the maximum.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Min/max/medium selection over one series of an ensemble.
pub fn select_series(ens: &TrajectoryEnsemble, series: usize, stage: StochasticStage) -> Result<StageSelection> {
    let n_sims = ens.n_sims();
    if n_sims == 0 || series >= ens.n_series() {
        return invalid("selection needs a non-empty ensemble and a valid series");
    }
    let h = ens.horizon();
    let mut lower = Vec::with_capacity(h);
    let mut upper = Vec::with_capacity(h);
    for t in 0..h {
        let mut cell = ens.cell(series, t);
        cell.sort_by(f64::total_cmp);
        lower.push(quantile_sorted(&cell, LOWER_PROBABILITY));
        upper.push(quantile_sorted(&cell, UPPER_PROBABILITY));
    }
    let mut under = vec![0.0; n_sims];
    let mut over = vec![0.0; n_sims];
    let mut sums = vec![0.0; n_sims];
    for s in 0..n_sims {
        for (t, x) in ens.path(s, series).iter().enumerate() {
            under[s] += (lower[t] - x).max(0.0);
            over[s] += (x - upper[t]).max(0.0);
            sums[s] += x;
        }
    }
    let mut order: Vec<usize> = (0..n_sims).collect();
    order.sort_by(|a, b| sums[*a].total_cmp(&sums[*b]).then(a.cmp(b)));
    let medium = order[(n_sims - 1) / 2];
    Ok(StageSelection {
        stage,
        series: ens.series()[series].clone(),
        min: argmax(&under),
        max: argmax(&over),
        medium,
        under,
        over,
        sums,
        lower,
        upper,
    })
}

/// Extreme and medium trajectories of every stochastic stage for `country`.
pub fn select_extreme_trajectories(product: &ForecastProduct, country: &str) -> Result<ScenarioSelection> {
    let i = country_index(product, country)?;
    let stages = StochasticStage::ALL
        .iter()
        .map(|&stage| {
            let (ens, j) = stage_series(product, stage, i);
            select_series(ens, j, stage)
        })
        .collect::<Result<_>>()?;
    Ok(ScenarioSelection {
        country: country.to_string(),
        stages,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioComponent {
    pub name: String,
    /// `calendar`, `temperature`, `state` or `autoregressive`.
    pub group: String,
    pub values: Vec<f64>,
}

/// Hourly load of one scenario split into model components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDecomposition {
    pub country: String,
    pub timestamps: Vec<NaiveDateTime>,
    pub intercept: f64,
    /// GAM terms in model order, then the autoregressive path.
    pub components: Vec<ScenarioComponent>,
    /// Scenario load; equals the intercept plus all components.
    pub total: Vec<f64>,
    /// Deterministic point forecast reduced by the intercept.
    pub point: Vec<f64>,
}

impl ScenarioDecomposition {
    /// Sum of the components of one group.
    pub fn group_total(&self, group: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.timestamps.len()];
        for c in self.components.iter().filter(|c| c.group == group) {
            for (o, v) in out.iter_mut().zip(&c.values) {
                *o += v;
            }
        }
        out
    }

    /// Scenario load reduced by the intercept.
    pub fn scenario(&self) -> Vec<f64> {
        self.total.iter().map(|v| v - self.intercept).collect()
    }

    /// Wide CSV: timestamp, one column per component, scenario, point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.components.iter().map(|c| c.name.clone()));
        header.extend(["scenario".to_string(), "point".to_string()]);
        w.write_record(&header)?;
        let scenario = self.scenario();
        for (h, ts) in self.timestamps.iter().enumerate() {
            let mut row = vec![format_timestamp(*ts)];
            row.extend(self.components.iter().map(|c| c.values[h].to_string()));
            row.push(scenario[h].to_string());
            row.push(self.point[h].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Decomposes the load of `country` for explicit stage paths over the
/// horizon hours in `window`.
pub fn decompose_paths(
    system: &FittedSystem,
    country: &str,
    inputs: &LoadInputs,
    point_load: &[f64],
    window: Range<usize>,
) -> Result<ScenarioDecomposition> {
    let i = system
        .country_index(country)
        .ok_or_else(|| crate::Error::InvalidInput(format!("country `{country}` is not fitted")))?;
    let h = system.horizon.len();
    if window.start >= window.end || window.end > h || point_load.len() != h {
        return invalid(format!("window {window:?} is not inside the {h}-hour horizon"));
    }
    let evaluators = system.evaluators()?;
    let ev = &evaluators[i];
    let (terms, total) = ev.components(inputs)?;
    let names = ev.term_names();
    let mut components: Vec<ScenarioComponent> = terms
        .iter()
        .zip(ev.groups())
        .zip(names)
        .map(|((v, g), name)| ScenarioComponent {
            name: name.to_string(),
            group: g.label().to_string(),
            values: v[window.clone()].to_vec(),
        })
        .collect();
    components.push(ScenarioComponent {
        name: "autoregressive".into(),
        group: "autoregressive".into(),
        values: inputs.autoregressive[window.clone()].to_vec(),
    });
    let intercept = ev.intercept();
    Ok(ScenarioDecomposition {
        country: country.to_string(),
        timestamps: window.clone().map(|t| system.horizon.timestamp(t)).collect(),
        intercept,
        components,
        total: total[window.clone()].to_vec(),
        point: point_load[window].iter().map(|v| v - intercept).collect(),
    })
}

/// Decomposition of the scenario combining the chosen trajectory of each
/// stage.
pub fn decompose_scenario(
    system: &FittedSystem,
    product: &ForecastProduct,
    country: &str,
    choice: ScenarioChoice,
    window: Range<usize>,
) -> Result<ScenarioDecomposition> {
    let i = country_index(product, country)?;
    let n = product.load.n_sims();
    if [choice.temperature, choice.state, choice.autoregressive].iter().any(|s| *s >= n) {
        return invalid(format!("scenario choice {choice:?} exceeds {n} simulations"));
    }
    let inputs = LoadInputs {
        temp_fast: product.temperature.path(choice.temperature, 2 * i),
        temp_slow: product.temperature.path(choice.temperature, 2 * i + 1),
        state: product.state.path(choice.state, i),
        autoregressive: product.autoregressive.path(choice.autoregressive, i),
    };
    decompose_paths(system, country, &inputs, &product.point.load[i], window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ensemble(paths: Vec<Vec<f64>>) -> TrajectoryEnsemble {
        let h = paths[0].len();
        TrajectoryEnsemble::from_blocks(vec!["x".into()], h, paths).unwrap()
    }

    #[test]
    fn uniformly_lowest_path_is_the_minimum() {
        let mut paths: Vec<Vec<f64>> = (0..40).map(|s| (0..10).map(|h| (s * 7 % 13) as f64 + h as f64).collect()).collect();
        paths[17] = (0..10).map(|h| -50.0 + h as f64).collect();
        paths[23] = (0..10).map(|h| 90.0 + h as f64).collect();
        let sel = select_series(&ensemble(paths), 0, StochasticStage::State).unwrap();
        assert_eq!(sel.min, 17);
        assert_eq!(sel.max, 23);
    }

    #[test]
    fn constant_ensemble_ties_go_to_lowest_index() {
        let sel = select_series(&ensemble(vec![vec![2.0; 5]; 8]), 0, StochasticStage::Temperature).unwrap();
        assert!(sel.under.iter().chain(&sel.over).all(|v| *v == 0.0));
        assert_eq!((sel.min, sel.max, sel.medium), (0, 0, 3));
    }

    proptest! {
        #[test]
        fn selection_matches_brute_force(seed in 0u64..1000, n in 2usize..30, h in 1usize..20) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let paths: Vec<Vec<f64>> = (0..n).map(|_| (0..h).map(|_| r.random_range(-3.0..3.0)).collect()).collect();
            let ens = ensemble(paths.clone());
            let sel = select_series(&ens, 0, StochasticStage::Autoregressive).unwrap();
            for s in 0..n {
                prop_assert!(sel.under[s] <= sel.under[sel.min]);
                prop_assert!(sel.over[s] <= sel.over[sel.max]);
            }
            let below = sel.sums.iter().filter(|v| **v < sel.sums[sel.medium]).count();
            prop_assert_eq!(below, (n - 1) / 2);
        }
    }
}
