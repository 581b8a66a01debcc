//! The three stochastic stages and their composition into load trajectories.
//!
//! (i) smoothed temperatures: seasonal GAM + sparse AR, jointly simulated;
//! (ii) weekly socio-economic state: peak-hour means of calendar/temperature
//! GAM residuals modeled by VAR, VECM or VETS and interpolated to hours;
//! (iii) load: GAM in calendar, smoothed temperature and state plus sparse AR
//! residuals. Simulation `s` pairs the `s`-th trajectory of every stage; the
//! stages draw from independent random streams.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDateTime};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoreg::{ar_simulate, fit_post_lasso_ar, fit_var, var_simulate_with, PostLassoArModel, VarModel};
use crate::cointegration::{fit_vecm, vecm_simulate_with, VecmModel};
use crate::ensemble::{
    derive_seed, ensemble_quantiles, estimate_covariance_columns, CovarianceSource, ErrorCovariance, QuantileGrid,
    TrajectoryEnsemble,
};
use crate::error::{ensure_finite, invalid, Result};
use crate::gam::{fit_gam, FeatureTable, GamFit, GamSpec};
use crate::ingest::HourlyPanel;
use crate::statespace::{ets_level_smooth, fit_vets, vets_simulate, VetsModel};
use crate::timebase::{calendar_features, CalendarFeatures, HolidayCalendar, TimeGrid};

use super::bridge::{aggregate_peak_residuals, interpolate_into, interpolate_state, WeeklyPanel};
use super::config::{PipelineConfig, StateModelKind};
use super::features::{
    calendar_table, component_group, load_spec, seasonal_table, temperature_domain, temperature_spec,
    ComponentGroup, STATE, TEMP_FAST, TEMP_SLOW,
};

/// Load and temperature panels on one grid, with holiday calendars.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub load: HourlyPanel,
    pub temperature: HourlyPanel,
    pub holidays: BTreeMap<String, HolidayCalendar>,
}

impl Dataset {
    pub fn new(
        load: HourlyPanel,
        temperature: HourlyPanel,
        holidays: BTreeMap<String, HolidayCalendar>,
    ) -> Result<Self> {
        if load.grid != temperature.grid {
            return invalid("load and temperature panels are on different grids");
        }
        Ok(Self {
            load,
            temperature,
            holidays,
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.load.grid
    }

    /// Configured countries, or every load series; each must have a
    /// temperature series of the same name.
    pub fn countries(&self, config: &PipelineConfig) -> Result<Vec<String>> {
        let countries = if config.countries.is_empty() {
            self.load.series_names.clone()
        } else {
            config.countries.clone()
        };
        for c in &countries {
            if self.load.series(c).is_none() || self.temperature.series(c).is_none() {
                return invalid(format!("country `{c}` lacks a load or temperature series"));
            }
        }
        if countries.is_empty() {
            return invalid("no countries to model");
        }
        Ok(countries)
    }

    pub fn calendar(&self, country: &str) -> HolidayCalendar {
        self.holidays.get(country).cloned().unwrap_or_default()
    }

    /// Restriction to `countries` on the hours `from..from + len`.
    pub fn window(&self, countries: &[String], from: usize, len: usize) -> Result<Dataset> {
        Ok(Dataset {
            load: self.load.select(countries)?.window(from, len)?,
            temperature: self.temperature.select(countries)?.window(from, len)?,
            holidays: countries.iter().map(|c| (c.clone(), self.calendar(c))).collect(),
        })
    }

    /// The `hours` observations directly before `origin`.
    pub fn in_sample(&self, countries: &[String], origin: NaiveDateTime, hours: usize) -> Result<Dataset> {
        let end = self.grid().hours_from_start(origin);
        if end < hours as i64 || end > self.grid().len() as i64 {
            return invalid(format!(
                "{hours} in-sample hours before {origin} are not covered by the data ({} to {})",
                self.grid().start(),
                self.grid().end()
            ));
        }
        self.window(countries, end as usize - hours, hours)
    }

    /// `hours` observations from `origin` on, if the data covers them.
    pub fn actuals(&self, countries: &[String], origin: NaiveDateTime, hours: usize) -> Option<Vec<Vec<f64>>> {
        let from = self.grid().index_of(origin)?;
        if from + hours > self.grid().len() {
            return None;
        }
        let panel = self.load.select(countries).ok()?;
        Some(panel.values.iter().map(|c| c[from..from + hours].to_vec()).collect())
    }
}

/// Smoothed-temperature models, two per country (fast then slow).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureStage {
    pub countries: Vec<String>,
    pub alphas: [f64; 2],
    /// `"{country}:fast"`, `"{country}:slow"` per country.
    pub series_names: Vec<String>,
    pub gams: Vec<GamFit>,
    pub ar_models: Vec<PostLassoArModel>,
    /// Last `p_max` GAM residuals of each series.
    pub ar_history: Vec<Vec<f64>>,
    pub covariance: ErrorCovariance,
    /// In-sample smoothed temperatures, one per series.
    #[serde(skip)]
    pub smoothed: Vec<Vec<f64>>,
}

/// Weekly-state models: stage-(ii) GAMs and the fitted state process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateStage {
    pub kind: StateModelKind,
    pub gams: Vec<GamFit>,
    /// Weekly peak-hour residual means `r_τ`.
    pub weekly: WeeklyPanel,
    pub model: StateModel,
    /// Weekly values whose interpolation is the in-sample state covariate:
    /// `r_τ` itself for VAR/VECM, the fitted level for VETS.
    pub covariate_weekly: WeeklyPanel,
    /// Weekly steps simulated past the last complete week.
    pub weeks: usize,
    /// In-sample stage-(ii) residuals per country.
    #[serde(skip)]
    pub residuals: Vec<Vec<f64>>,
    /// In-sample hourly state covariate per country.
    #[serde(skip)]
    pub hourly: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StateModel {
    Var(VarModel),
    Vecm(VecmModel),
    Vets(VetsModel),
}

impl StateModel {
    pub fn covariance(&self) -> &ErrorCovariance {
        match self {
            StateModel::Var(m) => &m.covariance,
            StateModel::Vecm(m) => &m.covariance,
            StateModel::Vets(m) => &m.covariance,
        }
    }

    pub fn covariance_mut(&mut self) -> &mut ErrorCovariance {
        match self {
            StateModel::Var(m) => &mut m.covariance,
            StateModel::Vecm(m) => &mut m.covariance,
            StateModel::Vets(m) => &mut m.covariance,
        }
    }
}

/// Stage-(iii) load models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadStage {
    pub gams: Vec<GamFit>,
    pub ar_models: Vec<PostLassoArModel>,
    pub ar_history: Vec<Vec<f64>>,
    pub covariance: ErrorCovariance,
    #[serde(skip)]
    pub residuals: Vec<Vec<f64>>,
}

/// Everything needed to simulate a forecast from one origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedSystem {
    pub config: PipelineConfig,
    pub countries: Vec<String>,
    /// First forecast hour.
    pub origin: NaiveDateTime,
    pub in_sample: TimeGrid,
    pub horizon: TimeGrid,
    pub holidays: BTreeMap<String, HolidayCalendar>,
    pub temperature: TemperatureStage,
    pub state: StateStage,
    pub load: LoadStage,
}

/// Deterministic (zero-innovation) paths of every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointForecast {
    /// Two smoothed temperatures per country.
    pub temperature: Vec<Vec<f64>>,
    pub state: Vec<Vec<f64>>,
    pub autoregressive: Vec<Vec<f64>>,
    pub load: Vec<Vec<f64>>,
}

/// Load trajectories with the stage ensembles that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastProduct {
    pub model: StateModelKind,
    pub countries: Vec<String>,
    pub origin: NaiveDateTime,
    pub load: TrajectoryEnsemble,
    pub quantiles: QuantileGrid,
    pub temperature: TrajectoryEnsemble,
    pub state: TrajectoryEnsemble,
    pub autoregressive: TrajectoryEnsemble,
    pub point: PointForecast,
}

/// Per-stage random streams of one experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSeeds {
    pub temperature: u64,
    pub state: u64,
    pub load: u64,
}

impl StageSeeds {
    pub fn from_master(seed: u64) -> Self {
        Self {
            temperature: derive_seed(seed, 1),
            state: derive_seed(seed, 2),
            load: derive_seed(seed, 3),
        }
    }
}

fn tail(v: &[f64], n: usize) -> Vec<f64> {
    v[v.len().saturating_sub(n)..].to_vec()
}

fn ar_covariance(models: &[PostLassoArModel], source: CovarianceSource) -> Result<ErrorCovariance> {
    let cols: Vec<Vec<f64>> = models.iter().map(|m| m.residuals.clone()).collect();
    estimate_covariance_columns(&cols, source)
}

/// Ensemble timestamps start at `origin`.
fn stamped(ens: TrajectoryEnsemble, origin: NaiveDateTime) -> TrajectoryEnsemble {
    ens.with_origin(origin - Duration::hours(1), 1)
}

/// Fits the stage-(i) models on in-sample temperatures (one series per
/// country, in order).
pub fn fit_temperature_stage(temps: &HourlyPanel, config: &PipelineConfig) -> Result<TemperatureStage> {
    let features = calendar_features(&temps.grid, &HolidayCalendar::default());
    let table = seasonal_table(&features)?;
    let spec = temperature_spec(&config.terms.temperature)?;
    let jobs: Vec<(usize, f64)> = (0..temps.n_series())
        .flat_map(|i| config.temperature_alphas.iter().map(move |a| (i, *a)))
        .collect();
    let fits = jobs
        .par_iter()
        .map(|&(i, alpha)| {
            let raw = &temps.values[i];
            ensure_finite(raw, "temperature")?;
            let smoothed = ets_level_smooth(raw, alpha)?.levels;
            let gam = fit_gam(&spec, &table, &smoothed)?;
            let ar = fit_post_lasso_ar(&gam.residuals, config.p_max_temperature)?;
            let history = tail(&gam.residuals, config.p_max_temperature);
            Ok((smoothed, gam, ar, history))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut stage = TemperatureStage {
        countries: temps.series_names.clone(),
        alphas: config.temperature_alphas,
        series_names: temps
            .series_names
            .iter()
            .flat_map(|c| [format!("{c}:fast"), format!("{c}:slow")])
            .collect(),
        gams: Vec::new(),
        ar_models: Vec::new(),
        ar_history: Vec::new(),
        covariance: ErrorCovariance::zeros(0, CovarianceSource::Temperature),
        smoothed: Vec::new(),
    };
    for (smoothed, gam, ar, history) in fits {
        stage.smoothed.push(smoothed);
        stage.gams.push(gam);
        stage.ar_models.push(ar);
        stage.ar_history.push(history);
    }
    stage.covariance = ar_covariance(&stage.ar_models, CovarianceSource::Temperature)?;
    Ok(stage)
}

impl TemperatureStage {
    /// Seasonal GAM prediction per series over `horizon`.
    pub fn seasonal_forecast(&self, horizon: &TimeGrid) -> Result<Vec<Vec<f64>>> {
        let features = calendar_features(horizon, &HolidayCalendar::default());
        let table = seasonal_table(&features)?;
        self.gams.iter().map(|g| g.predict(&table)).collect()
    }

    /// Trajectories of all `2n` smoothed temperatures.
    pub fn simulate(
        &self,
        horizon: &TimeGrid,
        cov: &ErrorCovariance,
        n_sims: usize,
        seed: u64,
    ) -> Result<TrajectoryEnsemble> {
        let seasonal = self.seasonal_forecast(horizon)?;
        let history: Vec<&[f64]> = self.ar_history.iter().map(|h| h.as_slice()).collect();
        let mut ens = ar_simulate(&self.ar_models, &history, horizon.len(), cov, n_sims, seed)?;
        for s in 0..n_sims {
            for (j, point) in seasonal.iter().enumerate() {
                for (v, p) in ens.path_mut(s, j).iter_mut().zip(point) {
                    *v += p;
                }
            }
        }
        ens.rename(self.series_names.clone())?;
        Ok(stamped(ens, horizon.start()))
    }

    /// In-sample smoothed temperatures as a panel.
    pub fn smoothed_panel(&self, grid: &TimeGrid) -> Result<HourlyPanel> {
        HourlyPanel::new(*grid, self.series_names.clone(), self.smoothed.clone())
    }
}

/// Calendar covariates of every country on `grid`.
fn country_tables(
    grid: &TimeGrid,
    countries: &[String],
    holidays: &BTreeMap<String, HolidayCalendar>,
) -> Result<Vec<FeatureTable>> {
    countries
        .iter()
        .map(|c| {
            let cal = holidays.get(c).cloned().unwrap_or_default();
            calendar_table(&calendar_features(grid, &cal))
        })
        .collect()
}

fn load_specs(temps: &TemperatureStage, config: &PipelineConfig, with_state: bool) -> Result<Vec<GamSpec>> {
    let t = &config.terms.load;
    (0..temps.countries.len())
        .map(|i| {
            let fast = temperature_domain(&temps.smoothed[2 * i], t.temperature_margin);
            let slow = temperature_domain(&temps.smoothed[2 * i + 1], t.temperature_margin);
            load_spec(t, fast, slow, with_state)
        })
        .collect()
}

fn with_temperatures(mut table: FeatureTable, fast: &[f64], slow: &[f64]) -> Result<FeatureTable> {
    table.insert(TEMP_FAST, fast.to_vec())?;
    table.insert(TEMP_SLOW, slow.to_vec())?;
    Ok(table)
}

/// Fits the stage-(ii) load GAMs (no state term) and returns their
/// residuals.
pub fn fit_state_gams(
    load: &HourlyPanel,
    holidays: &BTreeMap<String, HolidayCalendar>,
    temps: &TemperatureStage,
    config: &PipelineConfig,
) -> Result<Vec<GamFit>> {
    if temps.smoothed.len() != 2 * load.n_series() || temps.smoothed.iter().any(|s| s.len() != load.len()) {
        return invalid("smoothed temperatures do not cover the in-sample load");
    }
    let specs = load_specs(temps, config, false)?;
    let tables = country_tables(&load.grid, &load.series_names, holidays)?;
    (0..load.n_series())
        .into_par_iter()
        .map(|i| {
            ensure_finite(&load.values[i], "load")?;
            let table = with_temperatures(tables[i].clone(), &temps.smoothed[2 * i], &temps.smoothed[2 * i + 1])?;
            fit_gam(&specs[i], &table, &load.values[i])
        })
        .collect()
}

/// Fits the weekly state model on stage-(ii) residuals.
pub fn fit_state_stage(
    grid: &TimeGrid,
    countries: &[String],
    gams: Vec<GamFit>,
    kind: StateModelKind,
    config: &PipelineConfig,
) -> Result<StateStage> {
    let residuals: Vec<Vec<f64>> = gams.iter().map(|g| g.residuals.clone()).collect();
    let panel = HourlyPanel::new(*grid, countries.to_vec(), residuals.clone())?;
    let features = calendar_features(grid, &HolidayCalendar::default());
    let weekly = aggregate_peak_residuals(&panel, &features)?;
    let (model, covariate) = match kind {
        StateModelKind::Var => (StateModel::Var(fit_var(&weekly.values, &config.state_lags)?), weekly.values.clone()),
        StateModelKind::Vecm => (
            StateModel::Vecm(fit_vecm(&weekly.values, config.rank_for(countries.len()))?),
            weekly.values.clone(),
        ),
        StateModelKind::Vets => {
            let m = fit_vets(&weekly.values, config.vets_period)?;
            let levels = m.levels.rows(1, weekly.n_weeks()).into_owned();
            (StateModel::Vets(m), levels)
        }
    };
    let covariate_weekly = WeeklyPanel::new(weekly.first_week, countries.to_vec(), covariate)?;
    let hourly = interpolate_state(&covariate_weekly, grid)?.values;
    Ok(StateStage {
        kind,
        gams,
        weekly,
        model,
        covariate_weekly,
        weeks: config.state_weeks(),
        residuals,
        hourly,
    })
}

impl StateStage {
    /// Simulated weekly covariate values for the weeks after the last
    /// complete in-sample week (`n` series × `weeks` steps).
    pub fn simulate_weekly(&self, cov: &ErrorCovariance, n_sims: usize, seed: u64) -> Result<TrajectoryEnsemble> {
        let mut ens = match &self.model {
            StateModel::Var(m) => var_simulate_with(m, &self.weekly.values, self.weeks, cov, n_sims, seed)?,
            StateModel::Vecm(m) => vecm_simulate_with(m, &self.weekly.values, self.weeks, cov, n_sims, seed)?,
            StateModel::Vets(m) => vets_simulate(m, self.weeks, cov, n_sims, seed)?.levels,
        };
        ens.rename(self.weekly.series_names.clone())?;
        let last_week = self.weekly.week_start(self.weekly.n_weeks() - 1);
        Ok(ens.with_origin(last_week, crate::timebase::HOURS_PER_WEEK as i64))
    }

    /// Hourly state trajectories on `horizon`, interpolated from the last
    /// in-sample weekly value and the simulated weeks.
    pub fn simulate(
        &self,
        horizon: &TimeGrid,
        cov: &ErrorCovariance,
        n_sims: usize,
        seed: u64,
    ) -> Result<TrajectoryEnsemble> {
        let weekly = self.simulate_weekly(cov, n_sims, seed)?;
        let n = self.weekly.n_series();
        let w = self.covariate_weekly.n_weeks();
        let anchor = self.covariate_weekly.anchor(w - 1);
        let h = horizon.len();
        let blocks: Vec<Vec<f64>> = (0..n_sims)
            .into_par_iter()
            .map(|s| {
                let mut block = Vec::with_capacity(n * h);
                let mut values = Vec::with_capacity(self.weeks + 1);
                let mut out = Vec::with_capacity(h);
                for j in 0..n {
                    values.clear();
                    values.push(self.covariate_weekly.values[(w - 1, j)]);
                    values.extend_from_slice(weekly.path(s, j));
                    interpolate_into(anchor, &values, horizon, &mut out);
                    block.extend_from_slice(&out);
                }
                block
            })
            .collect();
        let ens = TrajectoryEnsemble::from_blocks(self.weekly.series_names.clone(), h, blocks)?;
        Ok(stamped(ens, horizon.start()))
    }
}

/// Fits the stage-(iii) load GAMs with the state term and the load AR models.
pub fn fit_load_stage(
    load: &HourlyPanel,
    holidays: &BTreeMap<String, HolidayCalendar>,
    temps: &TemperatureStage,
    state: &StateStage,
    config: &PipelineConfig,
) -> Result<LoadStage> {
    if state.hourly.len() != load.n_series() || state.hourly.iter().any(|s| s.len() != load.len()) {
        return invalid("in-sample state covariate does not cover the load panel");
    }
    let specs = load_specs(temps, config, true)?;
    let tables = country_tables(&load.grid, &load.series_names, holidays)?;
    let fits = (0..load.n_series())
        .into_par_iter()
        .map(|i| {
            let mut table = with_temperatures(tables[i].clone(), &temps.smoothed[2 * i], &temps.smoothed[2 * i + 1])?;
            table.insert(STATE, state.hourly[i].clone())?;
            let gam = fit_gam(&specs[i], &table, &load.values[i])?;
            let ar = fit_post_lasso_ar(&gam.residuals, config.p_max_load)?;
            Ok((gam, ar))
        })
        .collect::<Result<Vec<_>>>()?;
    let (gams, ar_models): (Vec<GamFit>, Vec<PostLassoArModel>) = fits.into_iter().unzip();
    let residuals: Vec<Vec<f64>> = gams.iter().map(|g| g.residuals.clone()).collect();
    let ar_history = residuals.iter().map(|r| tail(r, config.p_max_load)).collect();
    let covariance = ar_covariance(&ar_models, CovarianceSource::LoadAr)?;
    Ok(LoadStage {
        gams,
        ar_models,
        ar_history,
        covariance,
        residuals,
    })
}

impl LoadStage {
    pub fn simulate_autoregressive(
        &self,
        countries: &[String],
        horizon: &TimeGrid,
        cov: &ErrorCovariance,
        n_sims: usize,
        seed: u64,
    ) -> Result<TrajectoryEnsemble> {
        let history: Vec<&[f64]> = self.ar_history.iter().map(|h| h.as_slice()).collect();
        let mut ens = ar_simulate(&self.ar_models, &history, horizon.len(), cov, n_sims, seed)?;
        ens.rename(countries.to_vec())?;
        Ok(stamped(ens, horizon.start()))
    }
}

/// Stochastic inputs of one country's load path.
#[derive(Debug, Clone, Copy)]
pub struct LoadInputs<'a> {
    pub temp_fast: &'a [f64],
    pub temp_slow: &'a [f64],
    pub state: &'a [f64],
    pub autoregressive: &'a [f64],
}

/// Evaluates a load GAM over a fixed calendar, caching the calendar-only
/// terms. Totals always sum intercept, terms in model order, then the AR
/// path, so decompositions reproduce trajectories exactly.
pub struct LoadEvaluator<'a> {
    fit: &'a GamFit,
    base: FeatureTable,
    groups: Vec<ComponentGroup>,
    cached: Vec<Option<Vec<f64>>>,
}

impl<'a> LoadEvaluator<'a> {
    pub fn new(fit: &'a GamFit, base: FeatureTable) -> Result<Self> {
        let groups: Vec<ComponentGroup> = fit.terms.iter().map(|t| component_group(&t.spec)).collect();
        let mut clamped = 0;
        let cached = groups
            .iter()
            .enumerate()
            .map(|(i, g)| match g {
                ComponentGroup::Calendar => fit.term_contribution(i, &base, &mut clamped).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            fit,
            base,
            groups,
            cached,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn intercept(&self) -> f64 {
        self.fit.intercept
    }

    pub fn term_names(&self) -> Vec<&str> {
        self.fit.term_names()
    }

    pub fn groups(&self) -> &[ComponentGroup] {
        &self.groups
    }

    fn stochastic_terms(&self, inputs: &LoadInputs) -> Result<Vec<Option<Vec<f64>>>> {
        let mut table = with_temperatures(self.base.clone(), inputs.temp_fast, inputs.temp_slow)?;
        if self.groups.contains(&ComponentGroup::State) {
            table.insert(STATE, inputs.state.to_vec())?;
        }
        let mut clamped = 0;
        let out = self
            .cached
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                Some(_) => Ok(None),
                None => self.fit.term_contribution(i, &table, &mut clamped).map(Some),
            })
            .collect::<Result<_>>()?;
        if clamped > 0 {
            log::debug!("{clamped} simulated covariate values clamped into their spline domains");
        }
        Ok(out)
    }

    fn assemble(&self, terms: &[&[f64]], ar: &[f64]) -> Vec<f64> {
        let mut out = vec![self.fit.intercept; self.len()];
        for t in terms {
            for (o, v) in out.iter_mut().zip(t.iter()) {
                *o += v;
            }
        }
        for (o, v) in out.iter_mut().zip(ar) {
            *o += v;
        }
        out
    }

    /// Load path for the given inputs.
    pub fn evaluate(&self, inputs: &LoadInputs) -> Result<Vec<f64>> {
        self.check(inputs)?;
        let stochastic = self.stochastic_terms(inputs)?;
        let terms: Vec<&[f64]> = self
            .cached
            .iter()
            .zip(&stochastic)
            .map(|(c, s)| c.as_deref().or(s.as_deref()).unwrap_or(&[]))
            .collect();
        Ok(self.assemble(&terms, inputs.autoregressive))
    }

    /// Per-term contributions and the total they sum to.
    pub fn components(&self, inputs: &LoadInputs) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.check(inputs)?;
        let stochastic = self.stochastic_terms(inputs)?;
        let terms: Vec<Vec<f64>> = self
            .cached
            .iter()
            .zip(stochastic)
            .map(|(c, s)| c.clone().or(s).unwrap_or_default())
            .collect();
        let refs: Vec<&[f64]> = terms.iter().map(|t| t.as_slice()).collect();
        let total = self.assemble(&refs, inputs.autoregressive);
        Ok((terms, total))
    }

    fn check(&self, inputs: &LoadInputs) -> Result<()> {
        let n = self.len();
        if [inputs.temp_fast, inputs.temp_slow, inputs.state, inputs.autoregressive]
            .iter()
            .any(|v| v.len() != n)
        {
            return invalid(format!("load inputs must all have {n} hours"));
        }
        Ok(())
    }
}

impl FittedSystem {
    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn country_index(&self, country: &str) -> Option<usize> {
        self.countries.iter().position(|c| c == country)
    }

    /// Calendar covariates of every country over the horizon.
    pub fn horizon_tables(&self) -> Result<Vec<FeatureTable>> {
        country_tables(&self.horizon, &self.countries, &self.holidays)
    }

    pub fn horizon_features(&self, country: &str) -> CalendarFeatures {
        calendar_features(&self.horizon, &self.holidays.get(country).cloned().unwrap_or_default())
    }

    pub fn evaluators(&self) -> Result<Vec<LoadEvaluator<'_>>> {
        self.horizon_tables()?
            .into_iter()
            .zip(&self.load.gams)
            .map(|(t, g)| LoadEvaluator::new(g, t))
            .collect()
    }

    /// Deterministic paths of every stage (all innovations zero).
    pub fn point_forecast(&self) -> Result<PointForecast> {
        let n = self.n_countries();
        let temp = self.temperature.simulate(
            &self.horizon,
            &ErrorCovariance::zeros(2 * n, CovarianceSource::Temperature),
            1,
            0,
        )?;
        let state = self
            .state
            .simulate(&self.horizon, &ErrorCovariance::zeros(n, CovarianceSource::State), 1, 0)?;
        let ar = self.load.simulate_autoregressive(
            &self.countries,
            &self.horizon,
            &ErrorCovariance::zeros(n, CovarianceSource::LoadAr),
            1,
            0,
        )?;
        let evaluators = self.evaluators()?;
        let load = (0..n)
            .map(|i| {
                evaluators[i].evaluate(&LoadInputs {
                    temp_fast: temp.path(0, 2 * i),
                    temp_slow: temp.path(0, 2 * i + 1),
                    state: state.path(0, i),
                    autoregressive: ar.path(0, i),
                })
            })
            .collect::<Result<_>>()?;
        Ok(PointForecast {
            temperature: (0..2 * n).map(|j| temp.path(0, j).to_vec()).collect(),
            state: (0..n).map(|j| state.path(0, j).to_vec()).collect(),
            autoregressive: (0..n).map(|j| ar.path(0, j).to_vec()).collect(),
            load,
        })
    }

    /// Simulates all stages and composes `n_sims` load trajectories.
    pub fn simulate(&self, n_sims: usize, seeds: StageSeeds) -> Result<ForecastProduct> {
        let temperature = self
            .temperature
            .simulate(&self.horizon, &self.temperature.covariance, n_sims, seeds.temperature)?;
        let state = self
            .state
            .simulate(&self.horizon, self.state.model.covariance(), n_sims, seeds.state)?;
        let autoregressive = self.load.simulate_autoregressive(
            &self.countries,
            &self.horizon,
            &self.load.covariance,
            n_sims,
            seeds.load,
        )?;
        let load = compose_load(self, &temperature, &state, &autoregressive)?;
        let quantiles = ensemble_quantiles(&load, &self.config.probabilities)?;
        Ok(ForecastProduct {
            model: self.state.kind,
            countries: self.countries.clone(),
            origin: self.origin,
            load,
            quantiles,
            temperature,
            state,
            autoregressive,
            point: self.point_forecast()?,
        })
    }
}

/// Load trajectories from index-paired stage trajectories.
pub fn compose_load(
    system: &FittedSystem,
    temperature: &TrajectoryEnsemble,
    state: &TrajectoryEnsemble,
    autoregressive: &TrajectoryEnsemble,
) -> Result<TrajectoryEnsemble> {
    let n = system.n_countries();
    let n_sims = temperature.n_sims();
    let h = system.horizon.len();
    if state.n_sims() != n_sims || autoregressive.n_sims() != n_sims {
        return invalid("stage ensembles differ in their number of simulations");
    }
    if temperature.horizon() != h || state.horizon() != h || autoregressive.horizon() != h {
        return invalid("stage ensembles do not cover the forecast horizon");
    }
    if temperature.n_series() != 2 * n || state.n_series() != n || autoregressive.n_series() != n {
        return invalid("stage ensembles do not match the fitted countries");
    }
    let evaluators = system.evaluators()?;
    let blocks = (0..n_sims)
        .into_par_iter()
        .map(|s| {
            let mut block = Vec::with_capacity(n * h);
            for (i, ev) in evaluators.iter().enumerate() {
                block.extend(ev.evaluate(&LoadInputs {
                    temp_fast: temperature.path(s, 2 * i),
                    temp_slow: temperature.path(s, 2 * i + 1),
                    state: state.path(s, i),
                    autoregressive: autoregressive.path(s, i),
                })?);
            }
            Ok(block)
        })
        .collect::<Result<Vec<_>>>()?;
    let ens = TrajectoryEnsemble::from_blocks(system.countries.clone(), h, blocks)?;
    Ok(stamped(ens, system.horizon.start()))
}

/// Fits the full system for each requested state model, sharing the
/// state-independent stages. `data` must already be the in-sample window.
pub fn fit_systems(
    data: &Dataset,
    config: &PipelineConfig,
    origin: NaiveDateTime,
    kinds: &[StateModelKind],
) -> Result<Vec<FittedSystem>> {
    config.validate()?;
    let countries = data.load.series_names.clone();
    config.check_countries(countries.len())?;
    let grid = data.grid();
    if grid.hours_from_start(origin) != grid.len() as i64 {
        return invalid(format!("in-sample window does not end directly before {origin}"));
    }
    let horizon = grid.following(config.horizon_hours)?;
    log::info!("fitting temperature stage ({} series)", 2 * countries.len());
    let temperature = fit_temperature_stage(&data.temperature, config)?;
    log::info!("fitting stage-(ii) load models");
    let state_gams = fit_state_gams(&data.load, &data.holidays, &temperature, config)?;
    kinds
        .iter()
        .map(|&kind| {
            log::info!("fitting {kind} state model and stage-(iii) load models");
            let state = fit_state_stage(&grid, &countries, state_gams.clone(), kind, config)?;
            let load = fit_load_stage(&data.load, &data.holidays, &temperature, &state, config)?;
            Ok(FittedSystem {
                config: PipelineConfig {
                    state_model: kind,
                    ..config.clone()
                },
                countries: countries.clone(),
                origin,
                in_sample: grid,
                horizon,
                holidays: data.holidays.clone(),
                temperature: temperature.clone(),
                state,
                load,
            })
        })
        .collect()
}

/// Fits the configured state model from the in-sample window before
/// `origin` of the full data.
pub fn fit_system(data: &Dataset, config: &PipelineConfig, origin: NaiveDateTime) -> Result<FittedSystem> {
    let countries = data.countries(config)?;
    let window = data.in_sample(&countries, origin, config.in_sample_hours)?;
    Ok(fit_systems(&window, config, origin, &[config.state_model])?.remove(0))
}

/// Stage (i): fits on the in-sample window of `temps` ending before
/// `origin` and simulates the smoothed temperatures.
pub fn stage_temperature(
    temps: &HourlyPanel,
    config: &PipelineConfig,
    origin: NaiveDateTime,
) -> Result<(TrajectoryEnsemble, TemperatureStage)> {
    let end = temps.grid.hours_from_start(origin);
    if end < config.in_sample_hours as i64 || end > temps.len() as i64 {
        return invalid(format!(
            "temperatures do not cover {} in-sample hours before {origin}",
            config.in_sample_hours
        ));
    }
    let window = temps.window(end as usize - config.in_sample_hours, config.in_sample_hours)?;
    let stage = fit_temperature_stage(&window, config)?;
    let horizon = window.grid.following(config.horizon_hours)?;
    let seeds = StageSeeds::from_master(config.seed);
    let ens = stage.simulate(&horizon, &stage.covariance, config.n_sims, seeds.temperature)?;
    Ok((ens, stage))
}

/// Stage (ii): fits the state GAMs and model on in-sample `load` (aligned
/// with the temperature stage) and simulates hourly state trajectories.
pub fn stage_state(
    load: &HourlyPanel,
    holidays: &BTreeMap<String, HolidayCalendar>,
    temps: &TemperatureStage,
    config: &PipelineConfig,
) -> Result<(TrajectoryEnsemble, StateStage)> {
    let gams = fit_state_gams(load, holidays, temps, config)?;
    let stage = fit_state_stage(&load.grid, &load.series_names, gams, config.state_model, config)?;
    let horizon = load.grid.following(config.horizon_hours)?;
    let seeds = StageSeeds::from_master(config.seed);
    let ens = stage.simulate(&horizon, stage.model.covariance(), config.n_sims, seeds.state)?;
    Ok((ens, stage))
}

/// Stage (iii): fits the load models and composes the forecast from the
/// upstream ensembles.
pub fn stage_load(
    load: &HourlyPanel,
    holidays: &BTreeMap<String, HolidayCalendar>,
    temps: (&TemperatureStage, &TrajectoryEnsemble),
    state: (&StateStage, &TrajectoryEnsemble),
    config: &PipelineConfig,
) -> Result<(ForecastProduct, FittedSystem)> {
    let load_stage = fit_load_stage(load, holidays, temps.0, state.0, config)?;
    let horizon = load.grid.following(config.horizon_hours)?;
    let system = FittedSystem {
        config: PipelineConfig {
            state_model: state.0.kind,
            ..config.clone()
        },
        countries: load.series_names.clone(),
        origin: horizon.start(),
        in_sample: load.grid,
        horizon,
        holidays: holidays.clone(),
        temperature: temps.0.clone(),
        state: state.0.clone(),
        load: load_stage,
    };
    let seeds = StageSeeds::from_master(config.seed);
    let n_sims = temps.1.n_sims();
    let autoregressive = system.load.simulate_autoregressive(
        &system.countries,
        &horizon,
        &system.load.covariance,
        n_sims,
        seeds.load,
    )?;
    let load_ens = compose_load(&system, temps.1, state.1, &autoregressive)?;
    let quantiles = ensemble_quantiles(&load_ens, &config.probabilities)?;
    let product = ForecastProduct {
        model: system.state.kind,
        countries: system.countries.clone(),
        origin: system.origin,
        load: load_ens,
        quantiles,
        temperature: temps.1.clone(),
        state: state.1.clone(),
        autoregressive,
        point: system.point_forecast()?,
    };
    Ok((product, system))
}

/// Weekly panel helper used by tests and the CLI.
pub fn weekly_matrix(ens: &TrajectoryEnsemble, sim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(ens.horizon(), ens.n_series(), |h, j| ens.get(sim, j, h))
}
