//! Single forecasting experiments and the rolling-origin study.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Datelike, Duration, Months, NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::ensemble::{derive_seed, QuantileGrid};
use crate::error::{invalid, Result};
use crate::ingest::{adjust_outliers, OutlierReport};
use crate::scoring::{coverage_rows, coverage_table, score_forecast, write_score_rows, CoverageTable, ScoreReport, ScoreRow};
use crate::timebase::HOURS_PER_WEEK;

use super::config::{PipelineConfig, StateModelKind};
use super::stages::{fit_systems, Dataset, FittedSystem, ForecastProduct, StageSeeds};

/// Forecast origins fall on the first day of a month at this hour.
pub const ORIGIN_HOUR: u32 = 9;

/// Scores of one product against realized load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductScores {
    pub report: ScoreReport,
    /// Per country, grouped by hour of day (`hour_00` … `hour_23`).
    pub by_hour: Vec<CoverageTable>,
    /// Per country, grouped into the first two weeks, the last two weeks and
    /// the rest of the horizon.
    pub by_window: Vec<CoverageTable>,
}

/// One fitted and simulated forecast.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub system: FittedSystem,
    pub product: ForecastProduct,
    pub scores: Option<ProductScores>,
    pub outliers: OutlierReport,
}

pub fn is_valid_origin(origin: NaiveDateTime) -> bool {
    origin.day() == 1 && origin.hour() == ORIGIN_HOUR && origin.minute() == 0 && origin.second() == 0
}

fn single_series_grid(grid: &QuantileGrid, j: usize) -> QuantileGrid {
    let (np, n, h) = (grid.probabilities.len(), grid.series.len(), grid.horizon);
    let mut values = Vec::with_capacity(np * h);
    for p in 0..np {
        let from = (p * n + j) * h;
        values.extend_from_slice(&grid.values[from..from + h]);
    }
    QuantileGrid {
        probabilities: grid.probabilities.clone(),
        series: vec![grid.series[j].clone()],
        horizon: h,
        values,
        origin: grid.origin,
        step_hours: grid.step_hours,
    }
}

/// Horizon window label: first two weeks, last two weeks, or the rest.
pub fn window_group(h: usize, horizon: usize) -> String {
    let two_weeks = 2 * HOURS_PER_WEEK;
    let weeks = horizon.div_ceil(HOURS_PER_WEEK);
    if h < two_weeks {
        "weeks_01_02".into()
    } else if h + two_weeks >= horizon {
        format!("weeks_{:02}_{:02}", weeks.saturating_sub(1), weeks)
    } else {
        "middle".into()
    }
}

/// CRPS, pinball and coverage of `product` against `actuals[country][h]`.
pub fn score_product(product: &ForecastProduct, actuals: &[Vec<f64>]) -> Result<ProductScores> {
    let report = score_forecast(&product.load, &product.quantiles, actuals)?;
    let horizon = product.load.horizon();
    let mut by_hour = Vec::new();
    let mut by_window = Vec::new();
    for (j, a) in actuals.iter().enumerate() {
        let grid = single_series_grid(&product.quantiles, j);
        let single = std::slice::from_ref(a);
        by_hour.push(coverage_table(&grid, single, |_, h| {
            let hour = (product.origin + Duration::hours(h as i64)).hour();
            format!("hour_{hour:02}")
        })?);
        by_window.push(coverage_table(&grid, single, |_, h| window_group(h, horizon))?);
    }
    Ok(ProductScores {
        report,
        by_hour,
        by_window,
    })
}

fn run_for_models(
    data: &Dataset,
    config: &PipelineConfig,
    origin: NaiveDateTime,
    seed: u64,
    kinds: &[StateModelKind],
) -> Result<Vec<Experiment>> {
    if !is_valid_origin(origin) {
        return invalid(format!("origin {origin} is not 09:00 on the first day of a month"));
    }
    let countries = data.countries(config)?;
    let mut window = data.in_sample(&countries, origin, config.in_sample_hours)?;
    let mut outliers = OutlierReport::default();
    if config.outliers.enabled {
        let (adjusted, report) = adjust_outliers(&window.load, config.outliers.window_hours, config.outliers.threshold)?;
        window.load = adjusted;
        outliers = report;
    }
    let actuals = data.actuals(&countries, origin, config.horizon_hours);
    let seeds = StageSeeds::from_master(seed);
    fit_systems(&window, config, origin, kinds)?
        .into_iter()
        .map(|system| {
            log::info!("simulating {} trajectories ({})", config.n_sims, system.state.kind);
            let product = system.simulate(config.n_sims, seeds)?;
            let scores = actuals.as_ref().map(|a| score_product(&product, a)).transpose()?;
            Ok(Experiment {
                system,
                product,
                scores,
                outliers: outliers.clone(),
            })
        })
        .collect()
}

/// Outlier adjustment, the three stages and scoring (when the data covers
/// the horizon) for one origin, seeded by `config.seed`.
pub fn run_experiment(data: &Dataset, config: &PipelineConfig, origin: NaiveDateTime) -> Result<Experiment> {
    Ok(run_for_models(data, config, origin, config.seed, &[config.state_model])?.remove(0))
}

/// Same as [`run_experiment`] with an explicit master seed.
pub fn run_experiment_seeded(
    data: &Dataset,
    config: &PipelineConfig,
    origin: NaiveDateTime,
    seed: u64,
) -> Result<Experiment> {
    Ok(run_for_models(data, config, origin, seed, &[config.state_model])?.remove(0))
}

/// Earliest valid origin with a full in-sample window.
pub fn first_origin(data: &Dataset, config: &PipelineConfig) -> Result<NaiveDateTime> {
    let earliest = data.grid().start() + Duration::hours(config.in_sample_hours as i64);
    let mut date = NaiveDate::from_ymd_opt(earliest.year(), earliest.month(), 1).unwrap();
    loop {
        let candidate = date.and_hms_opt(ORIGIN_HOUR, 0, 0).unwrap();
        if candidate >= earliest {
            return Ok(candidate);
        }
        date = date + Months::new(1);
    }
}

/// Origins of up to `config.study.experiments` experiments whose horizon is
/// covered by the data.
pub fn study_origins(data: &Dataset, config: &PipelineConfig) -> Result<Vec<NaiveDateTime>> {
    let first = first_origin(data, config)?;
    let last_hour = data.grid().end();
    let mut out = Vec::new();
    for k in 0..config.study.experiments {
        let origin = first + Months::new(config.study.step_months * k as u32);
        let end = origin + Duration::hours(config.horizon_hours as i64 - 1);
        if end > last_hour {
            log::warn!(
                "data ends at {last_hour}; running {} of {} experiments",
                out.len(),
                config.study.experiments
            );
            break;
        }
        out.push(origin);
    }
    if out.is_empty() {
        return invalid("data span is too short for a single experiment");
    }
    Ok(out)
}

/// Scores of one experiment for one state model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub index: usize,
    pub origin: NaiveDateTime,
    pub model: StateModelKind,
    pub scores: ProductScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub countries: Vec<String>,
    pub models: Vec<StateModelKind>,
    pub probabilities: Vec<f64>,
    pub records: Vec<ExperimentRecord>,
}

impl StudyReport {
    pub fn n_experiments(&self) -> usize {
        self.records.iter().map(|r| r.index + 1).max().unwrap_or(0)
    }

    fn records_for(&self, model: StateModelKind) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.iter().filter(move |r| r.model == model)
    }

    /// CRPS averaged over the horizon and all experiments, per country.
    pub fn mean_crps(&self, model: StateModelKind) -> Vec<f64> {
        self.mean_over(model, |r, j| r.scores.report.crps[j])
    }

    /// Pinball loss averaged over the horizon and experiments, `[country][p]`.
    pub fn mean_pinball(&self, model: StateModelKind) -> Vec<Vec<f64>> {
        (0..self.probabilities.len())
            .map(|p| self.mean_over(model, |r, j| r.scores.report.pinball[j][p]))
            .fold(vec![Vec::new(); self.countries.len()], |mut acc, col| {
                for (j, v) in col.into_iter().enumerate() {
                    acc[j].push(v);
                }
                acc
            })
    }

    fn mean_over(&self, model: StateModelKind, f: impl Fn(&ExperimentRecord, usize) -> f64) -> Vec<f64> {
        (0..self.countries.len())
            .map(|j| {
                let vals: Vec<f64> = self.records_for(model).map(|r| f(r, j)).collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            })
            .collect()
    }

    /// Coverage pooled over experiments, per country.
    pub fn pooled_coverage(&self, model: StateModelKind, by_window: bool) -> Result<Vec<CoverageTable>> {
        let mut out: Vec<Option<CoverageTable>> = vec![None; self.countries.len()];
        for r in self.records_for(model) {
            let tables = if by_window { &r.scores.by_window } else { &r.scores.by_hour };
            for (slot, t) in out.iter_mut().zip(tables) {
                match slot {
                    Some(acc) => acc.absorb(t)?,
                    None => *slot = Some(t.clone()),
                }
            }
        }
        Ok(out.into_iter().flatten().collect())
    }

    /// Coverage of every probability pooled over countries and experiments.
    pub fn overall_coverage(&self, model: StateModelKind) -> Result<Vec<f64>> {
        let tables = self.pooled_coverage(model, true)?;
        Ok((0..self.probabilities.len())
            .map(|p| {
                let hits: usize = tables.iter().flat_map(|t| t.hits.iter().map(move |h| h[p])).sum();
                let n: usize = tables.iter().flat_map(|t| t.counts.iter()).sum();
                hits as f64 / n as f64
            })
            .collect())
    }

    /// Per-experiment and averaged CRPS rows.
    pub fn crps_rows(&self) -> Vec<ScoreRow> {
        let mut rows = Vec::new();
        for r in &self.records {
            for (j, c) in self.countries.iter().enumerate() {
                rows.push(ScoreRow {
                    model: r.model.to_string(),
                    country: c.clone(),
                    group: format!("experiment_{:02}", r.index + 1),
                    metric: "crps".into(),
                    value: r.scores.report.crps[j],
                });
            }
        }
        for m in &self.models {
            for (c, v) in self.countries.iter().zip(self.mean_crps(*m)) {
                rows.push(ScoreRow {
                    model: m.to_string(),
                    country: c.clone(),
                    group: "mean".into(),
                    metric: "crps".into(),
                    value: v,
                });
            }
        }
        rows
    }

    pub fn pinball_rows(&self) -> Vec<ScoreRow> {
        let mut rows = Vec::new();
        for m in &self.models {
            for (c, per_p) in self.countries.iter().zip(self.mean_pinball(*m)) {
                for (q, v) in self.probabilities.iter().zip(per_p) {
                    rows.push(ScoreRow {
                        model: m.to_string(),
                        country: c.clone(),
                        group: "mean".into(),
                        metric: format!("pinball_q{q}"),
                        value: v,
                    });
                }
            }
        }
        rows
    }

    pub fn coverage_rows(&self, by_window: bool) -> Result<Vec<ScoreRow>> {
        let mut rows = Vec::new();
        for m in &self.models {
            for (c, t) in self.countries.iter().zip(self.pooled_coverage(*m, by_window)?) {
                rows.extend(coverage_rows(m.label(), c, &t));
            }
        }
        Ok(rows)
    }

    /// Writes `crps.csv`, `pinball.csv`, `coverage_hour.csv`,
    /// `coverage_window.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_score_rows(&self.crps_rows(), &dir.join("crps.csv"))?;
        write_score_rows(&self.pinball_rows(), &dir.join("pinball.csv"))?;
        write_score_rows(&self.coverage_rows(false)?, &dir.join("coverage_hour.csv"))?;
        write_score_rows(&self.coverage_rows(true)?, &dir.join("coverage_window.csv"))?;
        serde_json::to_writer_pretty(std::fs::File::create(dir.join("report.json"))?, self)?;
        Ok(())
    }
}

/// Rolling-origin study: experiment `k` starts `k` steps after the first
/// valid origin and uses the seed derived from `(config.seed, k)`.
pub fn rolling_study(data: &Dataset, config: &PipelineConfig) -> Result<StudyReport> {
    let countries = data.countries(config)?;
    let origins = study_origins(data, config)?;
    let models = config.study.state_models.clone();
    let mut records = Vec::new();
    for (k, origin) in origins.iter().enumerate() {
        log::info!("experiment {}/{} at {origin}", k + 1, origins.len());
        let seed = derive_seed(config.seed, k as u64);
        for exp in run_for_models(data, config, *origin, seed, &models)? {
            let scores = exp.scores.expect("study origins always have actuals");
            records.push(ExperimentRecord {
                index: k,
                origin: *origin,
                model: exp.system.state.kind,
                scores,
            });
        }
    }
    let mut per_model: BTreeMap<StateModelKind, usize> = BTreeMap::new();
    for r in &records {
        *per_model.entry(r.model).or_default() += 1;
    }
    log::info!("study finished: {per_model:?}");
    Ok(StudyReport {
        countries,
        models,
        probabilities: config.probabilities.clone(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timebase::parse_timestamp;

    #[test]
    fn window_groups() {
        assert_eq!(window_group(0, 8736), "weeks_01_02");
        assert_eq!(window_group(335, 8736), "weeks_01_02");
        assert_eq!(window_group(336, 8736), "middle");
        assert_eq!(window_group(8736 - 336, 8736), "weeks_51_52");
        assert_eq!(window_group(8735, 8736), "weeks_51_52");
    }

    #[test]
    fn origin_rule() {
        assert!(is_valid_origin(parse_timestamp("2020-03-01T09:00").unwrap()));
        assert!(!is_valid_origin(parse_timestamp("2020-03-02T09:00").unwrap()));
        assert!(!is_valid_origin(parse_timestamp("2020-03-01T08:00").unwrap()));
    }
}
