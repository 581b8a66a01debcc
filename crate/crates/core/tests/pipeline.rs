//! End-to-end behavior of the three-stage pipeline on reduced-scale
//! synthetic systems.

use std::sync::OnceLock;

use chrono::{Datelike, NaiveDate, NaiveDateTime};
use loadcast::autoreg::{ar_forecast, var_forecast};
use loadcast::ensemble::{derive_seed, CovarianceSource, ErrorCovariance};
use loadcast::ingest::HourlyPanel;
use loadcast::pipeline::bridge::ANCHOR_OFFSET_HOURS;
use loadcast::pipeline::stages::{fit_state_gams, fit_state_stage};
use loadcast::pipeline::*;
use loadcast::statespace::{ets_level_smooth, fit_vets};
use loadcast::timebase::{calendar_features, HolidayCalendar, TimeGrid, HOURS_PER_WEEK};

fn at(y: i32, m: u32, d: u32, h: u32) -> NaiveDateTime {
    NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, 0, 0).unwrap()
}

fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig {
        in_sample_hours: 2 * 365 * 24,
        horizon_hours: 8 * HOURS_PER_WEEK,
        p_max_temperature: 168,
        p_max_load: 336,
        n_sims: 40,
        vets_period: 13,
        ..PipelineConfig::default()
    };
    c.study.experiments = 2;
    c
}

fn origin() -> NaiveDateTime {
    at(2017, 1, 1, 9)
}

fn synthetic() -> &'static (Dataset, SyntheticTruth) {
    static DATA: OnceLock<(Dataset, SyntheticTruth)> = OnceLock::new();
    DATA.get_or_init(|| {
        generate_synthetic(&SyntheticSpec {
            hours: 24 * (365 * 3 + 60),
            ..SyntheticSpec::default()
        })
        .unwrap()
    })
}

fn system() -> &'static FittedSystem {
    static SYSTEM: OnceLock<FittedSystem> = OnceLock::new();
    SYSTEM.get_or_init(|| fit_system(&synthetic().0, &small_config(), origin()).unwrap())
}

fn zero(n: usize, source: CovarianceSource) -> ErrorCovariance {
    ErrorCovariance::zeros(n, source)
}

#[test]
fn temperature_stage_shapes_and_zero_covariance() {
    let (data, _) = synthetic();
    let cfg = small_config();
    let (ens, stage) = stage_temperature(&data.temperature, &cfg, origin()).unwrap();
    assert_eq!(ens.n_series(), 2 * data.temperature.n_series());
    assert_eq!(ens.series()[0], "AA:fast");
    assert_eq!(ens.series()[3], "BB:slow");
    assert_eq!(ens.timestamp(0), Some(origin()));

    let horizon = TimeGrid::new(origin(), cfg.horizon_hours).unwrap();
    let flat = stage
        .simulate(&horizon, &zero(4, CovarianceSource::Temperature), 5, 11)
        .unwrap();
    let seasonal = stage.seasonal_forecast(&horizon).unwrap();
    for j in 0..4 {
        let ar = ar_forecast(&stage.ar_models[j], &stage.ar_history[j], horizon.len()).unwrap();
        for s in 0..5 {
            assert_eq!(flat.path(s, j), flat.path(0, j));
        }
        for h in 0..horizon.len() {
            assert_eq!(flat.get(0, j, h), ar[h] + seasonal[j][h]);
        }
    }
    // without residual history the zero-noise paths are the GAM forecast itself
    let mut quiet = stage.clone();
    quiet.ar_history.iter_mut().for_each(|h| h.iter_mut().for_each(|v| *v = 0.0));
    let flat = quiet.simulate(&horizon, &zero(4, CovarianceSource::Temperature), 3, 1).unwrap();
    for j in 0..4 {
        for h in 0..horizon.len() {
            assert_eq!(flat.get(2, j, h), seasonal[j][h]);
        }
    }
}

#[test]
fn temperature_ensemble_tracks_the_noiseless_seasonal_signal() {
    let (data, truth) = synthetic();
    let cfg = PipelineConfig {
        horizon_hours: 8736,
        ..small_config()
    };
    let spec = SyntheticSpec::default();
    let sigma = spec.temperature_noise_sd();
    let start = data.grid().hours_from_start(origin()) as usize;
    let end = (start + 8736).min(data.grid().len());
    let (ens, _) = stage_temperature(&data.temperature, &cfg, origin()).unwrap();
    for (j, name) in ens.series().iter().enumerate() {
        let country = j / 2;
        let alpha = cfg.temperature_alphas[j % 2];
        let reference = ets_level_smooth(&truth.seasonal_temperature[country], alpha).unwrap().levels;
        let mut sse = 0.0;
        for h in 0..end - start {
            let mean = ens.cell(j, h).iter().sum::<f64>() / ens.n_sims() as f64;
            sse += (mean - reference[start + h]).powi(2);
        }
        let rmse = (sse / (end - start) as f64).sqrt();
        assert!(rmse < 1.5 * sigma, "{name}: rmse {rmse} vs noise sd {sigma}");
    }
}

#[test]
fn weekly_panel_has_one_row_per_complete_week() {
    let sys = system();
    let grid = sys.in_sample;
    let usable = grid.len() - grid.first_monday_offset();
    assert_eq!(sys.state.weekly.n_weeks(), usable / HOURS_PER_WEEK);
    assert_eq!(sys.state.weekly.first_week.weekday(), chrono::Weekday::Mon);
}

#[test]
fn var_state_with_zero_covariance_follows_the_deterministic_forecast() {
    let (data, _) = synthetic();
    let cfg = PipelineConfig {
        state_model: StateModelKind::Var,
        ..small_config()
    };
    let countries = data.countries(&cfg).unwrap();
    let window = data.in_sample(&countries, origin(), cfg.in_sample_hours).unwrap();
    let temps = loadcast::pipeline::stages::fit_temperature_stage(&window.temperature, &cfg).unwrap();
    let (_, stage) = stage_state(&window.load, &window.holidays, &temps, &cfg).unwrap();
    let StateModel::Var(model) = &stage.model else { panic!("VAR expected") };
    assert!(model.spectral_radius() < 1.0);
    let weekly = stage.simulate_weekly(&zero(2, CovarianceSource::State), 4, 9).unwrap();
    let det = var_forecast(model, &stage.weekly.values, stage.weeks).unwrap();
    for s in 0..4 {
        for j in 0..2 {
            for w in 0..stage.weeks {
                assert_eq!(weekly.get(s, j, w), det[(w, j)]);
            }
        }
    }
    // far ahead the stable recursion returns to zero
    let far = var_forecast(model, &stage.weekly.values, 5000).unwrap();
    assert!(far.row(4999).iter().all(|v| v.abs() < 1e-3 * (1.0 + det[(0, 0)].abs())));
}

#[test]
fn vets_state_without_noise_is_constant_at_the_last_level() {
    let (data, _) = synthetic();
    let cfg = small_config();
    let countries = data.countries(&cfg).unwrap();
    let window = data.in_sample(&countries, origin(), cfg.in_sample_hours).unwrap();
    let temps = loadcast::pipeline::stages::fit_temperature_stage(&window.temperature, &cfg).unwrap();
    let gams = fit_state_gams(&window.load, &window.holidays, &temps, &cfg).unwrap();
    let stage = fit_state_stage(&window.grid(), &countries, gams, StateModelKind::Vets, &cfg).unwrap();
    let StateModel::Vets(model) = &stage.model else { panic!("VETS expected") };
    let horizon = window.grid().following(cfg.horizon_hours).unwrap();
    let hourly = stage.simulate(&horizon, &zero(2, CovarianceSource::State), 3, 5).unwrap();
    let last = model.final_levels();
    for j in 0..2 {
        for s in 0..3 {
            assert!(hourly.path(s, j).iter().all(|v| *v == last[j]));
        }
    }
    // in-sample covariate interpolates the fitted levels
    let w = stage.covariate_weekly.n_weeks();
    assert_eq!(stage.covariate_weekly.values[(w - 1, 0)], last[0]);
    assert_eq!(stage.hourly[0].len(), window.grid().len());
}

#[test]
fn vets_level_follows_an_injected_shift() {
    let (data, truth) = synthetic();
    let grid = data.grid();
    let mid = grid.len() / 2;
    let residuals: Vec<Vec<f64>> = (0..2)
        .map(|i| {
            (0..grid.len())
                .map(|t| truth.hourly_state[i][t] + truth.ar_noise[i][t] + if t >= mid { 2.0 } else { 0.0 })
                .collect()
        })
        .collect();
    let panel = HourlyPanel::new(grid, vec!["AA".into(), "BB".into()], residuals).unwrap();
    let features = calendar_features(&grid, &HolidayCalendar::default());
    let weekly = aggregate_peak_residuals(&panel, &features).unwrap();
    let shift_week = (mid - grid.first_monday_offset()).div_ceil(HOURS_PER_WEEK);
    let model = fit_vets(&weekly.values, 52).unwrap();
    let unshifted: Vec<Vec<f64>> = (0..2)
        .map(|i| truth.weekly_state.values.column(i).iter().copied().collect())
        .collect();
    for j in 0..2 {
        // level l_τ after week τ, compared against the shift-free state
        let before = model.level(shift_week, j) - unshifted[j][shift_week];
        let after = model.level(shift_week + 9, j) - unshifted[j][shift_week + 8];
        assert!(after - before >= 1.0, "series {j}: moved {}", after - before);
    }
}

#[test]
fn decomposition_identity_holds_for_every_simulation_and_hour() {
    let sys = system();
    let product = sys.simulate(12, StageSeeds::from_master(3)).unwrap();
    let evaluators = sys.evaluators().unwrap();
    for (i, ev) in evaluators.iter().enumerate() {
        for s in 0..product.load.n_sims() {
            let inputs = LoadInputs {
                temp_fast: product.temperature.path(s, 2 * i),
                temp_slow: product.temperature.path(s, 2 * i + 1),
                state: product.state.path(s, i),
                autoregressive: product.autoregressive.path(s, i),
            };
            let (terms, _) = ev.components(&inputs).unwrap();
            let table_sum: Vec<f64> = (0..sys.horizon.len())
                .map(|h| ev.intercept() + terms.iter().map(|t| t[h]).sum::<f64>() + inputs.autoregressive[h])
                .collect();
            for (h, v) in table_sum.iter().enumerate() {
                assert!((v - product.load.get(s, i, h)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn zero_covariances_collapse_to_the_point_forecast() {
    let mut sys = system().clone();
    sys.temperature.covariance = zero(4, CovarianceSource::Temperature);
    *sys.state.model.covariance_mut() = zero(2, CovarianceSource::State);
    sys.load.covariance = zero(2, CovarianceSource::LoadAr);
    let product = sys.simulate(10, StageSeeds::from_master(5)).unwrap();
    for i in 0..2 {
        for s in 0..10 {
            assert_eq!(product.load.path(s, i), product.point.load[i].as_slice());
        }
        let lo = product.quantiles.path(0, i);
        let hi = product.quantiles.path(product.quantiles.probabilities.len() - 1, i);
        assert_eq!(lo, hi);
    }
}

#[test]
fn permuting_autoregressive_paths_permutes_load_paths() {
    let mut sys = system().clone();
    sys.temperature.covariance = zero(4, CovarianceSource::Temperature);
    *sys.state.model.covariance_mut() = zero(2, CovarianceSource::State);
    let product = sys.simulate(9, StageSeeds::from_master(8)).unwrap();
    let perm = [4, 7, 0, 2, 8, 1, 6, 3, 5];
    let shuffled = product.autoregressive.select_sims(&perm).unwrap();
    let load = compose_load(&sys, &product.temperature, &product.state, &shuffled).unwrap();
    for (s, p) in perm.iter().enumerate() {
        for i in 0..2 {
            assert_eq!(load.path(s, i), product.load.path(*p, i));
        }
    }
}

#[test]
fn vets_hourly_state_is_piecewise_linear_between_anchors() {
    let (data, _) = synthetic();
    let cfg = PipelineConfig {
        state_model: StateModelKind::Vets,
        ..small_config()
    };
    let sys = fit_system(data, &cfg, origin()).unwrap();
    let hourly = sys.state.simulate(&sys.horizon, sys.state.model.covariance(), 3, 2).unwrap();
    let w = sys.state.covariate_weekly.n_weeks();
    let anchor = sys.state.covariate_weekly.anchor(w - 1);
    let base = sys.horizon.hours_from_start(anchor);
    for s in 0..3 {
        let p = hourly.path(s, 0);
        for h in 1..p.len() - 1 {
            let rel = h as i64 - base;
            if rel % HOURS_PER_WEEK as i64 != 0 {
                assert!(((p[h + 1] - p[h]) - (p[h] - p[h - 1])).abs() < 1e-9);
            }
        }
    }
    assert_eq!(ANCHOR_OFFSET_HOURS, 61);
}

#[test]
fn experiments_are_reproducible_and_use_reference_constants() {
    let defaults = PipelineConfig::default();
    assert_eq!(defaults.horizon_hours, 168 * 52);
    assert_eq!(defaults.in_sample_hours, 4 * 365 * 24);
    let (data, _) = synthetic();
    let cfg = PipelineConfig {
        n_sims: 8,
        ..small_config()
    };
    let a = run_experiment(data, &cfg, origin()).unwrap();
    let b = run_experiment(data, &cfg, origin()).unwrap();
    assert_eq!(a.product, b.product);
    assert_eq!(a.product.load.horizon(), cfg.horizon_hours);
    assert_eq!(a.system.in_sample.len(), cfg.in_sample_hours);
    assert!(a.scores.is_some());
    assert!(run_experiment(data, &cfg, at(2017, 1, 2, 9)).is_err());
    assert!(run_experiment(data, &cfg, at(2015, 6, 1, 9)).is_err());
}

#[test]
fn rolling_study_bookkeeping() {
    let (data, _) = synthetic();
    let mut cfg = PipelineConfig {
        n_sims: 10,
        ..small_config()
    };
    cfg.study.experiments = 2;
    let report = rolling_study(data, &cfg).unwrap();
    assert_eq!(report.records.len(), 2 * 3);
    assert_eq!(report.n_experiments(), 2);
    assert_eq!(report.records[0].origin.day(), 1);
    assert_eq!(report.records[3].origin.month(), report.records[0].origin.month() % 12 + 1);
    for m in StateModelKind::ALL {
        let crps = report.mean_crps(m);
        assert_eq!(crps.len(), 2);
        assert!(crps.iter().all(|c| *c > 0.0));
        // the mean is over experiments of the horizon-averaged scores
        let manual: f64 = report
            .records
            .iter()
            .filter(|r| r.model == m)
            .map(|r| r.scores.report.crps[1])
            .sum::<f64>()
            / 2.0;
        assert!((crps[1] - manual).abs() < 1e-12);
        assert!(report.mean_pinball(m).iter().flatten().all(|p| *p > 0.0));
    }
    // experiment k is seeded by (master, k)
    let cfg_var = PipelineConfig {
        state_model: StateModelKind::Var,
        ..cfg.clone()
    };
    let single = run_experiment_seeded(data, &cfg_var, report.records[0].origin, derive_seed(cfg.seed, 0)).unwrap();
    let rec = report
        .records
        .iter()
        .find(|r| r.index == 0 && r.model == StateModelKind::Var)
        .unwrap();
    assert_eq!(single.scores.unwrap(), rec.scores);

    let dir = tempfile::tempdir().unwrap();
    report.write(dir.path()).unwrap();
    for f in ["crps.csv", "pinball.csv", "coverage_hour.csv", "coverage_window.csv", "report.json"] {
        assert!(dir.path().join(f).exists());
    }
}

#[test]
fn scenario_decomposition_reassembles_the_trajectory() {
    let sys = system();
    let product = sys.simulate(20, StageSeeds::from_master(4)).unwrap();
    let sel = select_extreme_trajectories(&product, "AA").unwrap();
    let choice = sel.stress_choice();
    let d = decompose_scenario(sys, &product, "AA", choice, 0..sys.horizon.len()).unwrap();
    for h in 0..d.timestamps.len() {
        let sum: f64 = d.intercept + d.components.iter().map(|c| c.values[h]).sum::<f64>();
        assert!((sum - d.total[h]).abs() < 1e-9);
    }
    // identical indices reproduce a simulated trajectory exactly
    let same = ScenarioChoice {
        temperature: 6,
        state: 6,
        autoregressive: 6,
    };
    let d = decompose_scenario(sys, &product, "BB", same, 10..50).unwrap();
    assert_eq!(d.total, product.load.path(6, 1)[10..50].to_vec());
    // the point-forecast inputs reproduce the point forecast
    let inputs = LoadInputs {
        temp_fast: &product.point.temperature[0],
        temp_slow: &product.point.temperature[1],
        state: &product.point.state[0],
        autoregressive: &product.point.autoregressive[0],
    };
    let d = decompose_paths(sys, "AA", &inputs, &product.point.load[0], 0..100).unwrap();
    assert_eq!(d.scenario(), d.point);
    let dir = tempfile::tempdir().unwrap();
    d.write_csv(&dir.path().join("d.csv")).unwrap();
    sel.write_trajectories(&product, &dir.path().join("t.csv")).unwrap();
}

#[test]
fn fitted_system_survives_serialization() {
    let sys = system();
    let json = serde_json::to_string(sys).unwrap();
    let back: FittedSystem = serde_json::from_str(&json).unwrap();
    let a = sys.simulate(4, StageSeeds::from_master(1)).unwrap();
    let b = back.simulate(4, StageSeeds::from_master(1)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forecast_product_survives_the_product_directory() {
    let sys = system();
    let product = sys.simulate(3, StageSeeds::from_master(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    product.write_dir(dir.path()).unwrap();
    let back = ForecastProduct::read_dir(dir.path()).unwrap();
    assert_eq!(back, product);
    let path = dir.path().join("system.json");
    sys.write_json(&path).unwrap();
    let reread = FittedSystem::read_json(&path).unwrap();
    assert_eq!(reread.simulate(3, StageSeeds::from_master(2)).unwrap(), product);
}
