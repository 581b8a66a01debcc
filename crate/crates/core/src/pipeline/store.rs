//! On-disk layout of datasets, fitted systems and forecast products.
//!
//! A data store is a directory with `load.csv`, `temperature.csv` (both
//! `timestamp,<country...>`) and `holidays.csv` (`country,date,label`). A
//! product directory holds one ensemble CSV per stage, the load quantiles and
//! a JSON manifest with the point forecast.

use std::fs;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::ensemble::{ensemble_quantiles, TrajectoryEnsemble};
use crate::error::{invalid, Result};
use crate::ingest::{read_panel_csv, HourlyPanel, PanelSchema};
use crate::timebase::{load_holiday_calendars, write_holiday_calendars};

use super::config::StateModelKind;
use super::stages::{Dataset, FittedSystem, ForecastProduct, PointForecast};

pub const LOAD_FILE: &str = "load.csv";
pub const TEMPERATURE_FILE: &str = "temperature.csv";
pub const HOLIDAY_FILE: &str = "holidays.csv";
pub const SYSTEM_FILE: &str = "system.json";

/// Restricts both panels to the hours they share.
pub fn align_panels(load: HourlyPanel, temperature: HourlyPanel) -> Result<(HourlyPanel, HourlyPanel)> {
    let start = load.grid.start().max(temperature.grid.start());
    let end = load.grid.end().min(temperature.grid.end());
    if end < start {
        return invalid("load and temperature files do not overlap in time");
    }
    let hours = (end - start).num_hours() as usize + 1;
    let cut = |p: HourlyPanel| -> Result<HourlyPanel> {
        let from = p.grid.hours_from_start(start) as usize;
        if from == 0 && p.len() == hours {
            Ok(p)
        } else {
            p.window(from, hours)
        }
    };
    Ok((cut(load)?, cut(temperature)?))
}

impl Dataset {
    /// Reads raw load, temperature and holiday files onto their common hours.
    pub fn ingest(load: &Path, temperature: &Path, holidays: &Path) -> Result<Dataset> {
        let schema = PanelSchema::default();
        let (load, temperature) = align_panels(read_panel_csv(load, &schema)?, read_panel_csv(temperature, &schema)?)?;
        Dataset::new(load, temperature, load_holiday_calendars(holidays)?)
    }

    pub fn write_store(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.load.write_csv(&dir.join(LOAD_FILE))?;
        self.temperature.write_csv(&dir.join(TEMPERATURE_FILE))?;
        write_holiday_calendars(&dir.join(HOLIDAY_FILE), &self.holidays)
    }

    pub fn read_store(dir: &Path) -> Result<Dataset> {
        Dataset::ingest(&dir.join(LOAD_FILE), &dir.join(TEMPERATURE_FILE), &dir.join(HOLIDAY_FILE))
    }
}

impl FittedSystem {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<FittedSystem> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ProductManifest {
    model: StateModelKind,
    countries: Vec<String>,
    origin: NaiveDateTime,
    probabilities: Vec<f64>,
    point: PointForecast,
}

const ENSEMBLES: [&str; 4] = ["load", "temperature", "state", "autoregressive"];

impl ForecastProduct {
    /// Writes `<stage>_ensemble.csv`, `load_quantiles.csv` and `product.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, ens) in ENSEMBLES.iter().zip([&self.load, &self.temperature, &self.state, &self.autoregressive]) {
            ens.write_csv(&dir.join(format!("{name}_ensemble.csv")))?;
        }
        self.quantiles.write_csv(&dir.join("load_quantiles.csv"))?;
        let manifest = ProductManifest {
            model: self.model,
            countries: self.countries.clone(),
            origin: self.origin,
            probabilities: self.quantiles.probabilities.clone(),
            point: self.point.clone(),
        };
        fs::write(dir.join("product.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<ForecastProduct> {
        let manifest: ProductManifest = serde_json::from_str(&fs::read_to_string(dir.join("product.json"))?)?;
        let mut ens = ENSEMBLES
            .iter()
            .map(|name| TrajectoryEnsemble::read_csv(&dir.join(format!("{name}_ensemble.csv"))))
            .collect::<Result<Vec<_>>>()?
            .into_iter();
        let (load, temperature, state, autoregressive) =
            (ens.next().unwrap(), ens.next().unwrap(), ens.next().unwrap(), ens.next().unwrap());
        let quantiles = ensemble_quantiles(&load, &manifest.probabilities)?;
        Ok(ForecastProduct {
            model: manifest.model,
            countries: manifest.countries,
            origin: manifest.origin,
            load,
            quantiles,
            temperature,
            state,
            autoregressive,
            point: manifest.point,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{generate_synthetic, SyntheticSpec};
    use crate::timebase::TimeGrid;

    #[test]
    fn store_round_trip() {
        let (data, _) = generate_synthetic(&SyntheticSpec {
            hours: 24 * 60,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write_store(dir.path()).unwrap();
        let back = Dataset::read_store(dir.path()).unwrap();
        assert_eq!(back.load, data.load);
        assert_eq!(back.temperature, data.temperature);
        assert_eq!(back.holidays, data.holidays);
    }

    #[test]
    fn panels_aligned_to_overlap() {
        let g = |start: usize, len: usize| {
            TimeGrid::new(
                chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
                    + chrono::Duration::hours(start as i64),
                len,
            )
            .unwrap()
        };
        let a = HourlyPanel::new(g(0, 10), vec!["x".into()], vec![(0..10).map(f64::from).collect()]).unwrap();
        let b = HourlyPanel::new(g(3, 10), vec!["x".into()], vec![(3..13).map(f64::from).collect()]).unwrap();
        let (a, b) = align_panels(a, b).unwrap();
        assert_eq!(a.grid, b.grid);
        assert_eq!(a.len(), 7);
        assert_eq!(a.values[0], b.values[0]);
        let c = HourlyPanel::new(g(20, 5), vec!["x".into()], vec![vec![0.0; 5]]).unwrap();
        assert!(align_panels(a, c).is_err());
    }
}
