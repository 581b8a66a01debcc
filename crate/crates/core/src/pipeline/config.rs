//! Run configuration: model constants, term catalog and study settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::default_probabilities;
use crate::error::{invalid, Error, Result};
use crate::ingest::{DEFAULT_MEDIAN_WINDOW, DEFAULT_THRESHOLD_MULTIPLIER};
use crate::timebase::HOURS_PER_WEEK;

/// Model for the weekly socio-economic state series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StateModelKind {
    Var,
    Vecm,
    Vets,
}

impl StateModelKind {
    pub const ALL: [StateModelKind; 3] = [StateModelKind::Var, StateModelKind::Vecm, StateModelKind::Vets];

    pub fn label(&self) -> &'static str {
        match self {
            StateModelKind::Var => "VAR",
            StateModelKind::Vecm => "VECM",
            StateModelKind::Vets => "VETS",
        }
    }
}

impl std::fmt::Display for StateModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for StateModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "VAR" => Ok(StateModelKind::Var),
            "VECM" => Ok(StateModelKind::Vecm),
            "VETS" => Ok(StateModelKind::Vets),
            other => Err(Error::Config(format!("unknown state model `{other}`"))),
        }
    }
}

/// Basis sizes of the seasonal temperature model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureTerms {
    pub hour_k: usize,
    pub year_k: usize,
    /// Hour × year tensor marginal sizes.
    pub hour_year: [usize; 2],
}

impl Default for TemperatureTerms {
    fn default() -> Self {
        Self {
            hour_k: 24,
            year_k: 16,
            hour_year: [8, 8],
        }
    }
}

/// Basis sizes of the stage-(ii) and stage-(iii) load models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadTerms {
    /// Per-day-type cyclic hour-of-day smooths.
    pub hour_k: usize,
    pub year_k: usize,
    pub hour_year: [usize; 2],
    /// Hour-of-day profile active in the winter holiday period.
    pub winter_hour_k: usize,
    /// Open splines on the two smoothed temperatures.
    pub temperature_k: usize,
    /// Fast-temperature × hour-of-day tensor marginal sizes.
    pub temperature_hour: [usize; 2],
    /// Hour-of-day profile multiplied by the weekly state (stage iii only).
    pub state_hour_k: usize,
    /// Temperature spline domains extend the in-sample range by this fraction
    /// on each side so simulated extremes stay inside the basis.
    pub temperature_margin: f64,
}

impl Default for LoadTerms {
    fn default() -> Self {
        Self {
            hour_k: 24,
            year_k: 16,
            hour_year: [8, 8],
            winter_hour_k: 8,
            temperature_k: 10,
            temperature_hour: [8, 6],
            state_hour_k: 12,
            temperature_margin: 0.25,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermCatalog {
    pub temperature: TemperatureTerms,
    pub load: LoadTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutlierSettings {
    pub enabled: bool,
    pub window_hours: usize,
    pub threshold: f64,
}

impl Default for OutlierSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            window_hours: DEFAULT_MEDIAN_WINDOW,
            threshold: DEFAULT_THRESHOLD_MULTIPLIER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySettings {
    pub experiments: usize,
    /// Months between consecutive forecast origins.
    pub step_months: u32,
    /// State models compared in the study.
    pub state_models: Vec<StateModelKind>,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            experiments: 50,
            step_months: 1,
            state_models: StateModelKind::ALL.to_vec(),
        }
    }
}

/// Every constant of the three-stage model; defaults reproduce the reference
/// setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Country codes; empty means every series in the data.
    pub countries: Vec<String>,
    pub state_model: StateModelKind,
    /// Fast and slow temperature smoothing parameters.
    pub temperature_alphas: [f64; 2],
    pub p_max_temperature: usize,
    pub p_max_load: usize,
    pub state_lags: Vec<usize>,
    /// Cointegration rank; `None` means `n − 1`.
    pub vecm_rank: Option<usize>,
    pub vets_period: usize,
    pub n_sims: usize,
    pub horizon_hours: usize,
    pub in_sample_hours: usize,
    pub probabilities: Vec<f64>,
    pub seed: u64,
    pub outliers: OutlierSettings,
    pub terms: TermCatalog,
    pub study: StudySettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            countries: Vec::new(),
            state_model: StateModelKind::Vecm,
            temperature_alphas: [1.0 / 24.0, 1.0 / (14.0 * 24.0)],
            p_max_temperature: 4 * 24 * 7,
            p_max_load: 8 * 24 * 7,
            state_lags: vec![1, 2],
            vecm_rank: None,
            vets_period: 52,
            n_sims: 200,
            horizon_hours: HOURS_PER_WEEK * 52,
            in_sample_hours: 4 * 365 * 24,
            probabilities: default_probabilities(),
            seed: 20240201,
            outliers: OutlierSettings::default(),
            terms: TermCatalog::default(),
            study: StudySettings::default(),
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("`{name}` must be positive")));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Weekly state steps covering the horizon.
    pub fn state_weeks(&self) -> usize {
        self.horizon_hours.div_ceil(HOURS_PER_WEEK)
    }

    /// Cointegration rank for `n` countries.
    pub fn rank_for(&self, n: usize) -> usize {
        self.vecm_rank.unwrap_or(n.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_max_temperature", self.p_max_temperature),
            ("p_max_load", self.p_max_load),
            ("vets_period", self.vets_period),
            ("n_sims", self.n_sims),
            ("horizon_hours", self.horizon_hours),
            ("in_sample_hours", self.in_sample_hours),
            ("outliers.window_hours", self.outliers.window_hours),
            ("study.experiments", self.study.experiments),
            ("study.step_months", self.study.step_months as usize),
        ] {
            positive(name, v)?;
        }
        if self.temperature_alphas.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::Config("temperature smoothing parameters must lie in (0, 1]".into()));
        }
        if self.state_lags.is_empty() || self.state_lags.contains(&0) {
            return Err(Error::Config("state lags must be a non-empty set of positive lags".into()));
        }
        if self.vecm_rank == Some(0) {
            return Err(Error::Config("VECM rank must be positive".into()));
        }
        if self.probabilities.is_empty() || self.probabilities.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config("probabilities must lie in (0, 1)".into()));
        }
        if self.study.state_models.is_empty() {
            return Err(Error::Config("study needs at least one state model".into()));
        }
        if !(self.outliers.threshold > 0.0) {
            return Err(Error::Config("outlier threshold must be positive".into()));
        }
        let t = &self.terms;
        let sizes = [
            t.temperature.hour_k,
            t.temperature.year_k,
            t.temperature.hour_year[0],
            t.temperature.hour_year[1],
            t.load.hour_k,
            t.load.year_k,
            t.load.hour_year[0],
            t.load.hour_year[1],
            t.load.winter_hour_k,
            t.load.temperature_k,
            t.load.temperature_hour[0],
            t.load.temperature_hour[1],
            t.load.state_hour_k,
        ];
        if sizes.iter().any(|k| *k < 4) {
            return Err(Error::Config("every basis needs at least 4 functions".into()));
        }
        if !(t.load.temperature_margin >= 0.0) {
            return Err(Error::Config("temperature margin must be non-negative".into()));
        }
        Ok(())
    }

    pub fn check_countries(&self, n: usize) -> Result<()> {
        if self.state_model == StateModelKind::Vecm || self.study.state_models.contains(&StateModelKind::Vecm) {
            let r = self.rank_for(n);
            if r == 0 || r >= n {
                return invalid(format!("VECM rank {r} is not in 1..{n}"));
            }
        }
        Ok(())
    }
}
