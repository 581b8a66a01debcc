//! Covariate tables and term catalogs of the temperature and load models.

use crate::error::Result;
use crate::gam::{By, FeatureTable, GamSpec, Marginal, TermSpec};
use crate::splines::BasisSpec;
use crate::timebase::{CalendarFeatures, DAY_TYPES};

use super::config::{LoadTerms, TemperatureTerms};

pub const HOUR: &str = "hour";
pub const YEAR: &str = "year";
pub const DAY_TYPE: &str = "day_type";
pub const WINTER: &str = "winter";
pub const TEMP_FAST: &str = "temp_fast";
pub const TEMP_SLOW: &str = "temp_slow";
pub const STATE: &str = "state";

/// Which stochastic input, if any, a term reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ComponentGroup {
    Calendar,
    Temperature,
    State,
}

impl ComponentGroup {
    pub fn label(&self) -> &'static str {
        match self {
            ComponentGroup::Calendar => "calendar",
            ComponentGroup::Temperature => "temperature",
            ComponentGroup::State => "state",
        }
    }
}

/// Group of a term from the covariates it reads.
pub fn component_group(term: &TermSpec) -> ComponentGroup {
    let mut names: Vec<&str> = term
        .marginals
        .iter()
        .map(|m| match m {
            Marginal::Spline { covariate, .. } | Marginal::Factor { covariate, .. } => covariate.as_str(),
        })
        .collect();
    match &term.by {
        By::None => {}
        By::Numeric { covariate } | By::Level { covariate, .. } => names.push(covariate),
    }
    if names.contains(&STATE) {
        ComponentGroup::State
    } else if names.iter().any(|n| *n == TEMP_FAST || *n == TEMP_SLOW) {
        ComponentGroup::Temperature
    } else {
        ComponentGroup::Calendar
    }
}

/// Hour-of-day and year-position columns.
pub fn seasonal_table(features: &CalendarFeatures) -> Result<FeatureTable> {
    FeatureTable::new(features.len())
        .with(HOUR, features.hour_of_day.iter().map(|h| *h as f64).collect())?
        .with(YEAR, features.year_position.clone())
}

/// Seasonal columns plus day type and winter-period indicator.
pub fn calendar_table(features: &CalendarFeatures) -> Result<FeatureTable> {
    let n = features.len();
    seasonal_table(features)?
        .with(DAY_TYPE, (0..n).map(|i| features.day_type(i) as f64).collect())?
        .with(
            WINTER,
            features.is_winter_period.iter().map(|w| if *w { 1.0 } else { 0.0 }).collect(),
        )
}

fn hour_basis(k: usize) -> Result<BasisSpec> {
    BasisSpec::cyclic(k, 0.0, 24.0)
}

fn year_basis(k: usize) -> Result<BasisSpec> {
    BasisSpec::cyclic(k, 0.0, 1.0)
}

/// Daily and annual seasonality of a smoothed temperature.
pub fn temperature_spec(t: &TemperatureTerms) -> Result<GamSpec> {
    GamSpec::new(vec![
        TermSpec::smooth("hour", Marginal::spline(HOUR, hour_basis(t.hour_k)?)),
        TermSpec::smooth("year", Marginal::spline(YEAR, year_basis(t.year_k)?)),
        TermSpec::tensor(
            "hour_year",
            vec![
                Marginal::spline(HOUR, hour_basis(t.hour_year[0])?),
                Marginal::spline(YEAR, year_basis(t.hour_year[1])?),
            ],
        ),
    ])
}

/// Spline domain for a temperature series, widened by `margin` of its range.
pub fn temperature_domain(values: &[f64], margin: f64) -> (f64, f64) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * margin).max(1e-6);
    (lo - pad, hi + pad)
}

pub const DAY_TYPE_NAMES: [&str; DAY_TYPES] = ["mon", "tue_thu", "fri", "sat", "sun", "holiday"];

/// Load model terms; the state term is included when `with_state`.
pub fn load_spec(t: &LoadTerms, fast: (f64, f64), slow: (f64, f64), with_state: bool) -> Result<GamSpec> {
    let mut terms = vec![TermSpec::smooth(
        "day_type",
        Marginal::Factor {
            covariate: DAY_TYPE.into(),
            levels: DAY_TYPES,
        },
    )];
    for (d, name) in DAY_TYPE_NAMES.iter().enumerate() {
        terms.push(
            TermSpec::smooth(&format!("hour_{name}"), Marginal::spline(HOUR, hour_basis(t.hour_k)?)).with_by(
                By::Level {
                    covariate: DAY_TYPE.into(),
                    level: d,
                },
            ),
        );
    }
    terms.push(TermSpec::smooth("year", Marginal::spline(YEAR, year_basis(t.year_k)?)));
    terms.push(TermSpec::tensor(
        "hour_year",
        vec![
            Marginal::spline(HOUR, hour_basis(t.hour_year[0])?),
            Marginal::spline(YEAR, year_basis(t.hour_year[1])?),
        ],
    ));
    terms.push(
        TermSpec::smooth("winter_hour", Marginal::spline(HOUR, hour_basis(t.winter_hour_k)?)).with_by(By::Numeric {
            covariate: WINTER.into(),
        }),
    );
    terms.push(TermSpec::smooth(
        "temp_fast",
        Marginal::spline(TEMP_FAST, BasisSpec::open(t.temperature_k, fast.0, fast.1)?),
    ));
    terms.push(TermSpec::smooth(
        "temp_slow",
        Marginal::spline(TEMP_SLOW, BasisSpec::open(t.temperature_k, slow.0, slow.1)?),
    ));
    terms.push(TermSpec::tensor(
        "temp_fast_hour",
        vec![
            Marginal::spline(TEMP_FAST, BasisSpec::open(t.temperature_hour[0], fast.0, fast.1)?),
            Marginal::spline(HOUR, hour_basis(t.temperature_hour[1])?),
        ],
    ));
    if with_state {
        terms.push(
            TermSpec::smooth("state_hour", Marginal::spline(HOUR, hour_basis(t.state_hour_k)?)).with_by(By::Numeric {
                covariate: STATE.into(),
            }),
        );
    }
    GamSpec::new(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::timebase::{calendar_features, parse_timestamp, HolidayCalendar, TimeGrid};

    #[test]
    fn catalog_groups_terms_by_input() {
        let spec = load_spec(&LoadTerms::default(), (-10.0, 30.0), (-5.0, 25.0), true).unwrap();
        let groups: Vec<_> = spec.terms.iter().map(component_group).collect();
        assert_eq!(groups.iter().filter(|g| **g == ComponentGroup::Temperature).count(), 3);
        assert_eq!(groups.iter().filter(|g| **g == ComponentGroup::State).count(), 1);
        assert_eq!(spec.terms.len(), 1 + 6 + 2 + 1 + 3 + 1);
        let without = load_spec(&LoadTerms::default(), (-10.0, 30.0), (-5.0, 25.0), false).unwrap();
        assert!(without.terms.iter().all(|t| component_group(t) != ComponentGroup::State));
    }

    #[test]
    fn tables_hold_expected_columns() {
        let grid = TimeGrid::new(parse_timestamp("2023-12-31T22:00").unwrap(), 5).unwrap();
        let f = calendar_features(&grid, &HolidayCalendar::default());
        let t = calendar_table(&f).unwrap();
        assert_eq!(t.get(HOUR).unwrap(), &[22.0, 23.0, 0.0, 1.0, 2.0]);
        assert_eq!(t.get(DAY_TYPE).unwrap()[0], 4.0);
        assert_eq!(t.get(WINTER).unwrap(), &[1.0; 5]);
        assert!(t.get(YEAR).unwrap()[2] < 1e-9);
    }

    #[test]
    fn domain_is_padded() {
        let (lo, hi) = temperature_domain(&[0.0, 10.0, 4.0], 0.25);
        assert_eq!((lo, hi), (-2.5, 12.5));
    }
}
