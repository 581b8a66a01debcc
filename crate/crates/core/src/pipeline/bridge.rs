//! Hourly ↔ weekly bridge for the socio-economic state.
//!
//! Residuals are averaged over working-day peak hours (08:00–19:00, Monday to
//! Friday) of each complete Monday-aligned week. Weekly values are mapped back
//! to hours by linear interpolation between Wednesday 13:00 anchors, held
//! constant beyond the first and last anchor.

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::ingest::HourlyPanel;
use crate::timebase::{CalendarFeatures, TimeGrid, HOURS_PER_WEEK};

pub const PEAK_FIRST_HOUR: u8 = 8;
pub const PEAK_LAST_HOUR: u8 = 19;
/// Hours aggregated per week: 12 peak hours on 5 working days.
pub const PEAK_HOURS_PER_WEEK: usize = 60;
/// Offset of the Wednesday 13:00 anchor from Monday 00:00.
pub const ANCHOR_OFFSET_HOURS: i64 = 2 * 24 + 13;

/// Weekly values, row `τ` belonging to the week starting at
/// `first_week + τ·168 h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeeklyPanel {
    /// Monday 00:00 of the first week.
    pub first_week: NaiveDateTime,
    pub series_names: Vec<String>,
    /// `W × n`.
    pub values: DMatrix<f64>,
}

impl WeeklyPanel {
    pub fn new(first_week: NaiveDateTime, series_names: Vec<String>, values: DMatrix<f64>) -> Result<Self> {
        if first_week.weekday().num_days_from_monday() != 0 || first_week.hour() != 0 || first_week.minute() != 0 {
            return invalid(format!("week start {first_week} is not Monday 00:00"));
        }
        if values.ncols() != series_names.len() {
            return invalid("weekly panel column count differs from the series names");
        }
        Ok(Self {
            first_week,
            series_names,
            values,
        })
    }

    pub fn n_weeks(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_series(&self) -> usize {
        self.values.ncols()
    }

    pub fn week_start(&self, tau: usize) -> NaiveDateTime {
        self.first_week + Duration::hours((tau * HOURS_PER_WEEK) as i64)
    }

    /// Wednesday 13:00 of week `tau`.
    pub fn anchor(&self, tau: usize) -> NaiveDateTime {
        self.week_start(tau) + Duration::hours(ANCHOR_OFFSET_HOURS)
    }
}

fn is_peak(features: &CalendarFeatures, i: usize) -> bool {
    features.is_working_day(i) && (PEAK_FIRST_HOUR..=PEAK_LAST_HOUR).contains(&features.hour_of_day[i])
}

/// Weekly peak-hour means of every series over complete weeks.
pub fn aggregate_peak_residuals(residuals: &HourlyPanel, features: &CalendarFeatures) -> Result<WeeklyPanel> {
    if features.len() != residuals.len() {
        return invalid("calendar features are not aligned with the residual panel");
    }
    let offset = residuals.grid.first_monday_offset();
    let weeks = residuals.len().saturating_sub(offset) / HOURS_PER_WEEK;
    if weeks == 0 {
        return invalid("residual panel holds no complete Monday-aligned week");
    }
    let n = residuals.n_series();
    let mut values = DMatrix::zeros(weeks, n);
    for tau in 0..weeks {
        let from = offset + tau * HOURS_PER_WEEK;
        let peak: Vec<usize> = (from..from + HOURS_PER_WEEK).filter(|&i| is_peak(features, i)).collect();
        debug_assert_eq!(peak.len(), PEAK_HOURS_PER_WEEK);
        for (j, col) in residuals.values.iter().enumerate() {
            values[(tau, j)] = peak.iter().map(|&i| col[i]).sum::<f64>() / peak.len() as f64;
        }
    }
    WeeklyPanel::new(
        residuals.grid.timestamp(offset),
        residuals.series_names.clone(),
        values,
    )
}

/// Interpolates one weekly column onto `grid`.
pub fn interpolate_weekly(first_anchor: NaiveDateTime, weekly: &[f64], grid: &TimeGrid) -> Vec<f64> {
    let mut out = Vec::with_capacity(grid.len());
    interpolate_into(first_anchor, weekly, grid, &mut out);
    out
}

pub(crate) fn interpolate_into(first_anchor: NaiveDateTime, weekly: &[f64], grid: &TimeGrid, out: &mut Vec<f64>) {
    out.clear();
    let w = weekly.len();
    let base = grid.hours_from_start(first_anchor);
    let step = HOURS_PER_WEEK as i64;
    for i in 0..grid.len() as i64 {
        let rel = i - base;
        let v = if rel <= 0 {
            weekly[0]
        } else if rel >= step * (w as i64 - 1) {
            weekly[w - 1]
        } else {
            let k = (rel / step) as usize;
            let frac = (rel % step) as f64 / step as f64;
            weekly[k] + frac * (weekly[k + 1] - weekly[k])
        };
        out.push(v);
    }
}

/// Hourly state covariate from weekly values.
pub fn interpolate_state(weekly: &WeeklyPanel, grid: &TimeGrid) -> Result<HourlyPanel> {
    if weekly.n_weeks() == 0 {
        return invalid("interpolation needs at least one weekly value");
    }
    let anchor = weekly.anchor(0);
    let values = (0..weekly.n_series())
        .map(|j| {
            let col: Vec<f64> = weekly.values.column(j).iter().copied().collect();
            interpolate_weekly(anchor, &col, grid)
        })
        .collect();
    HourlyPanel::new(*grid, weekly.series_names.clone(), values)
}
