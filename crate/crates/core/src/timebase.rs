//! Hourly time grid, holiday calendars and deterministic calendar covariates.
//!
//! All series live on a fixed-offset clock (local standard time): every day has
//! exactly 24 hours. Weekdays are numbered from 0 = Monday.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const HOURS_PER_WEEK: usize = 168;

/// Consecutive hourly timestamps on a fixed-offset clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    start: NaiveDateTime,
    len: usize,
}

/// Builds a grid of `hours` consecutive hourly stamps starting at `start`.
pub fn build_hourly_grid(start: NaiveDateTime, hours: usize) -> Result<TimeGrid> {
    TimeGrid::new(start, hours)
}

impl TimeGrid {
    pub fn new(start: NaiveDateTime, hours: usize) -> Result<Self> {
        if hours == 0 {
            return invalid("time grid needs at least one hour");
        }
        if start.minute() != 0 || start.second() != 0 || start.nanosecond() != 0 {
            return invalid(format!("grid start {start} is not aligned to a full hour"));
        }
        Ok(Self { start, len: hours })
    }

    pub fn start(&self) -> NaiveDateTime {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Last timestamp on the grid.
    pub fn end(&self) -> NaiveDateTime {
        self.timestamp(self.len - 1)
    }

    pub fn timestamp(&self, i: usize) -> NaiveDateTime {
        self.start + Duration::hours(i as i64)
    }

    pub fn weekday_of_first(&self) -> u8 {
        self.start.weekday().num_days_from_monday() as u8
    }

    /// Days in the calendar year of the `i`-th stamp (365 or 366).
    pub fn days_in_year(&self, i: usize) -> u32 {
        days_in_year(self.timestamp(i).year())
    }

    /// Offset of `ts` on this grid, if it lies on it.
    pub fn index_of(&self, ts: NaiveDateTime) -> Option<usize> {
        let d = ts.signed_duration_since(self.start);
        if d.num_seconds() % 3600 != 0 {
            return None;
        }
        let h = d.num_hours();
        (h >= 0 && (h as usize) < self.len).then_some(h as usize)
    }

    /// Signed hour offset of `ts` relative to the grid start.
    pub fn hours_from_start(&self, ts: NaiveDateTime) -> i64 {
        ts.signed_duration_since(self.start).num_hours()
    }

    pub fn iter(&self) -> impl Iterator<Item = NaiveDateTime> + '_ {
        (0..self.len).map(|i| self.timestamp(i))
    }

    /// Sub-grid of `len` hours starting at offset `from`.
    pub fn slice(&self, from: usize, len: usize) -> Result<TimeGrid> {
        if from + len > self.len {
            return invalid(format!(
                "slice {from}..{} exceeds grid length {}",
                from + len,
                self.len
            ));
        }
        TimeGrid::new(self.timestamp(from), len)
    }

    /// Grid of `hours` stamps directly following this one.
    pub fn following(&self, hours: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.end() + Duration::hours(1), hours)
    }

    /// Offset of the first Monday 00:00 at or after the grid start.
    pub fn first_monday_offset(&self) -> usize {
        let wd = self.weekday_of_first() as usize;
        let hour = self.start.hour() as usize;
        if wd == 0 && hour == 0 {
            0
        } else {
            (7 - wd) * 24 - hour
        }
    }
}

pub fn days_in_year(year: i32) -> u32 {
    if NaiveDate::from_ymd_opt(year, 2, 29).is_some() {
        366
    } else {
        365
    }
}

/// Membership of the fixed annual winter holiday period, Dec 18 – Jan 6.
pub fn is_winter_period(date: NaiveDate) -> bool {
    matches!((date.month(), date.day()), (12, d) if d >= 18) || matches!((date.month(), date.day()), (1, d) if d <= 6)
}

/// Fraction of the calendar year elapsed at `ts`, using the actual year length.
pub fn year_position(ts: NaiveDateTime) -> f64 {
    let doy = ts.ordinal0() as f64;
    (doy + ts.hour() as f64 / 24.0) / days_in_year(ts.year()) as f64
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HolidayEntry {
    pub date: NaiveDate,
    pub label: String,
}

/// Public holidays of one country. The winter period predicate needs no entries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<HolidayEntry>", into = "Vec<HolidayEntry>")]
pub struct HolidayCalendar {
    entries: Vec<HolidayEntry>,
    dates: BTreeSet<NaiveDate>,
}

impl From<Vec<HolidayEntry>> for HolidayCalendar {
    fn from(entries: Vec<HolidayEntry>) -> Self {
        Self::new(entries)
    }
}

impl From<HolidayCalendar> for Vec<HolidayEntry> {
    fn from(cal: HolidayCalendar) -> Self {
        cal.entries
    }
}

impl HolidayCalendar {
    pub fn new(entries: impl IntoIterator<Item = HolidayEntry>) -> Self {
        let unique: BTreeSet<HolidayEntry> = entries.into_iter().collect();
        let dates = unique.iter().map(|e| e.date).collect();
        Self {
            entries: unique.into_iter().collect(),
            dates,
        }
    }

    pub fn entries(&self) -> &[HolidayEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        self.dates.contains(&date)
    }

    pub fn is_winter_period(&self, date: NaiveDate) -> bool {
        is_winter_period(date)
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct HolidayRow {
    country: String,
    date: String,
    label: String,
}

fn parse_holiday_rows(rows: Vec<HolidayRow>) -> Result<BTreeMap<String, HolidayCalendar>> {
    let mut by_country: BTreeMap<String, Vec<HolidayEntry>> = BTreeMap::new();
    for (i, row) in rows.into_iter().enumerate() {
        let date = NaiveDate::parse_from_str(row.date.trim(), "%Y-%m-%d").map_err(|e| {
            Error::Parse {
                row: i + 1,
                message: format!("unparseable date `{}`: {e}", row.date),
            }
        })?;
        by_country
            .entry(row.country.trim().to_string())
            .or_default()
            .push(HolidayEntry {
                date,
                label: row.label.trim().to_string(),
            });
    }
    Ok(by_country
        .into_iter()
        .map(|(c, e)| (c, HolidayCalendar::new(e)))
        .collect())
}

/// Reads `country,date,label` rows from a CSV file, or a JSON array of
/// objects with the same keys when the file extension is `.json`.
pub fn load_holiday_calendars(path: &Path) -> Result<BTreeMap<String, HolidayCalendar>> {
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    let rows: Vec<HolidayRow> = if is_json {
        serde_json::from_reader(std::fs::File::open(path)?)?
    } else {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize().enumerate() {
            rows.push(rec.map_err(|e| Error::Parse {
                row: i + 1,
                message: e.to_string(),
            })?);
        }
        rows
    };
    parse_holiday_rows(rows)
}

/// Calendar of one country from a holiday file; an absent country yields an
/// empty calendar.
pub fn load_holiday_calendar(path: &Path, country: &str) -> Result<HolidayCalendar> {
    Ok(load_holiday_calendars(path)?
        .remove(country)
        .unwrap_or_default())
}

pub fn write_holiday_calendars(
    path: &Path,
    calendars: &BTreeMap<String, HolidayCalendar>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (country, cal) in calendars {
        for e in cal.entries() {
            w.serialize(HolidayRow {
                country: country.clone(),
                date: e.date.format("%Y-%m-%d").to_string(),
                label: e.label.clone(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Day types used by the load models: Monday, Tuesday–Thursday, Friday,
/// Saturday, Sunday, holiday.
pub const DAY_TYPES: usize = 6;
pub const HOLIDAY_DAY_TYPE: u8 = 5;

/// Deterministic per-hour calendar covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CalendarFeatures {
    pub hour_of_day: Vec<u8>,
    pub day_of_week: Vec<u8>,
    pub year_position: Vec<f64>,
    pub is_holiday: Vec<bool>,
    pub is_winter_period: Vec<bool>,
}

pub fn calendar_features(grid: &TimeGrid, cal: &HolidayCalendar) -> CalendarFeatures {
    let n = grid.len();
    let mut f = CalendarFeatures {
        hour_of_day: Vec::with_capacity(n),
        day_of_week: Vec::with_capacity(n),
        year_position: Vec::with_capacity(n),
        is_holiday: Vec::with_capacity(n),
        is_winter_period: Vec::with_capacity(n),
    };
    for ts in grid.iter() {
        let date = ts.date();
        f.hour_of_day.push(ts.hour() as u8);
        f.day_of_week.push(ts.weekday().num_days_from_monday() as u8);
        f.year_position.push(year_position(ts));
        f.is_holiday.push(cal.is_holiday(date));
        f.is_winter_period.push(is_winter_period(date));
    }
    f
}

impl CalendarFeatures {
    pub fn len(&self) -> usize {
        self.hour_of_day.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hour_of_day.is_empty()
    }

    pub fn day_type(&self, i: usize) -> u8 {
        if self.is_holiday[i] {
            return HOLIDAY_DAY_TYPE;
        }
        match self.day_of_week[i] {
            0 => 0,
            1..=3 => 1,
            4 => 2,
            5 => 3,
            _ => 4,
        }
    }

    pub fn is_working_day(&self, i: usize) -> bool {
        self.day_of_week[i] < 5
    }
}

/// Weekday from the 0 = Monday convention.
pub fn weekday_from_index(i: u8) -> Weekday {
    Weekday::try_from(i % 7).unwrap_or(Weekday::Mon)
}

/// Parses `YYYY-MM-DD HH:MM[:SS]`, the `T`-separated variant, or either
/// followed by `Z`.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim().trim_end_matches('Z');
    const FORMATS: [&str; 5] = [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H",
    ];
    for fmt in FORMATS {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(ts);
        }
    }
    invalid(format!("unparseable timestamp `{s}`"))
}

pub fn format_timestamp(ts: NaiveDateTime) -> String {
    ts.format("%Y-%m-%dT%H:%M").to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    #[test]
    fn grid_arithmetic() {
        let g = build_hourly_grid(ts("2023-02-01T09:00"), 48).unwrap();
        assert_eq!(g.len(), 48);
        assert_eq!(g.end(), ts("2023-02-03T08:00"));
    }

    #[test]
    fn grid_spans_leap_day() {
        let g = build_hourly_grid(ts("2016-02-28T00:00"), 72).unwrap();
        assert!(g.iter().any(|t| t.date() == NaiveDate::from_ymd_opt(2016, 2, 29).unwrap()));
        assert_eq!(g.days_in_year(0), 366);
    }

    #[test]
    fn fixed_offset_grid_ignores_dst() {
        // Wall-clock oracle: skip 02:00 on the last Sunday of March.
        let start = ts("2023-03-25T00:00");
        let mut wall = Vec::new();
        let mut t = start;
        while wall.len() < 72 {
            if !(t.date() == NaiveDate::from_ymd_opt(2023, 3, 26).unwrap() && t.hour() == 2) {
                wall.push(t);
            }
            t += Duration::hours(1);
        }
        let g = build_hourly_grid(start, 72).unwrap();
        assert_eq!(g.len(), 72);
        assert!(g.index_of(ts("2023-03-26T02:00")).is_some());
        assert!(!wall.contains(&ts("2023-03-26T02:00")));
        assert_eq!(g.end(), ts("2023-03-27T23:00"));
        assert_eq!(*wall.last().unwrap(), ts("2023-03-28T00:00"));
    }

    #[test]
    fn rejects_unaligned_start() {
        assert!(build_hourly_grid(ts("2023-02-01T09:30"), 2).is_err());
        assert!(build_hourly_grid(ts("2023-02-01T09:00"), 0).is_err());
    }

    #[test]
    fn holiday_file_csv_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "country,date,label\nFR,2023-04-10,EasterMonday").unwrap();
        let cal = load_holiday_calendar(&p, "FR").unwrap();
        assert_eq!(cal.len(), 1);
        assert!(cal.is_holiday(NaiveDate::from_ymd_opt(2023, 4, 10).unwrap()));

        let pj = dir.path().join("h.json");
        std::fs::write(
            &pj,
            r#"[{"country":"DE","date":"2023-10-03","label":"Unity"},{"country":"DE","date":"2023-10-03","label":"Unity"}]"#,
        )
        .unwrap();
        let cals = load_holiday_calendars(&pj).unwrap();
        assert_eq!(cals["DE"].len(), 1);
    }

    #[test]
    fn bad_date_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "country,date,label\nFR,2023-04-10,A\nFR,2023-13-40,B\n").unwrap();
        match load_holiday_calendars(&p) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn winter_period_bounds() {
        let d = |m, d| NaiveDate::from_ymd_opt(2023, m, d).unwrap();
        assert!(is_winter_period(d(12, 25)));
        assert!(is_winter_period(d(12, 18)));
        assert!(is_winter_period(d(1, 6)));
        assert!(!is_winter_period(d(1, 7)));
        assert!(!is_winter_period(d(12, 17)));
    }

    #[test]
    fn features_examples() {
        let g = build_hourly_grid(ts("2023-07-02T12:00"), 1).unwrap();
        let f = calendar_features(&g, &HolidayCalendar::default());
        assert!((f.year_position[0] - 0.5).abs() < 0.01);
        // 2023-07-03 is a Monday
        let g = build_hourly_grid(ts("2023-07-03T00:00"), 1).unwrap();
        let f = calendar_features(&g, &HolidayCalendar::default());
        assert_eq!(f.hour_of_day[0], 0);
        assert_eq!(f.day_of_week[0], 0);
    }

    #[test]
    fn periodicities_and_monotone_year_position() {
        let g = build_hourly_grid(ts("2019-12-30T05:00"), 24 * 400).unwrap();
        let f = calendar_features(&g, &HolidayCalendar::default());
        for i in 0..g.len() - 168 {
            assert_eq!(f.hour_of_day[i], f.hour_of_day[i + 24]);
            assert_eq!(f.day_of_week[i], f.day_of_week[i + 168]);
        }
        for i in 1..g.len() {
            let same_year = g.timestamp(i).year() == g.timestamp(i - 1).year();
            if same_year {
                assert!(f.year_position[i] > f.year_position[i - 1]);
            } else {
                // continuous modulo 1 across the new year
                let gap = f.year_position[i] + 1.0 - f.year_position[i - 1];
                let prev_len = g.days_in_year(i - 1) as f64;
                assert!((gap - 1.0 / (24.0 * prev_len)).abs() < 1e-9);
            }
        }
        assert_eq!(f, calendar_features(&g, &HolidayCalendar::default()));
    }

    #[test]
    fn first_monday() {
        // 2023-02-01 is a Wednesday
        let g = build_hourly_grid(ts("2023-02-01T09:00"), 500).unwrap();
        let off = g.first_monday_offset();
        assert_eq!(g.timestamp(off), ts("2023-02-06T00:00"));
        let g = build_hourly_grid(ts("2023-02-06T00:00"), 5).unwrap();
        assert_eq!(g.first_monday_offset(), 0);
    }
}
