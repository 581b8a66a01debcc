//! Panel ingestion: CSV parsing, DST normalization, gap filling, and
//! single-observation outlier repair.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::timebase::{format_timestamp, parse_timestamp, TimeGrid};

/// Gaps up to this many consecutive hours are interpolated; longer ones are rejected.
pub const MAX_INTERPOLATED_GAP: usize = 6;

/// Aligned multi-series hourly panel (load in GW or temperature in °C).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyPanel {
    pub grid: TimeGrid,
    pub series_names: Vec<String>,
    /// One column per series, each of grid length.
    pub values: Vec<Vec<f64>>,
    pub missing_mask: Vec<Vec<bool>>,
}

impl HourlyPanel {
    pub fn new(grid: TimeGrid, series_names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if series_names.len() != values.len() {
            return invalid("series name count differs from column count");
        }
        if let Some(c) = values.iter().find(|c| c.len() != grid.len()) {
            return invalid(format!(
                "column of length {} on a grid of {} hours",
                c.len(),
                grid.len()
            ));
        }
        let missing_mask = values.iter().map(|c| vec![false; c.len()]).collect();
        Ok(Self {
            grid,
            series_names,
            values,
            missing_mask,
        })
    }

    pub fn n_series(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn series(&self, name: &str) -> Option<&[f64]> {
        self.series_names
            .iter()
            .position(|n| n == name)
            .map(|i| self.values[i].as_slice())
    }

    /// Rows `from..from+len` as a new panel.
    pub fn window(&self, from: usize, len: usize) -> Result<HourlyPanel> {
        let grid = self.grid.slice(from, len)?;
        Ok(HourlyPanel {
            grid,
            series_names: self.series_names.clone(),
            values: self
                .values
                .iter()
                .map(|c| c[from..from + len].to_vec())
                .collect(),
            missing_mask: self
                .missing_mask
                .iter()
                .map(|c| c[from..from + len].to_vec())
                .collect(),
        })
    }

    /// Keeps only the named series, in the given order.
    pub fn select(&self, names: &[String]) -> Result<HourlyPanel> {
        let mut values = Vec::with_capacity(names.len());
        let mut mask = Vec::with_capacity(names.len());
        for n in names {
            let i = self
                .series_names
                .iter()
                .position(|s| s == n)
                .ok_or_else(|| Error::InvalidInput(format!("series `{n}` not in panel")))?;
            values.push(self.values[i].clone());
            mask.push(self.missing_mask[i].clone());
        }
        Ok(HourlyPanel {
            grid: self.grid,
            series_names: names.to_vec(),
            values,
            missing_mask: mask,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.series_names.iter().cloned());
        w.write_record(&header)?;
        for (t, ts) in self.grid.iter().enumerate() {
            let mut rec = vec![format_timestamp(ts)];
            rec.extend(self.values.iter().map(|c| c[t].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Column selection for [`read_panel_csv`].
#[derive(Debug, Clone)]
pub struct PanelSchema {
    pub timestamp_column: String,
    /// `(column in file, series name)`; `None` takes every non-timestamp column.
    pub series: Option<Vec<(String, String)>>,
}

impl Default for PanelSchema {
    fn default() -> Self {
        Self {
            timestamp_column: "timestamp".into(),
            series: None,
        }
    }
}

/// Reads a `timestamp,<series...>` CSV file onto an hourly grid.
///
/// A timestamp seen twice (the repeated autumn DST hour) is averaged; three or
/// more occurrences are rejected. Missing stretches of at most six hours are
/// linearly interpolated; longer ones are rejected.
pub fn read_panel_csv(path: &Path, schema: &PanelSchema) -> Result<HourlyPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let ts_col = headers
        .iter()
        .position(|h| h == schema.timestamp_column)
        .ok_or_else(|| {
            Error::InvalidInput(format!("no `{}` column", schema.timestamp_column))
        })?;
    let columns: Vec<(usize, String)> = match &schema.series {
        Some(map) => map
            .iter()
            .map(|(src, name)| {
                headers
                    .iter()
                    .position(|h| h == src)
                    .map(|i| (i, name.clone()))
                    .ok_or_else(|| Error::InvalidInput(format!("no `{src}` column")))
            })
            .collect::<Result<_>>()?,
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != ts_col)
            .map(|(i, h)| (i, h.to_string()))
            .collect(),
    };
    if columns.is_empty() {
        return invalid("panel file has no series columns");
    }

    // timestamp -> (occurrences, per-series sums and counts)
    let mut rows: BTreeMap<NaiveDateTime, (usize, Vec<(f64, usize)>)> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let raw_ts = rec.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(raw_ts).map_err(|e| Error::Parse {
            row: i + 1,
            message: e.to_string(),
        })?;
        let entry = rows
            .entry(ts)
            .or_insert_with(|| (0, vec![(0.0, 0); columns.len()]));
        entry.0 += 1;
        if entry.0 > 2 {
            return Err(Error::Parse {
                row: i + 1,
                message: format!("timestamp {raw_ts} occurs more than twice"),
            });
        }
        for (j, (col, _)) in columns.iter().enumerate() {
            let cell = rec.get(*col).unwrap_or("").trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan") {
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: i + 1,
                message: format!("non-numeric value `{cell}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("non-finite value `{cell}`"),
                });
            }
            entry.1[j].0 += v;
            entry.1[j].1 += 1;
        }
    }
    let (first, last) = match (rows.keys().next(), rows.keys().next_back()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => return invalid("panel file has no rows"),
    };
    let hours = last.signed_duration_since(first).num_hours() as usize + 1;
    let grid = TimeGrid::new(first, hours)?;
    let names: Vec<String> = columns.iter().map(|(_, n)| n.clone()).collect();
    let mut values = vec![vec![f64::NAN; hours]; names.len()];
    let mut mask = vec![vec![true; hours]; names.len()];
    for (ts, (_, cells)) in &rows {
        let t = grid.index_of(*ts).ok_or_else(|| {
            Error::InvalidInput(format!("timestamp {ts} is not on the hourly grid"))
        })?;
        for (j, (sum, count)) in cells.iter().enumerate() {
            if *count > 0 {
                values[j][t] = sum / *count as f64;
                mask[j][t] = false;
            }
        }
    }
    for (j, name) in names.iter().enumerate() {
        fill_gaps(&mut values[j], &mask[j], name, &grid)?;
    }
    let missing_mask = mask.iter().map(|c| vec![false; c.len()]).collect();
    Ok(HourlyPanel {
        grid,
        series_names: names,
        values,
        missing_mask,
    })
}

fn fill_gaps(col: &mut [f64], missing: &[bool], name: &str, grid: &TimeGrid) -> Result<()> {
    let n = col.len();
    let mut t = 0;
    while t < n {
        if !missing[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && missing[t] {
            t += 1;
        }
        let len = t - start;
        if len > MAX_INTERPOLATED_GAP || len == n {
            return Err(Error::Gap {
                series: name.to_string(),
                from: format_timestamp(grid.timestamp(start)),
                to: format_timestamp(grid.timestamp(t - 1)),
                hours: len,
            });
        }
        match (start.checked_sub(1), (t < n).then_some(t)) {
            (Some(a), Some(b)) => {
                let (va, vb) = (col[a], col[b]);
                for k in start..t {
                    let w = (k - a) as f64 / (b - a) as f64;
                    col[k] = va + w * (vb - va);
                }
            }
            (Some(a), None) => {
                let v = col[a];
                col[start..t].fill(v)
            }
            (None, Some(b)) => {
                let v = col[b];
                col[start..t].fill(v)
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(())
}

/// Averages groups of station columns into one column per group (e.g. the
/// populous cities of a country).
pub fn average_stations(
    panel: &HourlyPanel,
    groups: &BTreeMap<String, Vec<String>>,
) -> Result<HourlyPanel> {
    let mut names = Vec::new();
    let mut values = Vec::new();
    for (group, members) in groups {
        if members.is_empty() {
            return invalid(format!("station group `{group}` is empty"));
        }
        let cols: Vec<&[f64]> = members
            .iter()
            .map(|m| {
                panel
                    .series(m)
                    .ok_or_else(|| Error::InvalidInput(format!("station `{m}` not in panel")))
            })
            .collect::<Result<_>>()?;
        let k = cols.len() as f64;
        values.push(
            (0..panel.len())
                .map(|t| cols.iter().map(|c| c[t]).sum::<f64>() / k)
                .collect(),
        );
        names.push(group.clone());
    }
    HourlyPanel::new(panel.grid, names, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierFlag {
    pub timestamp: NaiveDateTime,
    pub series: String,
    pub original: f64,
    pub replacement: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub flagged: Vec<OutlierFlag>,
}

impl OutlierReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["timestamp", "series", "original", "replacement"])?;
        for f in &self.flagged {
            w.write_record([
                format_timestamp(f.timestamp),
                f.series.clone(),
                f.original.to_string(),
                f.replacement.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const DEFAULT_MEDIAN_WINDOW: usize = 169;
pub const DEFAULT_THRESHOLD_MULTIPLIER: f64 = 8.0;

fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, m, _) = v.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *m;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Centered running median whose window shrinks symmetrically at the edges.
pub fn running_median(y: &[f64], window: usize) -> Vec<f64> {
    let n = y.len();
    let half = window / 2;
    let mut buf = Vec::with_capacity(window);
    (0..n)
        .map(|t| {
            let h = half.min(t).min(n - 1 - t);
            buf.clear();
            buf.extend_from_slice(&y[t - h..=t + h]);
            median_in_place(&mut buf)
        })
        .collect()
}

/// Per-series repair of single outliers.
///
/// Load is regressed on its running median (intercept and slope by least
/// squares); the observation dummies of a Lasso with the baseline held fixed
/// are the soft-thresholded residuals at `threshold_multiplier * MAD`. Points
/// with a nonzero dummy are replaced by the fitted baseline.
pub fn adjust_outliers(
    panel: &HourlyPanel,
    window_hours: usize,
    threshold_multiplier: f64,
) -> Result<(HourlyPanel, OutlierReport)> {
    if window_hours < 3 || window_hours % 2 == 0 {
        return invalid(format!("running-median window {window_hours} must be odd and ≥ 3"));
    }
    if panel.len() <= window_hours {
        return invalid(format!(
            "series of {} hours is not longer than the {window_hours}-hour window",
            panel.len()
        ));
    }
    if !(threshold_multiplier > 0.0) {
        return invalid("threshold multiplier must be positive");
    }
    let results: Vec<(Vec<f64>, Vec<(usize, f64, f64)>)> = panel
        .values
        .par_iter()
        .map(|y| adjust_series(y, window_hours, threshold_multiplier))
        .collect();
    let mut out = panel.clone();
    let mut report = OutlierReport::default();
    for (j, (col, flags)) in results.into_iter().enumerate() {
        out.values[j] = col;
        for (t, original, replacement) in flags {
            report.flagged.push(OutlierFlag {
                timestamp: panel.grid.timestamp(t),
                series: panel.series_names[j].clone(),
                original,
                replacement,
            });
        }
    }
    report
        .flagged
        .sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.series.cmp(&b.series)));
    Ok((out, report))
}

fn adjust_series(y: &[f64], window: usize, mult: f64) -> (Vec<f64>, Vec<(usize, f64, f64)>) {
    let n = y.len() as f64;
    let m = running_median(y, window);
    let mean_m = m.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let sxx: f64 = m.iter().map(|v| (v - mean_m).powi(2)).sum();
    let sxy: f64 = m.iter().zip(y).map(|(a, b)| (a - mean_m) * (b - mean_y)).sum();
    let scale = y.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    let slope = if sxx > 1e-12 * n * scale * scale {
        sxy / sxx
    } else {
        0.0
    };
    let intercept = mean_y - slope * mean_m;
    let baseline: Vec<f64> = m.iter().map(|v| intercept + slope * v).collect();
    let resid: Vec<f64> = y.iter().zip(&baseline).map(|(a, b)| a - b).collect();
    let mut tmp = resid.clone();
    let med = median_in_place(&mut tmp);
    let mut dev: Vec<f64> = resid.iter().map(|r| (r - med).abs()).collect();
    let mad = median_in_place(&mut dev);
    let mut out = y.to_vec();
    let mut flags = Vec::new();
    if mad <= 0.0 {
        return (out, flags);
    }
    let lambda = mult * mad;
    for (t, r) in resid.iter().enumerate() {
        // soft-thresholded observation dummy is nonzero exactly when |r| > λ
        let dummy = r.signum() * (r.abs() - lambda).max(0.0);
        if dummy != 0.0 {
            out[t] = baseline[t];
            flags.push((t, y[t], baseline[t]));
        }
    }
    (out, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn ts(s: &str) -> NaiveDateTime {
        parse_timestamp(s).unwrap()
    }

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("panel.csv");
        std::fs::write(&p, body).unwrap();
        p
    }

    fn csv_body(hours: usize, skip: &[usize]) -> String {
        let g = TimeGrid::new(ts("2023-01-02T00:00"), hours).unwrap();
        let mut s = String::from("timestamp,FR,DE\n");
        for (t, stamp) in g.iter().enumerate() {
            let fr = if skip.contains(&t) { String::new() } else { format!("{}", t as f64) };
            s.push_str(&format!("{},{},{}\n", format_timestamp(stamp), fr, 2.0 * t as f64));
        }
        s
    }

    #[test]
    fn reads_full_panel() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, &csv_body(48, &[]));
        let panel = read_panel_csv(&p, &PanelSchema::default()).unwrap();
        assert_eq!(panel.len(), 48);
        assert_eq!(panel.n_series(), 2);
        assert!(panel.missing_mask.iter().flatten().all(|m| !m));
    }

    #[test]
    fn interpolates_short_gap() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = csv_body(48, &[10, 11, 12]);
        // replace the linear values around the gap to make interpolation visible
        body = body.replace(",9,18\n", ",100,18\n").replace(",13,26\n", ",200,26\n");
        let p = write(&dir, &body);
        let panel = read_panel_csv(&p, &PanelSchema::default()).unwrap();
        let fr = panel.series("FR").unwrap();
        for (k, t) in (10..=12).enumerate() {
            let expect = 100.0 + (k + 1) as f64 * 25.0;
            assert!((fr[t] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_long_gap() {
        let dir = tempfile::tempdir().unwrap();
        let skip: Vec<usize> = (10..20).collect();
        let p = write(&dir, &csv_body(48, &skip));
        match read_panel_csv(&p, &PanelSchema::default()) {
            Err(Error::Gap { hours, .. }) => assert_eq!(hours, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_rows_are_gaps_and_dst_duplicates_average() {
        let dir = tempfile::tempdir().unwrap();
        let body = "timestamp,FR\n2023-10-29T01:00,1\n2023-10-29T02:00,2\n2023-10-29T02:00,4\n2023-10-29T04:00,5\n";
        let p = write(&dir, body);
        let panel = read_panel_csv(&p, &PanelSchema::default()).unwrap();
        assert_eq!(panel.values[0], vec![1.0, 3.0, 4.0, 5.0]);
        let body = "timestamp,FR\n2023-10-29T02:00,2\n2023-10-29T02:00,4\n2023-10-29T02:00,4\n";
        let p = write(&dir, body);
        assert!(read_panel_csv(&p, &PanelSchema::default()).is_err());
    }

    fn panel_of(y: Vec<f64>) -> HourlyPanel {
        let g = TimeGrid::new(ts("2023-01-02T00:00"), y.len()).unwrap();
        HourlyPanel::new(g, vec!["FR".into()], vec![y]).unwrap()
    }

    fn sinusoid(n: usize) -> Vec<f64> {
        (0..n)
            .map(|t| 50.0 + 8.0 * (2.0 * PI * t as f64 / 24.0).sin() + 3.0 * (2.0 * PI * t as f64 / 168.0).cos())
            .collect()
    }

    #[test]
    fn clean_series_unchanged() {
        let p = panel_of(sinusoid(24 * 60));
        let (out, rep) = adjust_outliers(&p, DEFAULT_MEDIAN_WINDOW, DEFAULT_THRESHOLD_MULTIPLIER).unwrap();
        assert!(rep.flagged.is_empty());
        assert_eq!(out, p);
    }

    #[test]
    fn spike_is_flagged_and_replaced() {
        let mut y = sinusoid(24 * 60);
        let spike_at = 700;
        let local = running_median(&y, DEFAULT_MEDIAN_WINDOW)[spike_at];
        y[spike_at] = 10.0 * local;
        let p = panel_of(y.clone());
        let (out, rep) = adjust_outliers(&p, DEFAULT_MEDIAN_WINDOW, DEFAULT_THRESHOLD_MULTIPLIER).unwrap();
        // independent rule: |y - fit| > λ computed from scratch
        let m = running_median(&y, DEFAULT_MEDIAN_WINDOW);
        let n = y.len() as f64;
        let (mx, my) = (m.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let b = m.iter().zip(&y).map(|(a, c)| (a - mx) * (c - my)).sum::<f64>()
            / m.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
        let r: Vec<f64> = y.iter().zip(&m).map(|(c, a)| c - (my - b * mx) - b * a).collect();
        let mut s = r.clone();
        s.sort_by(f64::total_cmp);
        let med = 0.5 * (s[s.len() / 2 - 1] + s[s.len() / 2]);
        let mut d: Vec<f64> = r.iter().map(|v| (v - med).abs()).collect();
        d.sort_by(f64::total_cmp);
        let mad = 0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2]);
        let expected: Vec<usize> = (0..y.len()).filter(|&t| r[t].abs() > 8.0 * mad).collect();
        assert_eq!(expected, vec![spike_at]);
        assert_eq!(rep.flagged.len(), 1);
        assert_eq!(rep.flagged[0].timestamp, p.grid.timestamp(spike_at));
        assert!((out.values[0][spike_at] - local).abs() < 0.05 * local);
        for t in (0..y.len()).filter(|&t| t != spike_at) {
            assert_eq!(out.values[0][t].to_bits(), y[t].to_bits());
        }
        let (again, rep2) = adjust_outliers(&out, DEFAULT_MEDIAN_WINDOW, DEFAULT_THRESHOLD_MULTIPLIER).unwrap();
        assert!(rep2.flagged.is_empty());
        assert_eq!(again, out);
    }

    #[test]
    fn constant_series_zero_mad() {
        let p = panel_of(vec![3.0; 400]);
        let (out, rep) = adjust_outliers(&p, 169, 8.0).unwrap();
        assert!(rep.flagged.is_empty());
        assert_eq!(out, p);
    }

    #[test]
    fn window_preconditions() {
        let p = panel_of(vec![3.0; 100]);
        assert!(adjust_outliers(&p, 4, 8.0).is_err());
        assert!(adjust_outliers(&p, 169, 8.0).is_err());
    }

    #[test]
    fn running_median_shrinks_at_edges() {
        let y = vec![5.0, 1.0, 2.0, 3.0, 100.0];
        let m = running_median(&y, 5);
        assert_eq!(m, vec![5.0, 2.0, 3.0, 3.0, 100.0]);
    }

    #[test]
    fn station_average() {
        let g = TimeGrid::new(ts("2023-01-02T00:00"), 2).unwrap();
        let p = HourlyPanel::new(
            g,
            vec!["paris".into(), "lyon".into()],
            vec![vec![1.0, 2.0], vec![3.0, 6.0]],
        )
        .unwrap();
        let mut groups = BTreeMap::new();
        groups.insert("FR".to_string(), vec!["paris".to_string(), "lyon".to_string()]);
        let avg = average_stations(&p, &groups).unwrap();
        assert_eq!(avg.values[0], vec![2.0, 4.0]);
    }
}
