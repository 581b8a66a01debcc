//! Proper scoring rules and calibration tables for ensemble forecasts.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{QuantileGrid, TrajectoryEnsemble};
use crate::error::{invalid, Result};

/// Quantile (pinball) loss of `predicted` as the `q`-quantile.
pub fn pinball_loss(q: f64, predicted: f64, actual: f64) -> f64 {
    if actual >= predicted {
        q * (actual - predicted)
    } else {
        (1.0 - q) * (predicted - actual)
    }
}

/// Empirical CRPS: `(1/m)Σ|xᵢ − y| − (1/2m²)ΣΣ|xᵢ − xⱼ|`.
pub fn crps_ensemble(samples: &[f64], actual: f64) -> Result<f64> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    crps_sorted(&sorted, actual)
}

/// CRPS of an ascending sample in `O(m)`.
pub fn crps_sorted(sorted: &[f64], actual: f64) -> Result<f64> {
    let m = sorted.len();
    if m == 0 {
        return invalid("CRPS of an empty ensemble");
    }
    if sorted.iter().any(|v| !v.is_finite()) || !actual.is_finite() {
        return invalid("CRPS needs finite samples and outcome");
    }
    let mf = m as f64;
    let mut abs_err = 0.0;
    // Σ_{i<j} (x_j − x_i) = Σ_i x_(i)·(2i − m + 1) for 0-based ranks
    let mut spread = 0.0;
    for (i, x) in sorted.iter().enumerate() {
        abs_err += (x - actual).abs();
        spread += x * (2.0 * i as f64 - mf + 1.0);
    }
    Ok((abs_err / mf - spread / (mf * mf)).max(0.0))
}

/// Frequencies of `actual ≤ quantile` per group and probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    pub probabilities: Vec<f64>,
    pub groups: Vec<String>,
    /// `hits[g][p]`
    pub hits: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
}

impl CoverageTable {
    pub fn frequency(&self, group: usize, p: usize) -> f64 {
        if self.counts[group] == 0 {
            return f64::NAN;
        }
        self.hits[group][p] as f64 / self.counts[group] as f64
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == name)
    }

    /// Pools counts of `other` into `self`, adding unseen groups.
    pub fn absorb(&mut self, other: &CoverageTable) -> Result<()> {
        if self.probabilities != other.probabilities {
            return invalid("coverage tables use different probabilities");
        }
        for (gi, g) in other.groups.iter().enumerate() {
            let idx = match self.group_index(g) {
                Some(i) => i,
                None => {
                    self.groups.push(g.clone());
                    self.hits.push(vec![0; self.probabilities.len()]);
                    self.counts.push(0);
                    self.groups.len() - 1
                }
            };
            self.counts[idx] += other.counts[gi];
            for (h, o) in self.hits[idx].iter_mut().zip(&other.hits[gi]) {
                *h += o;
            }
        }
        Ok(())
    }

    /// Frequency over all groups pooled.
    pub fn pooled_frequency(&self, p: usize) -> f64 {
        let n: usize = self.counts.iter().sum();
        let h: usize = self.hits.iter().map(|row| row[p]).sum();
        h as f64 / n as f64
    }
}

/// Coverage of `grid` against `actuals[series][h]`, grouped by
/// `group(series, h)`. Groups appear in first-seen order.
pub fn coverage_table(
    grid: &QuantileGrid,
    actuals: &[Vec<f64>],
    group: impl Fn(usize, usize) -> String,
) -> Result<CoverageTable> {
    check_actuals(grid.series.len(), grid.horizon, actuals)?;
    let np = grid.probabilities.len();
    let mut table = CoverageTable {
        probabilities: grid.probabilities.clone(),
        groups: Vec::new(),
        hits: Vec::new(),
        counts: Vec::new(),
    };
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (j, row) in actuals.iter().enumerate() {
        for (h, y) in row.iter().enumerate() {
            let key = group(j, h);
            let g = *index.entry(key.clone()).or_insert_with(|| {
                table.groups.push(key);
                table.hits.push(vec![0; np]);
                table.counts.push(0);
                table.groups.len() - 1
            });
            table.counts[g] += 1;
            for p in 0..np {
                if *y <= grid.get(p, j, h) {
                    table.hits[g][p] += 1;
                }
            }
        }
    }
    Ok(table)
}

fn check_actuals(n_series: usize, horizon: usize, actuals: &[Vec<f64>]) -> Result<()> {
    if actuals.len() != n_series || actuals.iter().any(|a| a.len() != horizon) {
        return invalid(format!(
            "actuals must be {n_series} series × {horizon} steps"
        ));
    }
    Ok(())
}

/// Horizon-averaged scores of one ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub series: Vec<String>,
    /// Mean CRPS per series.
    pub crps: Vec<f64>,
    pub probabilities: Vec<f64>,
    /// `pinball[series][p]`, mean over the horizon.
    pub pinball: Vec<Vec<f64>>,
}

/// Scores an ensemble and its quantiles against `actuals[series][h]`.
pub fn score_forecast(ens: &TrajectoryEnsemble, grid: &QuantileGrid, actuals: &[Vec<f64>]) -> Result<ScoreReport> {
    check_actuals(ens.n_series(), ens.horizon(), actuals)?;
    if grid.series.len() != ens.n_series() || grid.horizon != ens.horizon() {
        return invalid("quantile grid does not match the ensemble");
    }
    let horizon = ens.horizon() as f64;
    let mut crps = Vec::with_capacity(ens.n_series());
    let mut pinball = Vec::with_capacity(ens.n_series());
    for (j, row) in actuals.iter().enumerate() {
        let mut total = 0.0;
        for (h, y) in row.iter().enumerate() {
            total += crps_ensemble(&ens.cell(j, h), *y)?;
        }
        crps.push(total / horizon);
        pinball.push(
            (0..grid.probabilities.len())
                .map(|p| {
                    row.iter()
                        .enumerate()
                        .map(|(h, y)| pinball_loss(grid.probabilities[p], grid.get(p, j, h), *y))
                        .sum::<f64>()
                        / horizon
                })
                .collect(),
        );
    }
    Ok(ScoreReport {
        series: ens.series().to_vec(),
        crps,
        probabilities: grid.probabilities.clone(),
        pinball,
    })
}

/// One tidy output row: `(model, country, group, metric, value)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub model: String,
    pub country: String,
    pub group: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_score_rows(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Tidy rows for a coverage table: metric `coverage_q<p>`.
pub fn coverage_rows(model: &str, country: &str, table: &CoverageTable) -> Vec<ScoreRow> {
    let mut rows = Vec::new();
    for (g, name) in table.groups.iter().enumerate() {
        for (p, q) in table.probabilities.iter().enumerate() {
            rows.push(ScoreRow {
                model: model.into(),
                country: country.into(),
                group: name.clone(),
                metric: format!("coverage_q{q}"),
                value: table.frequency(g, p),
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{ensemble_quantiles, quantile_sorted};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_crps(x: &[f64], y: f64) -> f64 {
        let m = x.len() as f64;
        let a: f64 = x.iter().map(|v| (v - y).abs()).sum::<f64>() / m;
        let b: f64 = x.iter().flat_map(|u| x.iter().map(move |v| (u - v).abs())).sum::<f64>();
        a - b / (2.0 * m * m)
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball_loss(0.5, 10.0, 14.0), 2.0);
        assert_eq!(pinball_loss(0.3, 5.0, 5.0), 0.0);
        assert_eq!(pinball_loss(0.9, 0.0, 10.0), 9.0);
    }

    #[test]
    fn crps_examples() {
        assert_eq!(crps_ensemble(&[3.0], 3.0).unwrap(), 0.0);
        assert_eq!(crps_ensemble(&[0.0, 2.0], 1.0).unwrap(), 0.5);
        assert!(crps_ensemble(&[], 1.0).is_err());
    }

    #[test]
    fn crps_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = rng.random_range(1..300);
            let x: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y = rng.random_range(-6.0..6.0);
            assert!((crps_ensemble(&x, y).unwrap() - brute_crps(&x, y)).abs() < 1e-10);
        }
    }

    #[test]
    fn coverage_examples() {
        let e = TrajectoryEnsemble::new(vec!["a".into()], 3, 336, (0..1008).map(|v| v as f64).collect()).unwrap();
        let g = ensemble_quantiles(&e, &[0.1, 0.5, 0.9]).unwrap();
        let low = vec![vec![-1e9; 336]];
        let t = coverage_table(&g, &low, |_, h| (h % 24).to_string()).unwrap();
        assert_eq!(t.groups.len(), 24);
        assert!(t.counts.iter().all(|c| *c == 14));
        for gi in 0..24 {
            for p in 0..3 {
                assert_eq!(t.frequency(gi, p), 1.0);
            }
        }
        assert!(coverage_table(&g, &[vec![0.0; 5]], |_, _| String::new()).is_err());
    }

    #[test]
    fn coverage_calibrated_for_exchangeable_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = 200;
        let cells = 10_000;
        let values: Vec<f64> = (0..m * cells).map(|_| rng.random::<f64>()).collect();
        let e = TrajectoryEnsemble::new(vec!["a".into()], m, cells, values).unwrap();
        let probs = crate::ensemble::default_probabilities();
        let g = ensemble_quantiles(&e, &probs).unwrap();
        let actual = vec![(0..cells).map(|_| rng.random::<f64>()).collect()];
        let t = coverage_table(&g, &actual, |_, _| "all".into()).unwrap();
        for (p, q) in probs.iter().enumerate() {
            assert!((t.frequency(0, p) - q).abs() < 0.03);
        }
    }

    #[test]
    fn dense_pinball_approximates_crps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
        for _ in 0..10 {
            let mut x: Vec<f64> = (0..400).map(|_| rng.random_range(0.0..10.0)).collect();
            x.sort_by(f64::total_cmp);
            let y = rng.random_range(0.0..10.0);
            let mean_pin = probs.iter().map(|q| pinball_loss(*q, quantile_sorted(&x, *q), y)).sum::<f64>() / 99.0;
            let c = crps_sorted(&x, y).unwrap();
            assert!((2.0 * mean_pin - c).abs() < 0.02 * c, "{} vs {c}", 2.0 * mean_pin);
        }
    }

    #[test]
    fn report_scores_and_absorb() {
        let e = TrajectoryEnsemble::new(vec!["a".into(), "b".into()], 2, 2, vec![0.0, 1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let g = ensemble_quantiles(&e, &[0.5]).unwrap();
        let actual = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let r = score_forecast(&e, &g, &actual).unwrap();
        let expect = (crps_ensemble(&[0.0, 2.0], 1.0).unwrap() + crps_ensemble(&[1.0, 3.0], 2.0).unwrap()) / 2.0;
        assert_eq!(r.crps[0], expect);
        assert!(r.pinball.iter().flatten().all(|v| *v >= 0.0));
        let mut t = coverage_table(&g, &actual, |j, _| format!("s{j}")).unwrap();
        let copy = t.clone();
        t.absorb(&copy).unwrap();
        assert_eq!(t.counts, vec![4, 4]);
        assert_eq!(t.frequency(0, 0), copy.frequency(0, 0));
    }

    proptest! {
        #[test]
        fn pinball_symmetry(q in 0.01f64..0.99, a in -100.0f64..100.0, b in -100.0f64..100.0) {
            prop_assert!((pinball_loss(q, a, b) - pinball_loss(1.0 - q, b, a)).abs() < 1e-12);
            prop_assert!(pinball_loss(q, a, b) >= 0.0);
        }

        #[test]
        fn crps_permutation_and_translation(x in proptest::collection::vec(-50.0f64..50.0, 1..60), y in -60.0f64..60.0, c in -20.0f64..20.0) {
            let base = crps_ensemble(&x, y).unwrap();
            let mut rev = x.clone();
            rev.reverse();
            prop_assert!((crps_ensemble(&rev, y).unwrap() - base).abs() < 1e-9);
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            prop_assert!((crps_ensemble(&shifted, y + c).unwrap() - base).abs() < 1e-9);
            prop_assert!(base >= 0.0);
        }
    }
}
