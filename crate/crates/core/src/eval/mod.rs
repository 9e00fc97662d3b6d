//! Factor metrics (R², IC*, RankIC*, IR*), correlation-filtered factor
//! pools, and the top-k investment simulation.

mod backtest;
pub mod oracle;
mod report;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::market::DailyPanel;
use crate::par;

pub use backtest::{backtest, combine_scores, BacktestDay, BacktestReport};
pub use report::{evaluate_factor, FactorMetrics};

/// Cross-sections with fewer stocks than this are skipped.
pub const MIN_STOCKS: usize = 3;
/// Standard deviations at or below this (relative to the series scale) are
/// treated as zero.
pub const DEGENERATE_SD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn pop_sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

fn degenerate(x: &[f64]) -> bool {
    let sd = pop_sd(x);
    !(sd > DEGENERATE_SD * mean(x).abs().max(1.0))
}

/// Pearson correlation, `None` when either side is constant or shorter than
/// two.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 || degenerate(a) || degenerate(b) {
        return None;
    }
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties receive the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn r_squared(y: &[f64], yhat: &[f64]) -> Result<f64, MetricError> {
    if y.len() != yhat.len() {
        return Err(MetricError::Length(y.len(), yhat.len()));
    }
    if y.len() < 2 {
        return Err(MetricError::Undefined("R² needs at least two points"));
    }
    let m = mean(y);
    let ss_tot: f64 = y.iter().map(|v| (v - m) * (v - m)).sum();
    if degenerate(y) {
        return Err(MetricError::Undefined("R² with constant target"));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Daily metric values with their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub daily: Vec<(NaiveDate, f64)>,
    pub mean: f64,
    pub sd: f64,
}

impl MetricSeries {
    pub fn values(&self) -> Vec<f64> {
        self.daily.iter().map(|(_, v)| *v).collect()
    }
}

/// Per day, the matched `(factor, target)` cross-section over tickers present
/// in both panels.
pub fn align(factor: &DailyPanel, target: &DailyPanel) -> BTreeMap<NaiveDate, (Vec<f64>, Vec<f64>)> {
    let mut out = BTreeMap::new();
    for (day, fs) in factor {
        let Some(ts) = target.get(day) else { continue };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (ticker, f) in fs {
            if let Some(t) = ts.get(ticker) {
                a.push(*f);
                b.push(*t);
            }
        }
        if !a.is_empty() {
            out.insert(*day, (a, b));
        }
    }
    out
}

fn daily_series(
    factor: &DailyPanel,
    target: &DailyPanel,
    corr: impl Fn(&[f64], &[f64]) -> Option<f64> + Sync,
) -> Result<MetricSeries, MetricError> {
    let days: Vec<_> = align(factor, target).into_iter().collect();
    let vals = par::map(&days, |(_, (a, b))| if a.len() < MIN_STOCKS { None } else { corr(a, b) });
    let daily: Vec<(NaiveDate, f64)> =
        days.iter().zip(vals).filter_map(|((d, _), v)| v.map(|v| (*d, v))).collect();
    if daily.is_empty() {
        return Err(MetricError::Undefined("no non-degenerate day"));
    }
    let v: Vec<f64> = daily.iter().map(|(_, x)| *x).collect();
    Ok(MetricSeries { mean: mean(&v), sd: pop_sd(&v), daily })
}

/// Daily cross-sectional Pearson correlation between factor and next-day RV;
/// IC* is the series mean.
pub fn ic_star(factor: &DailyPanel, rv_next: &DailyPanel) -> Result<MetricSeries, MetricError> {
    daily_series(factor, rv_next, pearson)
}

/// As [`ic_star`] on within-day average ranks.
pub fn rank_ic_star(factor: &DailyPanel, rv_next: &DailyPanel) -> Result<MetricSeries, MetricError> {
    daily_series(factor, rv_next, |a, b| pearson(&average_ranks(a), &average_ranks(b)))
}

/// Mean over population standard deviation of the daily IC series.
pub fn ir_star(series: &MetricSeries) -> Result<f64, MetricError> {
    let v = series.values();
    if v.len() < 2 {
        return Err(MetricError::Undefined("IR* needs at least two days"));
    }
    let sd = pop_sd(&v);
    if sd <= DEGENERATE_SD {
        return Err(MetricError::Undefined("IR* with constant IC series"));
    }
    Ok(mean(&v) / sd)
}

/// Pearson correlation of two factors over their common `(day, ticker)`
/// cells.
pub fn panel_correlation(a: &DailyPanel, b: &DailyPanel) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = align(a, b).into_values().fold((vec![], vec![]), |(mut x, mut y), (p, q)| {
        x.extend(p);
        y.extend(q);
        (x, y)
    });
    pearson(&x, &y)
}

/// A mined factor entering the pool filter.
#[derive(Debug, Clone)]
pub struct PoolCandidate {
    pub ic: f64,
    pub values: DailyPanel,
}

/// Greedy filter: by descending `|IC*|`, admit a factor iff its absolute
/// correlation with every admitted factor is at most `threshold`; stop at
/// `cap`. Returns admitted indices in admission order. Pairs without a defined
/// correlation count as uncorrelated.
pub fn filter_pool(cands: &[PoolCandidate], threshold: f64, cap: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&i, &j| cands[j].ic.abs().total_cmp(&cands[i].ic.abs()).then(i.cmp(&j)));
    let mut admitted: Vec<usize> = Vec::new();
    for i in order {
        if admitted.len() >= cap {
            break;
        }
        let ok = admitted
            .iter()
            .all(|&j| panel_correlation(&cands[i].values, &cands[j].values).is_none_or(|c| c.abs() <= threshold));
        if ok {
            admitted.push(i);
        }
    }
    admitted
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn panel(days: &[&[(&str, f64)]]) -> DailyPanel {
        days.iter()
            .enumerate()
            .map(|(i, row)| {
                let d = NaiveDate::from_ymd_opt(2024, 3, 1 + i as u32).unwrap();
                (d, row.iter().map(|(t, v)| (t.to_string(), *v)).collect())
            })
            .collect()
    }

    #[test]
    fn r_squared_examples() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert!(r_squared(&y, &[2.0; 3]).unwrap().abs() < 1e-15);
        assert!((r_squared(&y, &[1.0, 2.0, 4.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(r_squared(&[1.0; 3], &y).is_err());
    }

    #[test]
    fn ic_signs() {
        let rv = panel(&[&[("a", 1.0), ("b", 2.0), ("c", 4.0)], &[("a", 3.0), ("b", 1.0), ("c", 2.0)]]);
        assert!((ic_star(&rv, &rv).unwrap().mean - 1.0).abs() < 1e-12);
        let neg: DailyPanel =
            rv.iter().map(|(d, m)| (*d, m.iter().map(|(t, v)| (t.clone(), -v)).collect())).collect();
        assert!((ic_star(&neg, &rv).unwrap().mean + 1.0).abs() < 1e-12);
        let cube: DailyPanel =
            rv.iter().map(|(d, m)| (*d, m.iter().map(|(t, v)| (t.clone(), v.powi(3) + 7.0)).collect())).collect();
        assert!((rank_ic_star(&cube, &rv).unwrap().mean - 1.0).abs() < 1e-12);
        assert!((rank_ic_star(&neg, &rv).unwrap().mean + 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_ties() {
        assert_eq!(average_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        let f = panel(&[&[("a", 1.0), ("b", 1.0), ("c", 2.0)]]);
        let r = panel(&[&[("a", 1.0), ("b", 2.0), ("c", 3.0)]]);
        let v = rank_ic_star(&f, &r).unwrap().mean;
        assert!((v - 3f64.sqrt() / 2.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn small_and_flat_days_are_skipped() {
        let f = panel(&[&[("a", 1.0), ("b", 2.0)], &[("a", 5.0), ("b", 5.0), ("c", 5.0)]]);
        let r = panel(&[&[("a", 1.0), ("b", 2.0)], &[("a", 1.0), ("b", 2.0), ("c", 3.0)]]);
        assert!(ic_star(&f, &r).is_err());
    }

    #[test]
    fn ir_examples() {
        let d = |i| NaiveDate::from_ymd_opt(2024, 1, i).unwrap();
        let s = MetricSeries { daily: vec![(d(1), 0.1), (d(2), 0.3)], mean: 0.2, sd: 0.1 };
        assert!((ir_star(&s).unwrap() - 2.0).abs() < 1e-12);
        let neg = MetricSeries { daily: vec![(d(1), -0.1), (d(2), -0.3)], mean: -0.2, sd: 0.1 };
        assert!((ir_star(&neg).unwrap() + 2.0).abs() < 1e-12);
        let flat = MetricSeries { daily: vec![(d(1), 0.2), (d(2), 0.2)], mean: 0.2, sd: 0.0 };
        assert!(ir_star(&flat).is_err());
    }

    fn cand(ic: f64, vals: &[f64]) -> PoolCandidate {
        let row: Vec<(String, f64)> = vals.iter().enumerate().map(|(i, v)| (format!("s{i}"), *v)).collect();
        let d = NaiveDate::from_ymd_opt(2024, 1, 2).unwrap();
        PoolCandidate { ic, values: [(d, row.into_iter().collect())].into_iter().collect() }
    }

    #[test]
    fn pool_filter_examples() {
        let a = cand(0.2, &[1.0, 2.0, 3.0, 4.0]);
        let b = cand(-0.5, &[2.0, 4.0, 6.0, 8.0]);
        assert_eq!(filter_pool(&[a.clone(), b], 0.7, 10), vec![1]);
        // correlation 0.5 between these two
        let c = cand(0.1, &[1.0, 0.0, 0.0, 1.0, 1.0]);
        let d = cand(0.3, &[1.0, 0.0, 1.0, 0.0, 1.0]);
        let corr = panel_correlation(&c.values, &d.values).unwrap();
        assert!(corr.abs() <= 0.7);
        assert_eq!(filter_pool(&[c, d], 0.7, 10), vec![1, 0]);
        // rows 1..=12 of a 16x16 Hadamard matrix are pairwise uncorrelated
        let many: Vec<_> = (1..=12u32)
            .map(|i| {
                let row: Vec<f64> = (0..16u32).map(|j| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 }).collect();
                cand(i as f64 / 100.0, &row)
            })
            .collect();
        assert_eq!(filter_pool(&many, 0.7, 10).len(), 10);
    }
}
