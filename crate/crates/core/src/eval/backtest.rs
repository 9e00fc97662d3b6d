use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::market::DailyPanel;

/// `a(s) = Σ_n w(n) V(s, n)` per day. A stock is scored on a day only if
/// every factor has a value for it.
pub fn combine_scores(factors: &[(f64, &DailyPanel)]) -> DailyPanel {
    let Some((_, first)) = factors.first() else { return DailyPanel::new() };
    let mut out = DailyPanel::new();
    for (day, stocks) in first.iter() {
        let mut row = BTreeMap::new();
        'stock: for ticker in stocks.keys() {
            let mut a = 0.0;
            for (w, panel) in factors {
                match panel.get(day).and_then(|m| m.get(ticker)) {
                    Some(v) => a += w * v,
                    None => continue 'stock,
                }
            }
            row.insert(ticker.clone(), a);
        }
        if !row.is_empty() {
            out.insert(*day, row);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestDay {
    pub date: NaiveDate,
    pub holdings: Vec<String>,
    /// Net of turnover cost.
    pub ret: f64,
    pub turnover: f64,
    pub nav: f64,
    /// Fewer than `k` stocks were scorable.
    pub short: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub days: Vec<BacktestDay>,
    /// Every score was identical on every day, so holdings came from the
    /// ticker tie-break alone.
    pub degenerate: bool,
}

impl BacktestReport {
    pub fn final_nav(&self) -> f64 {
        self.days.last().map_or(1.0, |d| d.nav)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "return", "nav"])?;
        for d in &self.days {
            w.write_record([d.date.to_string(), format!("{:e}", d.ret), format!("{:e}", d.nav)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Each day holds the `k` highest-scoring stocks (ties broken by ticker)
/// equal-weighted for one day. The day's return is the members' mean
/// forward return minus `cost × Σ|Δweight|`; the first day's entry counts as
/// full turnover.
pub fn backtest(scores: &DailyPanel, fwd_returns: &DailyPanel, k: usize, cost: f64) -> BacktestReport {
    assert!(k >= 1);
    let mut days = Vec::new();
    let mut nav = 1.0;
    let mut prev: BTreeMap<String, f64> = BTreeMap::new();
    let mut degenerate = true;
    for (day, row) in scores {
        let Some(rets) = fwd_returns.get(day) else { continue };
        let mut cands: Vec<(&String, f64)> =
            row.iter().filter(|(t, _)| rets.contains_key(*t)).map(|(t, v)| (t, *v)).collect();
        if cands.is_empty() {
            continue;
        }
        if cands.iter().any(|(_, v)| *v != cands[0].1) {
            degenerate = false;
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let take = k.min(cands.len());
        let held: Vec<String> = cands[..take].iter().map(|(t, _)| (*t).clone()).collect();
        let w = 1.0 / take as f64;
        let weights: BTreeMap<String, f64> = held.iter().map(|t| (t.clone(), w)).collect();
        let turnover: f64 = weights
            .keys()
            .chain(prev.keys())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .map(|t| (weights.get(t).unwrap_or(&0.0) - prev.get(t).unwrap_or(&0.0)).abs())
            .sum();
        let gross = held.iter().map(|t| rets[t]).sum::<f64>() / take as f64;
        let ret = gross - cost * turnover;
        nav *= 1.0 + ret;
        days.push(BacktestDay { date: *day, holdings: held, ret, turnover, nav, short: take < k });
        prev = weights;
    }
    BacktestReport { days, degenerate }
}
