use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{align, ic_star, ir_star, r_squared, rank_ic_star};
use crate::market::DailyPanel;

/// Metric summary of one factor. Undefined metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMetrics {
    #[serde(rename = "IC*")]
    pub ic: Option<f64>,
    #[serde(rename = "RankIC*")]
    pub rank_ic: Option<f64>,
    #[serde(rename = "IR*")]
    pub ir: Option<f64>,
    /// Factor values taken as predictions of next-day RV, pooled over all
    /// aligned stock-days.
    #[serde(rename = "R2")]
    pub r2: Option<f64>,
    pub daily_ic: Vec<(NaiveDate, f64)>,
}

pub fn evaluate_factor(values: &DailyPanel, rv_next: &DailyPanel) -> FactorMetrics {
    let ic = ic_star(values, rv_next).ok();
    let rank_ic = rank_ic_star(values, rv_next).ok().map(|s| s.mean);
    let ir = ic.as_ref().and_then(|s| ir_star(s).ok());
    let (yhat, y): (Vec<f64>, Vec<f64>) = align(values, rv_next).into_values().fold(
        (Vec::new(), Vec::new()),
        |(mut a, mut b), (p, q)| {
            a.extend(p);
            b.extend(q);
            (a, b)
        },
    );
    let r2 = r_squared(&y, &yhat).ok();
    FactorMetrics {
        ic: ic.as_ref().map(|s| s.mean),
        rank_ic,
        ir,
        r2,
        daily_ic: ic.map(|s| s.daily).unwrap_or_default(),
    }
}
