//! Straightforward reference implementations of the factor metrics, used to
//! cross-check the production paths at run time.

use crate::market::DailyPanel;

use super::FactorMetrics;

fn corr(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    let (sa, sb) = ((va / n).sqrt(), (vb / n).sqrt());
    if a.len() < 2 || sa <= 1e-12 * ma.abs().max(1.0) || sb <= 1e-12 * mb.abs().max(1.0) {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Rank by counting: `1 + #{less} + (#{equal} - 1) / 2`.
fn ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|u| *u < v).count() as f64;
            let eq = x.iter().filter(|u| *u == v).count() as f64;
            1.0 + less + (eq - 1.0) / 2.0
        })
        .collect()
}

fn cross_sections(f: &DailyPanel, y: &DailyPanel) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    for (day, row) in f {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (t, v) in row {
            if let Some(w) = y.get(day).and_then(|r| r.get(t)) {
                a.push(*v);
                b.push(*w);
            }
        }
        out.push((a, b));
    }
    out
}

fn daily(f: &DailyPanel, y: &DailyPanel, rank: bool) -> Vec<f64> {
    cross_sections(f, y)
        .into_iter()
        .filter(|(a, _)| a.len() >= 3)
        .filter_map(|(a, b)| if rank { corr(&ranks(&a), &ranks(&b)) } else { corr(&a, &b) })
        .collect()
}

pub fn metrics(f: &DailyPanel, y: &DailyPanel) -> FactorMetrics {
    let ics = daily(f, y, false);
    let ric = daily(f, y, true);
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let ic = avg(&ics);
    let ir = ic.and_then(|m| {
        let sd = (ics.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ics.len() as f64).sqrt();
        (ics.len() >= 2 && sd > 1e-12).then(|| m / sd)
    });
    let (mut yy, mut yh) = (Vec::new(), Vec::new());
    for (a, b) in cross_sections(f, y) {
        yh.extend(a);
        yy.extend(b);
    }
    let r2 = (yy.len() >= 2).then(|| {
        let m = yy.iter().sum::<f64>() / yy.len() as f64;
        let tot: f64 = yy.iter().map(|v| (v - m).powi(2)).sum();
        let res: f64 = yy.iter().zip(&yh).map(|(v, h)| (v - h).powi(2)).sum();
        let sd = (tot / yy.len() as f64).sqrt();
        (sd > 1e-12 * m.abs().max(1.0)).then(|| 1.0 - res / tot)
    });
    FactorMetrics { ic, rank_ic: avg(&ric), ir, r2: r2.flatten(), daily_ic: Vec::new() }
}

/// Largest absolute disagreement between `got` and the reference metrics;
/// infinite when one side is defined and the other is not.
pub fn discrepancy(got: &FactorMetrics, f: &DailyPanel, y: &DailyPanel) -> f64 {
    let want = metrics(f, y);
    [(got.ic, want.ic), (got.rank_ic, want.rank_ic), (got.ir, want.ir), (got.r2, want.r2)]
        .into_iter()
        .map(|pair| match pair {
            (Some(a), Some(b)) => (a - b).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}
