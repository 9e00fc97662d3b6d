//! Minute-bar ingestion, realized volatility targets, and per-stock-day
//! sample bags.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::{NaiveDate, NaiveTime, Timelike};
use ndarray::Array2;
use serde::Deserialize;

use crate::bag::{Provenance, SampleBag};
use crate::expr::{evaluate, Expression};
use crate::par;

/// Feature order of every market bag.
pub const FEATURES: [&str; 6] = ["open", "high", "low", "close", "volume", "vwap"];
pub const CSV_HEADER: [&str; 9] = ["ticker", "date", "time", "open", "high", "low", "close", "volume", "vwap"];

#[derive(Debug, thiserror::Error)]
pub enum MarketError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("missing or wrong CSV header; expected `{}`", CSV_HEADER.join(","))]
    Header,
    #[error("non-positive price {0}")]
    NonPositivePrice(f64),
    #[error("need at least two closes, got {0}")]
    TooFewCloses(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bar {
    /// Minutes since midnight.
    pub minute: u32,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
    pub vwap: f64,
}

impl Bar {
    pub fn features(&self) -> [f64; 6] {
        [self.open, self.high, self.low, self.close, self.volume, self.vwap]
    }
}

pub type StockDay = (String, NaiveDate);

/// Bars keyed by `(ticker, date)`, each day sorted by strictly increasing
/// minute.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BarPanel {
    pub days: BTreeMap<StockDay, Vec<Bar>>,
}

/// Values keyed by date then ticker.
pub type DailyPanel = BTreeMap<NaiveDate, BTreeMap<String, f64>>;

/// Realized volatility per stock-day.
pub type RvSeries = BTreeMap<StockDay, f64>;

#[derive(Debug, Deserialize)]
struct Row {
    ticker: String,
    date: String,
    time: String,
    open: f64,
    high: f64,
    low: f64,
    close: f64,
    volume: f64,
    vwap: f64,
}

impl BarPanel {
    /// Reads `ticker,date,time,open,high,low,close,volume,vwap` rows. Row
    /// order does not matter.
    pub fn from_csv<R: Read>(input: R) -> Result<Self, MarketError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.len() != CSV_HEADER.len() || header.iter().zip(CSV_HEADER).any(|(a, b)| a != b) {
            return Err(MarketError::Header);
        }
        let mut days: BTreeMap<StockDay, Vec<Bar>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| MarketError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let perr = |msg: String| MarketError::Parse { line, msg };
            let row: Row = rec.deserialize(Some(&header)).map_err(|e| perr(e.to_string()))?;
            let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
                .map_err(|e| perr(format!("bad date `{}`: {e}", row.date)))?;
            let time = NaiveTime::parse_from_str(&row.time, "%H:%M")
                .map_err(|e| perr(format!("bad time `{}`: {e}", row.time)))?;
            let bar = Bar {
                minute: time.hour() * 60 + time.minute(),
                open: row.open,
                high: row.high,
                low: row.low,
                close: row.close,
                volume: row.volume,
                vwap: row.vwap,
            };
            for p in [bar.open, bar.high, bar.low, bar.close, bar.vwap] {
                if !(p > 0.0 && p.is_finite()) {
                    return Err(perr(format!("non-positive or non-finite price {p}")));
                }
            }
            if !(bar.volume >= 0.0 && bar.volume.is_finite()) {
                return Err(perr(format!("invalid volume {}", bar.volume)));
            }
            if row.ticker.is_empty() {
                return Err(perr("empty ticker".into()));
            }
            days.entry((row.ticker, date)).or_default().push(bar);
        }
        for ((ticker, date), bars) in days.iter_mut() {
            bars.sort_by_key(|b| b.minute);
            if let Some(w) = bars.windows(2).find(|w| w[0].minute == w[1].minute) {
                return Err(MarketError::Parse {
                    line: 0,
                    msg: format!("duplicate minute {} for {ticker} on {date}", w[0].minute),
                });
            }
        }
        Ok(Self { days })
    }

    pub fn tickers(&self) -> Vec<String> {
        let mut t: Vec<String> = self.days.keys().map(|(t, _)| t.clone()).collect();
        t.dedup();
        t
    }

    /// Trading days of one ticker, ascending.
    pub fn dates_of(&self, ticker: &str) -> Vec<NaiveDate> {
        self.days.keys().filter(|(t, _)| t == ticker).map(|(_, d)| *d).collect()
    }

    pub fn bars(&self, ticker: &str, date: NaiveDate) -> Option<&[Bar]> {
        self.days.get(&(ticker.to_string(), date)).map(Vec::as_slice)
    }
}

/// Sum of squared consecutive log-price differences.
pub fn compute_rv(closes: &[f64]) -> Result<f64, MarketError> {
    if closes.len() < 2 {
        return Err(MarketError::TooFewCloses(closes.len()));
    }
    if let Some(&p) = closes.iter().find(|&&p| !(p > 0.0)) {
        return Err(MarketError::NonPositivePrice(p));
    }
    Ok(closes.windows(2).map(|w| (w[1] / w[0]).ln().powi(2)).sum())
}

/// RV for every stock-day with at least two bars.
pub fn rv_series(panel: &BarPanel) -> RvSeries {
    let mut out = RvSeries::new();
    for (key, bars) in &panel.days {
        let closes: Vec<f64> = bars.iter().map(|b| b.close).collect();
        if let Ok(rv) = compute_rv(&closes) {
            out.insert(key.clone(), rv);
        }
    }
    out
}

pub fn write_rv_csv<W: Write>(rv: &RvSeries, out: W) -> Result<(), MarketError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["ticker", "date", "rv"])?;
    for ((t, d), v) in rv {
        w.write_record([t.clone(), d.to_string(), format!("{v:e}")])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct BagBuild {
    pub bags: Vec<SampleBag>,
    /// Windows dropped for lack of a next-day RV.
    pub skipped: usize,
}

/// One bag per `(ticker, day d)` holding every minute bar of the
/// `lookback` trading days ending at `d`, each row targeting RV of the next
/// trading day.
pub fn build_bags(panel: &BarPanel, rv: &RvSeries, lookback: usize) -> BagBuild {
    assert!(lookback >= 1);
    let tickers = panel.tickers();
    let per_ticker = par::map(&tickers, |ticker| {
        let dates = panel.dates_of(ticker);
        let mut bags = Vec::new();
        let mut skipped = 0;
        if dates.len() <= lookback {
            return (bags, skipped);
        }
        for i in lookback - 1..dates.len() - 1 {
            let next = dates[i + 1];
            let Some(&y) = rv.get(&(ticker.clone(), next)) else {
                skipped += 1;
                continue;
            };
            let rows: Vec<[f64; 6]> = dates[i + 1 - lookback..=i]
                .iter()
                .flat_map(|d| panel.bars(ticker, *d).unwrap_or(&[]).iter().map(Bar::features))
                .collect();
            if rows.is_empty() {
                skipped += 1;
                continue;
            }
            let inputs = Array2::from_shape_fn((rows.len(), 6), |(k, j)| rows[k][j]);
            let provenance = Provenance::StockDay { ticker: ticker.clone(), date: dates[i].to_string() };
            bags.push(SampleBag::new(inputs, vec![y; rows.len()], provenance));
        }
        (bags, skipped)
    });
    let mut out = BagBuild { bags: Vec::new(), skipped: 0 };
    for (bags, skipped) in per_ticker {
        out.bags.extend(bags);
        out.skipped += skipped;
    }
    out
}

/// Daily factor value: mean of the expression over the day's valid bars.
/// Stock-days with no valid bar are absent.
pub fn factor_values(expr: &Expression, panel: &BarPanel) -> DailyPanel {
    let keys: Vec<&StockDay> = panel.days.keys().collect();
    let vals = par::map(&keys, |key| {
        let bars = &panel.days[*key];
        let x = Array2::from_shape_fn((bars.len(), 6), |(k, j)| bars[k].features()[j]);
        let r = evaluate(expr, x.view());
        let (sum, n) = r
            .values
            .iter()
            .zip(&r.valid)
            .filter(|(_, &ok)| ok)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    });
    let mut out = DailyPanel::new();
    for (key, v) in keys.into_iter().zip(vals) {
        if let Some(v) = v {
            out.entry(key.1).or_default().insert(key.0.clone(), v);
        }
    }
    out
}

/// For each `(ticker, day t)`, the RV of that ticker's next trading day.
pub fn next_day_rv(panel: &BarPanel, rv: &RvSeries) -> DailyPanel {
    let mut out = DailyPanel::new();
    for ticker in panel.tickers() {
        let dates = panel.dates_of(&ticker);
        for w in dates.windows(2) {
            if let Some(&v) = rv.get(&(ticker.clone(), w[1])) {
                out.entry(w[0]).or_default().insert(ticker.clone(), v);
            }
        }
    }
    out
}

/// Close-to-close return from day t to the ticker's next trading day,
/// keyed by t.
pub fn forward_returns(panel: &BarPanel) -> DailyPanel {
    let mut out = DailyPanel::new();
    for ticker in panel.tickers() {
        let dates = panel.dates_of(&ticker);
        for w in dates.windows(2) {
            let c0 = panel.bars(&ticker, w[0]).and_then(|b| b.last()).map(|b| b.close);
            let c1 = panel.bars(&ticker, w[1]).and_then(|b| b.last()).map(|b| b.close);
            if let (Some(c0), Some(c1)) = (c0, c1) {
                out.entry(w[0]).or_default().insert(ticker.clone(), c1 / c0 - 1.0);
            }
        }
    }
    out
}
