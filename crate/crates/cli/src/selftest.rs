//! Built-in consistency checks runnable on any machine in seconds.

use std::collections::BTreeMap;
use std::path::PathBuf;

use chrono::NaiveDate;

use factorforge::codec::{decode_expression, decode_float_tokens, encode_expression, encode_float};
use factorforge::eval::{evaluate_factor, oracle};
use factorforge::expr::evaluate;
use factorforge::infer::toy::{self, ToyConfig};
use factorforge::infer::Scaling;
use factorforge::market::DailyPanel;
use factorforge::synth::{sample_at, GeneratorConfig};

use crate::commands::{Exit, Failure, Outcome, OrExit};

pub struct Check {
    pub name: &'static str,
    pub worst: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// splitmix64 mapped to [0, 1).
fn unit(seed: u64, i: u64) -> f64 {
    let mut z = seed.wrapping_add(i.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) as f64 / 2f64.powi(64)
}

fn float_codec(seed: u64) -> Check {
    let worst = (0..100_000u64)
        .map(|i| {
            let v = 10f64.powf(-100.0 + 200.0 * unit(seed, i)) * if i % 2 == 0 { 1.0 } else { -1.0 };
            let back = encode_float(v).and_then(|t| decode_float_tokens(&t.tokens()));
            back.map_or(f64::INFINITY, |b| rel(b, v))
        })
        .fold(0.0, f64::max);
    Check { name: "float codec round trip", worst, tolerance: 5e-4 }
}

fn expression_codec(g: &GeneratorConfig, seed: u64) -> Check {
    let worst = (0..500u64)
        .map(|i| {
            let Ok(s) = sample_at(g, seed, i) else { return f64::INFINITY };
            let Ok(back) = encode_expression(&s.expr).and_then(|t| decode_expression(&t.tokens)) else {
                return f64::INFINITY;
            };
            let (want, got) = (s.expr.constants(), back.constants());
            if back.with_constants(&want).ok().as_ref() != Some(&s.expr) {
                return f64::INFINITY;
            }
            want.iter().zip(&got).map(|(w, g)| rel(*g, *w)).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Check { name: "expression codec round trip", worst, tolerance: 5e-4 }
}

fn scaling(g: &GeneratorConfig, seed: u64) -> Check {
    let worst = (0..200u64)
        .map(|i| {
            let Ok(s) = sample_at(g, seed ^ 0x5ca1e, i) else { return f64::INFINITY };
            let sc = Scaling::fit(&s.bag, true);
            let direct = evaluate(&s.expr, sc.apply(&s.bag).inputs.view());
            let raw = evaluate(&sc.unscale(&s.expr), s.bag.inputs.view());
            direct
                .values
                .iter()
                .zip(&raw.values)
                .zip(direct.valid.iter().zip(&raw.valid))
                .filter(|(_, (a, b))| **a && **b)
                .map(|((d, r), _)| {
                    let want = sc.y_sigma * d + sc.y_mu;
                    (r - want).abs() / want.abs().max(1.0)
                })
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    Check { name: "affine unscaling", worst, tolerance: 1e-10 }
}

fn metric_oracle(seed: u64) -> Check {
    let panel = |salt: u64| -> DailyPanel {
        let mut p = DailyPanel::new();
        for d in 0..5u64 {
            let date = NaiveDate::from_ymd_opt(2024, 1, 1 + d as u32).expect("valid date");
            let row: BTreeMap<String, f64> =
                (0..10u64).map(|s| (format!("S{s:02}"), unit(seed ^ salt, d * 10 + s) - 0.5)).collect();
            p.insert(date, row);
        }
        p
    };
    let worst = (0..100u64)
        .map(|k| {
            let (f, y) = (panel(2 * k + 1), panel(2 * k + 2));
            oracle::discrepancy(&evaluate_factor(&f, &y), &f, &y)
        })
        .fold(0.0, f64::max);
    Check { name: "metric oracle agreement", worst, tolerance: 1e-12 }
}

/// Runs the quick checks and prints one line each. Fails with the numeric
/// exit code if any check misses its tolerance.
pub fn run_checks(g: &GeneratorConfig, seed: u64) -> Outcome {
    let checks = [float_codec(seed), expression_codec(g, seed), scaling(g, seed), metric_oracle(seed)];
    for c in &checks {
        let verdict = if c.passed() { "PASS" } else { "FAIL" };
        println!("{verdict} {}: worst {:e} (tolerance {:e})", c.name, c.worst, c.tolerance);
    }
    match checks.iter().filter(|c| !c.passed()).count() {
        0 => Ok(()),
        n => Err(Failure { exit: Exit::Numeric, error: anyhow::anyhow!("{n} self-check(s) failed") }),
    }
}

/// End-to-end recovery experiment: train (or reuse a cached checkpoint),
/// then mine held-out planted expressions.
/// The toy configuration keeps its own seed so cached checkpoints stay valid.
pub fn run_toy(smoke: bool, held_out: Option<usize>, cache: Option<PathBuf>) -> Outcome {
    let mut cfg = if smoke { ToyConfig::smoke() } else { ToyConfig::default() };
    if let Some(n) = held_out {
        cfg.held_out = n;
    }
    let report = toy::run(&cfg, cache, |row, _| {
        let r = row.record();
        eprintln!("step {} lr {} train {} val {} acc {}", r[0], r[1], r[2], r[3], r[4]);
    })
    .or_exit(Exit::Numeric)?;
    for t in &report.trials {
        println!(
            "{} planted {}  mined {}  R2 {}",
            if t.recovered { "hit " } else { "miss" },
            t.truth,
            t.best.as_deref().unwrap_or("-"),
            t.r2.map_or("-".to_string(), |r| format!("{r:.6}"))
        );
    }
    println!(
        "recovered {}/{} ({:.0}%); training {:.0}s{}, mining {:.0}s",
        report.recovered,
        report.trials.len(),
        100.0 * report.rate,
        report.train_seconds,
        if report.cached { " (cached)" } else { "" },
        report.mine_seconds
    );
    Ok(())
}
