use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
samples = 40

[generator]
w_max = 6
b_max = 1
u_max = 0
m_max = 60

[generator.operators]
binary = ["Add", "Mul"]
unary = []

[model]
d_emb = 16
enc_layers = 1
dec_layers = 1
heads = 2
ffn_mult = 2
w_max = 6
max_len = 80

[train]
warmup_steps = 5
max_steps = 6
log_interval = 2
val_fraction = 0.25
batch_tokens = 300
epochs = 10

[inference]
bags = 2
bag_size = 50
candidates_per_bag = 2
keep = 2
subset_cap = 100
bfgs_max_iter = 20

[eval]
top_k = 2
"#;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn ff(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_factorforge"))
        .args(args)
        .env_remove("FACTORFORGE_THREADS")
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(args: &[&str]) -> Run {
    let r = ff(args);
    assert_eq!(r.code, 0, "{args:?}\nstdout: {}\nstderr: {}", r.stdout, r.stderr);
    r
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// splitmix64 mapped to [0, 1).
fn unit(i: u64) -> f64 {
    let mut z = i.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) as f64 / 2f64.powi(64)
}

/// Five tickers, eight days, twenty minute bars per day of a random walk
/// whose volatility differs by ticker.
fn market_csv() -> String {
    let mut out = String::from("ticker,date,time,open,high,low,close,volume,vwap\n");
    let mut k = 0u64;
    for t in 0..5 {
        let mut price = 50.0 + 10.0 * t as f64;
        for d in 1..=8 {
            for m in 0..20 {
                k += 1;
                let vol = 0.002 * (1.0 + t as f64) * (1.0 + 0.5 * unit(1000 + d));
                let open = price;
                price *= 1.0 + vol * (2.0 * unit(k) - 1.0);
                let (hi, lo) = (open.max(price) * 1.0005, open.min(price) * 0.9995);
                let volume = 1000.0 + 500.0 * unit(k + 77_777);
                out += &format!(
                    "T{t},2024-03-{d:02},09:{m:02},{open},{hi},{lo},{price},{volume},{}\n",
                    (open + price) / 2.0
                );
            }
        }
    }
    out
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    corpus: PathBuf,
    ckpt: PathBuf,
    factors: PathBuf,
}

/// Corpus, checkpoint and mined factors shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let data = root.join("bars.csv");
        std::fs::write(&data, market_csv()).unwrap();
        let corpus = root.join("corpus.ndjson");
        ok(&["gen-corpus", "--config", s(&config), "--out", s(&corpus)]);
        let ckpt = root.join("model.ckpt");
        ok(&["train", "--config", s(&config), "--threads", "1", "--corpus", s(&corpus), "--out", s(&ckpt)]);
        let factors = root.join("factors.json");
        ok(&["mine", "--config", s(&config), "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&factors)]);
        Fixture { _dir: dir, root, config, data, corpus, ckpt, factors }
    })
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}.{suffix}", p.display()))
}

#[test]
fn gen_corpus_writes_counted_lines_manifest_and_snapshot() {
    let f = fixture();
    let text = String::from_utf8(read(&f.corpus)).unwrap();
    assert_eq!(text.lines().count(), 40);
    let manifest: serde_json::Value = serde_json::from_slice(&read(&with_suffix(&f.corpus, "manifest.json"))).unwrap();
    assert_eq!(manifest["samples"], 40);
    assert_eq!(manifest["master_seed"], 3);
    assert!(manifest["config_hash"].as_str().is_some_and(|h| h.len() == 64));
    let snap = String::from_utf8(read(&with_suffix(&f.corpus, "config.toml"))).unwrap();
    assert!(snap.contains("seed = 3"), "{snap}");
}

#[test]
fn gen_corpus_with_zero_samples_is_empty_with_manifest() {
    let f = fixture();
    let out = f.root.join("empty.ndjson");
    ok(&["gen-corpus", "--config", s(&f.config), "--n", "0", "--out", s(&out)]);
    assert!(read(&out).is_empty());
    let manifest: serde_json::Value = serde_json::from_slice(&read(&with_suffix(&out, "manifest.json"))).unwrap();
    assert_eq!(manifest["samples"], 0);
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus.ndjson");
    ok(&["gen-corpus", "--config", s(&f.config), "--out", s(&corpus)]);
    assert_eq!(read(&corpus), read(&f.corpus));
    let ckpt = dir.path().join("model.ckpt");
    ok(&["train", "--config", s(&f.config), "--threads", "1", "--corpus", s(&corpus), "--out", s(&ckpt)]);
    assert_eq!(read(&ckpt), read(&f.ckpt));
    assert_eq!(read(&with_suffix(&ckpt, "log.csv")), read(&with_suffix(&f.ckpt, "log.csv")));
    let factors = dir.path().join("factors.json");
    ok(&["mine", "--config", s(&f.config), "--checkpoint", s(&ckpt), "--data", s(&f.data), "--out", s(&factors)]);
    assert_eq!(read(&factors), read(&f.factors));
}

#[test]
fn different_master_seed_changes_the_corpus() {
    let f = fixture();
    let out = f.root.join("other.ndjson");
    ok(&["gen-corpus", "--config", s(&f.config), "--seed", "4", "--out", s(&out)]);
    assert_ne!(read(&out), read(&f.corpus));
}

#[test]
fn train_log_has_one_row_per_interval_and_resume_continues() {
    let f = fixture();
    let log = String::from_utf8(read(&with_suffix(&f.ckpt, "log.csv"))).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(rows[0], "step,lr,train_loss,val_loss,val_acc");
    // 6 steps at interval 2
    assert_eq!(rows.len() - 1, 3, "{log}");
    let out = f.root.join("resumed.ckpt");
    let last = with_suffix(&f.ckpt, "last.ckpt");
    ok(&[
        "train", "--config", s(&f.config), "--set", "train.max_steps=10", "--corpus", s(&f.corpus), "--resume", s(&last),
        "--out", s(&out),
    ]);
    let log = String::from_utf8(read(&with_suffix(&out, "log.csv"))).unwrap();
    let steps: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["8", "10"]);
}

#[test]
fn mined_factors_carry_provenance() {
    let f = fixture();
    let v: serde_json::Value = serde_json::from_slice(&read(&f.factors)).unwrap();
    let factors = v["factors"].as_array().unwrap();
    assert!(!factors.is_empty() && factors.len() <= 2);
    for fac in factors {
        for key in ["infix", "prefix", "constants", "fit_error", "R2", "provenance"] {
            assert!(fac.get(key).is_some(), "missing {key} in {fac}");
        }
        assert!(fac["provenance"]["source"].get("StockDay").is_some(), "{fac}");
    }
    assert_eq!(v["bags_used"].as_array().unwrap().len(), 2);
}

#[test]
fn eval_reports_all_metrics_and_passes_the_oracle() {
    let f = fixture();
    let out = f.root.join("report.json");
    ok(&["eval", "--factors", s(&f.factors), "--data", s(&f.data), "--out", s(&out), "--oracle"]);
    let v: serde_json::Value = serde_json::from_slice(&read(&out)).unwrap();
    assert_eq!(v["oracle_checked"], true);
    for fac in v["factors"].as_array().unwrap() {
        for key in ["IC*", "RankIC*", "IR*", "R2", "daily_ic"] {
            assert!(fac.get(key).is_some(), "missing {key} in {fac}");
        }
    }
}

#[test]
fn backtest_writes_nav_csv_or_reports_an_empty_pool() {
    let f = fixture();
    let out = f.root.join("nav.csv");
    let r = ff(&["backtest", "--config", s(&f.config), "--factors", s(&f.factors), "--data", s(&f.data), "--out", s(&out)]);
    match r.code {
        0 => {
            let nav = String::from_utf8(read(&out)).unwrap();
            assert_eq!(nav.lines().next(), Some("date,return,nav"));
            // 8 days leave 7 with a forward return
            assert_eq!(nav.lines().count() - 1, 7, "{nav}");
            let summary: serde_json::Value = serde_json::from_slice(&read(&with_suffix(&out, "json"))).unwrap();
            assert_eq!(summary["top_k"], 2);
        }
        2 => assert!(r.stderr.contains("empty factor pool"), "{}", r.stderr),
        c => panic!("exit {c}: {}", r.stderr),
    }
}

#[test]
fn backtest_with_no_factors_fails_with_data_error() {
    let f = fixture();
    let mut v: serde_json::Value = serde_json::from_slice(&read(&f.factors)).unwrap();
    v["factors"] = serde_json::json!([]);
    let empty = f.root.join("nofactors.json");
    std::fs::write(&empty, serde_json::to_vec(&v).unwrap()).unwrap();
    let r = ff(&["backtest", "--factors", s(&empty), "--data", s(&f.data), "--out", s(&f.root.join("x.csv"))]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("empty factor pool"), "{}", r.stderr);
}

#[test]
fn malformed_csv_is_a_data_error_with_line_number() {
    let f = fixture();
    let bad = f.root.join("bad.csv");
    std::fs::write(&bad, "ticker,date,time,open,high,low,close,volume,vwap\nA,2024-01-02,09:30,1,1,1,1,10,1\nA,2024-01-02,9h31,1,1,1,1,10,1\n")
        .unwrap();
    let r = ff(&["mine", "--config", s(&f.config), "--checkpoint", s(&f.ckpt), "--data", s(&bad), "--out", s(&f.root.join("y.json"))]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("line 3"), "{}", r.stderr);
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let f = fixture();
    assert_eq!(ff(&["frobnicate"]).code, 1);
    assert_eq!(ff(&["gen-corpus", "--config", s(&f.config)]).code, 1, "missing --out");
    let r = ff(&["gen-corpus", "--set", "generator.bogus=1", "--out", s(&f.root.join("z.ndjson"))]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    let bad = f.root.join("bad.toml");
    std::fs::write(&bad, "[inference]\nbagz = 3\n").unwrap();
    assert_eq!(ff(&["selftest", "--config", s(&bad)]).code, 1);
    let r = ff(&["mine", "--decode", "beam", "--temperature", "0.5", "--out", "q.json"]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert_eq!(ff(&["--help"]).code, 0);
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let f = fixture();
    let r = ff(&["mine", "--checkpoint", s(&f.root.join("nope.ckpt")), "--data", s(&f.data), "--out", s(&f.root.join("w.json"))]);
    assert_eq!(r.code, 2, "{}", r.stderr);
}

#[test]
fn quick_selftest_passes() {
    let r = ok(&["selftest"]);
    assert_eq!(r.stdout.lines().filter(|l| l.starts_with("PASS")).count(), 4, "{}", r.stdout);
}

#[test]
fn mine_selftest_reports_recovery() {
    let f = fixture();
    let r = ok(&["mine", "--config", s(&f.config), "--checkpoint", s(&f.ckpt), "--selftest", "--trials", "2"]);
    assert!(r.stdout.contains("recovered"), "{}", r.stdout);
    assert_eq!(r.stdout.lines().filter(|l| l.starts_with("planted")).count(), 2);
}

#[test]
fn threads_env_var_is_honoured_and_validated() {
    let r = Command::new(env!("CARGO_BIN_EXE_factorforge"))
        .args(["selftest"])
        .env("FACTORFORGE_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(r.status.code(), Some(1));
}
