use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use factorforge::eval::{self, backtest, combine_scores, evaluate_factor, filter_pool, FactorMetrics, PoolCandidate};
use factorforge::infer::toy::{self, ToyConfig};
use factorforge::infer::{mine, FactorRecord, InferError, InferenceConfig, ModelSource, Scaling};
use factorforge::market::{self, BarPanel, DailyPanel, FEATURES};
use factorforge::model::{train, Checkpoint, ModelError, Sample, TrainError};
use factorforge::synth::{read_corpus, write_corpus, CorpusManifest, SynthError};

use crate::config::{sibling, RunConfig};

/// Process exit status; the numeric values are a stable scripting contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub exit: Exit,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub trait OrExit<T> {
    fn or_exit(self, exit: Exit) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, exit: Exit) -> Outcome<T> {
        self.map_err(|e| Failure { exit, error: e.into() })
    }
}

fn fail<T>(exit: Exit, msg: impl fmt::Display) -> Outcome<T> {
    Err(Failure { exit, error: anyhow!("{msg}") })
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Outcome<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => fail(Exit::Usage, format!("missing {flag}")),
    }
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path).with_context(|| format!("creating {}", path.display())).map(BufWriter::new).or_exit(Exit::Data)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).or_exit(Exit::Data)?;
    w.write_all(b"\n").and_then(|_| w.flush()).with_context(|| format!("writing {}", path.display())).or_exit(Exit::Data)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Outcome<T> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display())).or_exit(Exit::Data)?;
    serde_json::from_reader(BufReader::new(f)).with_context(|| format!("parsing {}", path.display())).or_exit(Exit::Data)
}

fn synth_exit(e: &SynthError) -> Exit {
    match e {
        SynthError::Config(_) => Exit::Usage,
        SynthError::RetriesExhausted { .. } | SynthError::Degenerate(_) => Exit::Numeric,
        _ => Exit::Data,
    }
}

fn load_panel(path: &Path) -> Outcome<BarPanel> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display())).or_exit(Exit::Data)?;
    BarPanel::from_csv(BufReader::new(f)).with_context(|| format!("reading {}", path.display())).or_exit(Exit::Data)
}

fn load_checkpoint(path: &Path) -> Outcome<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display())).or_exit(Exit::Data)
}

pub fn gen_corpus(cfg: &RunConfig) -> Outcome {
    let out = required(&cfg.io.out, "--out")?;
    cfg.generator.validate().or_exit(Exit::Usage)?;
    let mut w = create(out)?;
    let manifest = write_corpus(&cfg.generator, cfg.seed, cfg.samples, &mut w).map_err(|e| Failure {
        exit: synth_exit(&e),
        error: anyhow::Error::from(e).context("generating corpus"),
    })?;
    write_json(&sibling(out, "manifest.json"), &manifest)?;
    cfg.snapshot(out).or_exit(Exit::Data)?;
    eprintln!("wrote {} sample(s) to {}", manifest.samples, out.display());
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Outcome {
    let corpus = required(&cfg.io.corpus, "--corpus")?;
    let out = required(&cfg.io.out, "--out")?;
    let manifest_path = sibling(corpus, "manifest.json");
    let generator = if manifest_path.exists() {
        read_json::<CorpusManifest>(&manifest_path)?.config
    } else {
        cfg.generator.clone()
    };
    if generator.w_max != cfg.model.w_max {
        return fail(
            Exit::Usage,
            format!("corpus w_max {} differs from model.w_max {}", generator.w_max, cfg.model.w_max),
        );
    }
    let f = File::open(corpus).with_context(|| format!("opening {}", corpus.display())).or_exit(Exit::Data)?;
    let mut samples = Vec::new();
    for (i, line) in read_corpus(BufReader::new(f)).enumerate() {
        let line = line.with_context(|| format!("{} sample {}", corpus.display(), i + 1)).or_exit(Exit::Data)?;
        samples.push(Sample::from(&line));
    }
    let resume = cfg.io.resume.as_deref().map(load_checkpoint).transpose()?;
    eprintln!("model: {} parameters; {} training sample(s)", cfg.model.param_count(), samples.len());
    let log_path = sibling(out, "log.csv");
    let mut log = create(&log_path)?;
    writeln!(log, "step,lr,train_loss,val_loss,val_acc").or_exit(Exit::Data)?;
    let mut io_error = None;
    let result = train(&samples, &cfg.model, &cfg.train, Some(generator), resume, |row, _| {
        let rec = row.record();
        eprintln!("step {} lr {} train {} val {} acc {}", rec[0], rec[1], rec[2], rec[3], rec[4]);
        if let Err(e) = writeln!(log, "{}", rec.join(",")) {
            io_error.get_or_insert(e);
        }
    });
    log.flush().or_exit(Exit::Data)?;
    if let Some(e) = io_error {
        return Err(e).with_context(|| format!("writing {}", log_path.display())).or_exit(Exit::Data);
    }
    let outcome = match result {
        Ok(o) => o,
        Err(TrainError::Diverged { batch, last_good }) => {
            let p = sibling(out, "last-good.ckpt");
            last_good.save(&p).or_exit(Exit::Data)?;
            return fail(Exit::Numeric, format!("training diverged at batch {batch}; last good state in {}", p.display()));
        }
        Err(e @ TrainError::Config(_)) => return Err(e).or_exit(Exit::Usage),
        Err(e @ TrainError::Model(ModelError::NonFiniteLoss { .. })) => return Err(e).or_exit(Exit::Numeric),
        Err(e) => return Err(e).or_exit(Exit::Data),
    };
    outcome.best.save(out).with_context(|| format!("writing {}", out.display())).or_exit(Exit::Data)?;
    outcome.last.save(&sibling(out, "last.ckpt")).or_exit(Exit::Data)?;
    cfg.snapshot(out).or_exit(Exit::Data)?;
    eprintln!("trained to step {}; best checkpoint in {}", outcome.last.progress.step, out.display());
    Ok(())
}

/// Contents of `factors.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct FactorsFile {
    pub master_seed: u64,
    pub inference: InferenceConfig,
    pub bags_available: usize,
    pub bags_used: Vec<usize>,
    pub proposed: usize,
    pub parsed: usize,
    pub scaling: Scaling,
    pub factors: Vec<FactorRecord>,
}

fn infer_exit(e: &InferError) -> Exit {
    match e {
        InferError::Config(_) | InferError::TooWide { .. } | InferError::WidthMismatch(..) => Exit::Usage,
        InferError::NoBags => Exit::Data,
        InferError::NoCandidates { .. } | InferError::Model(_) | InferError::Codec(_) => Exit::Numeric,
    }
}

pub fn mine_cmd(cfg: &RunConfig) -> Outcome {
    let ck_path = required(&cfg.io.checkpoint, "--checkpoint")?;
    let data = required(&cfg.io.data, "--data")?;
    let out = required(&cfg.io.out, "--out")?;
    cfg.inference.validate().map_err(|e| Failure { exit: Exit::Usage, error: e.into() })?;
    let ck = load_checkpoint(ck_path)?;
    let panel = load_panel(data)?;
    let rv = market::rv_series(&panel);
    let built = market::build_bags(&panel, &rv, cfg.market.lookback);
    if built.bags.is_empty() {
        return fail(Exit::Data, format!("{} yields no bag with a next-day RV at lookback {}", data.display(), cfg.market.lookback));
    }
    if built.skipped > 0 {
        eprintln!("skipped {} window(s) without a next-day RV", built.skipped);
    }
    let source = ModelSource::new(&ck, &cfg.inference);
    let mined = mine(&built.bags, &source, &cfg.inference)
        .map_err(|e| Failure { exit: infer_exit(&e), error: anyhow::Error::from(e).context("mining") })?;
    let file = FactorsFile {
        master_seed: cfg.seed,
        inference: cfg.inference.clone(),
        bags_available: built.bags.len(),
        bags_used: mined.bags_used,
        proposed: mined.proposed,
        parsed: mined.parsed,
        scaling: mined.scaling,
        factors: mined.candidates.iter().map(|c| FactorRecord::new(c, &FEATURES)).collect(),
    };
    write_json(out, &file)?;
    cfg.snapshot(out).or_exit(Exit::Data)?;
    eprintln!("kept {} factor(s) from {} decoded candidate(s)", file.factors.len(), file.proposed);
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SelftestMine {
    pub trials: Vec<toy::Trial>,
    pub recovered: usize,
}

/// Mines planted expressions drawn from the checkpoint's own generator.
pub fn mine_selftest(cfg: &RunConfig, trials: u64) -> Outcome {
    let ck_path = required(&cfg.io.checkpoint, "--checkpoint")?;
    let ck = load_checkpoint(ck_path)?;
    let toy_cfg = ToyConfig {
        generator: ck.generator.clone().unwrap_or_else(|| cfg.generator.clone()),
        seed: cfg.seed,
        inference: cfg.inference.clone(),
        ..ToyConfig::default()
    };
    let source = ModelSource::new(&ck, &cfg.inference);
    let mut report = SelftestMine { trials: Vec::new(), recovered: 0 };
    for i in 0..trials {
        let t = toy::trial(&toy_cfg, i, &source).map_err(|e| Failure { exit: synth_exit(&e), error: e.into() })?;
        println!(
            "planted {}  mined {}  R2 {}",
            t.truth,
            t.best.as_deref().unwrap_or("-"),
            t.r2.map_or("-".to_string(), |r| format!("{r:.6}"))
        );
        report.recovered += t.recovered as usize;
        report.trials.push(t);
    }
    println!("recovered {}/{}", report.recovered, trials);
    if let Some(out) = &cfg.io.out {
        write_json(out, &report)?;
        cfg.snapshot(out).or_exit(Exit::Data)?;
    }
    Ok(())
}

struct Scored {
    record: FactorRecord,
    values: DailyPanel,
    metrics: FactorMetrics,
}

fn score_factors(cfg: &RunConfig) -> Outcome<(Vec<Scored>, BarPanel)> {
    let factors = required(&cfg.io.factors, "--factors")?;
    let data = required(&cfg.io.data, "--data")?;
    let file: FactorsFile = read_json(factors)?;
    let panel = load_panel(data)?;
    let rv_next = market::next_day_rv(&panel, &market::rv_series(&panel));
    let scored = file
        .factors
        .into_iter()
        .map(|record| {
            let values = market::factor_values(&record.expression, &panel);
            let metrics = evaluate_factor(&values, &rv_next);
            if cfg.eval.oracle {
                let d = eval::oracle::discrepancy(&metrics, &values, &rv_next);
                if !(d <= 1e-12) {
                    return fail(Exit::Numeric, format!("factor {}: metrics disagree with the oracle by {d:e}", record.infix));
                }
            }
            Ok(Scored { record, values, metrics })
        })
        .collect::<Outcome<Vec<_>>>()?;
    Ok((scored, panel))
}

#[derive(Debug, Serialize)]
struct FactorReport<'a> {
    infix: &'a str,
    #[serde(flatten)]
    metrics: &'a FactorMetrics,
}

#[derive(Debug, Serialize)]
struct EvalReport<'a> {
    master_seed: u64,
    oracle_checked: bool,
    factors: Vec<FactorReport<'a>>,
}

pub fn eval_cmd(cfg: &RunConfig) -> Outcome {
    let out = required(&cfg.io.out, "--out")?;
    let (scored, _) = score_factors(cfg)?;
    let report = EvalReport {
        master_seed: cfg.seed,
        oracle_checked: cfg.eval.oracle,
        factors: scored.iter().map(|s| FactorReport { infix: &s.record.infix, metrics: &s.metrics }).collect(),
    };
    write_json(out, &report)?;
    cfg.snapshot(out).or_exit(Exit::Data)?;
    for s in &scored {
        let f = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
        eprintln!(
            "{}  IC* {}  RankIC* {}  IR* {}  R2 {}",
            s.record.infix,
            f(s.metrics.ic),
            f(s.metrics.rank_ic),
            f(s.metrics.ir),
            f(s.metrics.r2)
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct PoolMember<'a> {
    infix: &'a str,
    weight: f64,
}

#[derive(Debug, Serialize)]
struct BacktestSummary<'a> {
    master_seed: u64,
    top_k: usize,
    cost: f64,
    pool: Vec<PoolMember<'a>>,
    final_nav: f64,
    degenerate: bool,
    report: &'a eval::BacktestReport,
}

pub fn backtest_cmd(cfg: &RunConfig) -> Outcome {
    let out = required(&cfg.io.out, "--out")?;
    if cfg.eval.top_k == 0 {
        return fail(Exit::Usage, "--top must be at least 1");
    }
    let (scored, panel) = score_factors(cfg)?;
    // factors without a defined IC* carry no weight
    let usable: Vec<&Scored> = scored.iter().filter(|s| s.metrics.ic.is_some()).collect();
    let cands: Vec<PoolCandidate> =
        usable.iter().map(|s| PoolCandidate { ic: s.metrics.ic.unwrap_or(0.0), values: s.values.clone() }).collect();
    let pool = filter_pool(&cands, cfg.eval.corr_threshold, cfg.eval.pool_cap);
    if pool.is_empty() {
        return fail(Exit::Data, "empty factor pool: no factor has a defined IC* on this data");
    }
    let weighted: Vec<(f64, &DailyPanel)> = pool.iter().map(|&i| (cands[i].ic, &cands[i].values)).collect();
    let scores = combine_scores(&weighted);
    let report = backtest(&scores, &market::forward_returns(&panel), cfg.eval.top_k, cfg.eval.cost);
    let mut w = create(out)?;
    report.write_csv(&mut w).or_exit(Exit::Data)?;
    w.flush().or_exit(Exit::Data)?;
    let summary = BacktestSummary {
        master_seed: cfg.seed,
        top_k: cfg.eval.top_k,
        cost: cfg.eval.cost,
        pool: pool.iter().map(|&i| PoolMember { infix: &usable[i].record.infix, weight: cands[i].ic }).collect(),
        final_nav: report.final_nav(),
        degenerate: report.degenerate,
        report: &report,
    };
    write_json(&sibling(out, "json"), &summary)?;
    cfg.snapshot(out).or_exit(Exit::Data)?;
    eprintln!("{} factor(s) in pool; final NAV {:.6} over {} day(s)", pool.len(), report.final_nav(), report.days.len());
    Ok(())
}
