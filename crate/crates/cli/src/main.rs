//! `factorforge`: corpus generation, training, mining, evaluation and
//! backtesting from one TOML config.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
//! failure.

// `!(x <= t)` style checks are written so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Exit, Failure, OrExit, Outcome};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "factorforge", version, about = "Formulaic high-frequency risk factor mining")]
struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.peak_lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; replaces `seed` from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. One thread is bit-reproducible; so is every other
    /// count, since reductions run in a fixed order.
    #[arg(long, global = true, env = "FACTORFORGE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic NDJSON corpus plus manifest.
    GenCorpus {
        /// Number of samples.
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a corpus; writes the best checkpoint and a CSV log.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint, typically `<out>.last.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Mine factor candidates from minute-bar CSV data.
    Mine(MineArgs),
    /// Compute IC*, RankIC*, IR* and R² for mined factors.
    Eval {
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Recompute every metric brute-force and fail on disagreement.
        #[arg(long)]
        oracle: bool,
    },
    /// Simulate a top-k portfolio scored by the filtered factor pool.
    Backtest {
        #[arg(long)]
        factors: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stocks held per day.
        #[arg(long)]
        top: Option<usize>,
        /// Cost per unit of turnover.
        #[arg(long)]
        cost: Option<f64>,
    },
    /// Fast internal consistency checks, or the toy recovery experiment.
    Selftest {
        /// Train the toy model and mine held-out planted expressions.
        #[arg(long)]
        toy: bool,
        /// Seconds-scale toy variant.
        #[arg(long, requires = "toy")]
        smoke: bool,
        /// Held-out bags for the toy experiment.
        #[arg(long, requires = "toy")]
        held_out: Option<usize>,
        /// Directory caching trained toy checkpoints.
        #[arg(long, requires = "toy")]
        cache: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DecodeArg {
    Beam,
    Sample,
}

#[derive(Debug, Args)]
struct MineArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    bags: Option<usize>,
    /// Candidates decoded per bag.
    #[arg(long)]
    cands: Option<usize>,
    /// Candidates kept after ranking.
    #[arg(long)]
    keep: Option<usize>,
    #[arg(long)]
    bag_size: Option<usize>,
    #[arg(long, value_enum)]
    decode: Option<DecodeArg>,
    /// Sampling temperature; implies `--decode sample`.
    #[arg(long)]
    temperature: Option<f64>,
    /// Mine planted expressions from the checkpoint's generator instead of
    /// market data, reporting recovery R².
    #[arg(long)]
    selftest: bool,
    /// Planted expressions mined in self-test mode.
    #[arg(long, default_value_t = 5, requires = "selftest")]
    trials: u64,
}

fn path_set(key: &str, p: &Option<PathBuf>, out: &mut Vec<String>) {
    if let Some(p) = p {
        out.push(format!("io.{key}={}", toml_string(&p.to_string_lossy())));
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn num_set<T: ToString>(key: &str, v: Option<T>, out: &mut Vec<String>) {
    if let Some(v) = v {
        out.push(format!("{key}={}", v.to_string()));
    }
}

/// Flags become overrides applied after `--set`, so flags win.
fn flag_overrides(cli: &Cli) -> Vec<String> {
    let mut o = cli.overrides.clone();
    num_set("seed", cli.seed, &mut o);
    match &cli.command {
        Command::GenCorpus { n, out } => {
            num_set("samples", *n, &mut o);
            path_set("out", out, &mut o);
        }
        Command::Train { corpus, out, resume } => {
            path_set("corpus", corpus, &mut o);
            path_set("out", out, &mut o);
            path_set("resume", resume, &mut o);
        }
        Command::Mine(m) => {
            path_set("checkpoint", &m.checkpoint, &mut o);
            path_set("data", &m.data, &mut o);
            path_set("out", &m.out, &mut o);
            num_set("inference.bags", m.bags, &mut o);
            num_set("inference.candidates_per_bag", m.cands, &mut o);
            num_set("inference.keep", m.keep, &mut o);
            num_set("inference.bag_size", m.bag_size, &mut o);
            match (m.decode, m.temperature) {
                (Some(DecodeArg::Beam), _) => o.push("inference.decode={mode=\"beam\"}".into()),
                (Some(DecodeArg::Sample), t) | (None, t @ Some(_)) => {
                    o.push(format!("inference.decode={{mode=\"sample\", temperature={:?}, seed=0}}", t.unwrap_or(1.0)))
                }
                (None, None) => {}
            }
        }
        Command::Eval { factors, data, out, oracle } => {
            path_set("factors", factors, &mut o);
            path_set("data", data, &mut o);
            path_set("out", out, &mut o);
            if *oracle {
                o.push("eval.oracle=true".into());
            }
        }
        Command::Backtest { factors, data, out, top, cost } => {
            path_set("factors", factors, &mut o);
            path_set("data", data, &mut o);
            path_set("out", out, &mut o);
            num_set("eval.top_k", *top, &mut o);
            num_set("eval.cost", cost.map(|c| format!("{c:?}")), &mut o);
        }
        Command::Selftest { .. } => {}
    }
    o
}

fn run(cli: &Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure { exit: Exit::Usage, error: anyhow::anyhow!("--threads must be at least 1") });
        }
        factorforge::par::init_threads(n).map_err(anyhow::Error::msg).or_exit(Exit::Usage)?;
    }
    if let Command::Mine(MineArgs { decode: Some(DecodeArg::Beam), temperature: Some(_), .. }) = &cli.command {
        return Err(Failure { exit: Exit::Usage, error: anyhow::anyhow!("--temperature needs --decode sample") });
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &flag_overrides(cli)).or_exit(Exit::Usage)?;
    match &cli.command {
        Command::GenCorpus { .. } => commands::gen_corpus(&cfg),
        Command::Train { .. } => commands::train_cmd(&cfg),
        Command::Mine(m) if m.selftest => commands::mine_selftest(&cfg, m.trials),
        Command::Mine(_) => commands::mine_cmd(&cfg),
        Command::Eval { .. } => commands::eval_cmd(&cfg),
        Command::Backtest { .. } => commands::backtest_cmd(&cfg),
        Command::Selftest { toy: true, smoke, held_out, cache } => selftest::run_toy(*smoke, *held_out, cache.clone()),
        Command::Selftest { .. } => selftest::run_checks(&cfg.generator, cfg.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit as u8)
        }
    }
}
