use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use super::checkpoint::{Checkpoint, Progress, RngState};
use super::network::{evaluate_batch, loss_and_grads, Sample};
use super::params::{Layout, Params};
use super::{ModelConfig, ModelError};
use crate::synth::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub initial_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Upper bound on summed target lengths per batch.
    pub batch_tokens: usize,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub val_fraction: f64,
    /// Validation samples scored at each log step.
    pub val_max: usize,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 10_000,
            peak_lr: 2e-3,
            initial_lr: 2e-7,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_tokens: 1500,
            epochs: 1,
            max_steps: None,
            seed: 0,
            val_fraction: 0.1,
            val_max: 500,
            log_interval: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.peak_lr > self.initial_lr && self.initial_lr >= 0.0) {
            return Err("peak_lr must exceed initial_lr >= 0".into());
        }
        if self.warmup_steps < 1 {
            return Err("warmup_steps must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err("val_fraction must lie in [0, 1)".into());
        }
        if self.batch_tokens == 0 || self.log_interval == 0 {
            return Err("batch_tokens and log_interval must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from `initial_lr` to `peak_lr`, then `peak·√(warmup/step)`.
pub fn lr_schedule(step: u64, tc: &TrainConfig) -> f64 {
    let w = tc.warmup_steps as f64;
    let s = step as f64;
    if step <= tc.warmup_steps {
        tc.initial_lr + (tc.peak_lr - tc.initial_lr) * s / w
    } else {
        tc.peak_lr * (w / s).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Applies one update and returns true, or leaves everything untouched and
/// returns false when the update would produce a non-finite parameter.
pub fn adam_step(p: &mut Params<f32>, g: &Params<f32>, s: &mut AdamState, lr: f64, tc: &TrainConfig) -> bool {
    let t = s.t + 1;
    let (b1, b2) = (tc.beta1 as f32, tc.beta2 as f32);
    let c1 = 1.0 - tc.beta1.powi(t as i32);
    let c2 = 1.0 - tc.beta2.powi(t as i32);
    let step = (lr * c2.sqrt() / c1) as f32;
    let eps = (tc.adam_eps * c2.sqrt()) as f32;
    let update = |w: f32, gr: f32, m: f32, v: f32| {
        let m = b1 * m + (1.0 - b1) * gr;
        let v = b2 * v + (1.0 - b2) * gr * gr;
        (w - step * m / (v.sqrt() + eps), m, v)
    };
    let finite = p.data.iter().zip(&g.data).zip(&s.m).zip(&s.v).all(|(((&w, &gr), &m), &v)| {
        let (w, m, v) = update(w, gr, m, v);
        w.is_finite() && m.is_finite() && v.is_finite()
    });
    if !finite {
        return false;
    }
    for (((w, &gr), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut s.m).zip(&mut s.v) {
        (*w, *m, *v) = update(*w, gr, *m, *v);
    }
    s.t = t;
    true
}

/// Disjoint `(train, validation)` positions; the validation share is
/// `ceil(fraction · n)`.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7a11_da7e));
    let k = ((fraction * n as f64).ceil() as usize).min(n.saturating_sub(1));
    let val = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

/// Batches of sample positions grouped by target length.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
}

impl BatchPlan {
    /// Shuffles, stably sorts by target length, cuts greedily at the token
    /// budget, then shuffles batch order.
    pub fn new(samples: &[Sample], positions: &[usize], budget: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order = positions.to_vec();
        order.shuffle(rng);
        order.sort_by_key(|&i| samples[i].target.len());
        let mut batches = Vec::new();
        let mut cur = Vec::new();
        let mut used = 0;
        for i in order {
            let len = samples[i].target.len();
            if !cur.is_empty() && used + len > budget {
                batches.push(std::mem::take(&mut cur));
                used = 0;
            }
            cur.push(i);
            used += len;
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
        batches.shuffle(rng);
        Self { batches }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

impl TrainLogRow {
    pub const HEADER: [&'static str; 5] = ["step", "lr", "train_loss", "val_loss", "val_acc"];

    pub fn record(&self) -> [String; 5] {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        [self.step.to_string(), format!("{:e}", self.lr), format!("{:.6}", self.train_loss), opt(self.val_loss), opt(self.val_acc)]
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("empty corpus")]
    Empty,
    #[error("training diverged at batch {batch}")]
    Diverged { batch: u64, last_good: Box<Checkpoint> },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the best validation token accuracy.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// Runs Adam over bucketed batches. `on_log` sees every log row and, when the
/// validation accuracy improved, the new best checkpoint.
pub fn train(
    samples: &[Sample],
    mc: &ModelConfig,
    tc: &TrainConfig,
    generator: Option<GeneratorConfig>,
    resume: Option<Checkpoint>,
    mut on_log: impl FnMut(&TrainLogRow, Option<&Checkpoint>),
) -> Result<TrainOutcome, TrainError> {
    mc.validate().map_err(TrainError::Config)?;
    tc.validate().map_err(TrainError::Config)?;
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    let (train_pos, val_pos) = split_validation(samples.len(), tc.val_fraction, tc.seed);
    let val: Vec<Sample> = val_pos.iter().take(tc.val_max).map(|&i| samples[i].clone()).collect();

    let mut ck = match resume {
        Some(c) => {
            if &c.model != mc {
                return Err(TrainError::Config("checkpoint model config differs".into()));
            }
            Checkpoint { train: tc.clone(), ..c }
        }
        None => {
            let layout = Arc::new(Layout::new(mc));
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            let params = Params::<f32>::init(layout.clone(), &mut rng);
            let n = layout.total();
            Checkpoint {
                model: mc.clone(),
                train: tc.clone(),
                generator,
                params,
                adam: AdamState::new(n),
                progress: Progress {
                    step: 0,
                    epoch: 0,
                    batch_pos: 0,
                    rng: RngState::capture(&rng),
                    best_val_acc: None,
                },
            }
        }
    };
    let mut best = ck.clone();
    let mut log = Vec::new();
    let mut loss_acc = 0.0;
    let mut loss_n = 0usize;
    let done = |step: u64| tc.max_steps.is_some_and(|m| step >= m);

    'epochs: while ck.progress.epoch < tc.epochs && !done(ck.progress.step) {
        let mut rng = ck.progress.rng.restore();
        let plan = BatchPlan::new(samples, &train_pos, tc.batch_tokens, &mut rng);
        while ck.progress.batch_pos < plan.batches.len() {
            if done(ck.progress.step) {
                break 'epochs;
            }
            let batch: Vec<Sample> = plan.batches[ck.progress.batch_pos].iter().map(|&i| samples[i].clone()).collect();
            let step = ck.progress.step;
            let lr = lr_schedule(step, tc);
            let (st, g) = match loss_and_grads(&ck.params, &batch, step) {
                Ok(x) => x,
                Err(ModelError::NonFiniteLoss { batch }) => {
                    return Err(TrainError::Diverged { batch, last_good: Box::new(ck) })
                }
                Err(e) => return Err(e.into()),
            };
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Diverged { batch: step, last_good: Box::new(ck) });
            }
            if !adam_step(&mut ck.params, &g, &mut ck.adam, lr, tc) {
                return Err(TrainError::Diverged { batch: step, last_good: Box::new(ck) });
            }
            ck.progress.step += 1;
            ck.progress.batch_pos += 1;
            loss_acc += st.mean_loss();
            loss_n += 1;
            if ck.progress.step % tc.log_interval == 0 {
                let (val_loss, val_acc) = if val.is_empty() {
                    (None, None)
                } else {
                    let vs = evaluate_batch(&ck.params, &val)?;
                    (Some(vs.mean_loss()), Some(vs.accuracy()))
                };
                let row = TrainLogRow {
                    step: ck.progress.step,
                    lr,
                    train_loss: loss_acc / loss_n.max(1) as f64,
                    val_loss,
                    val_acc,
                };
                loss_acc = 0.0;
                loss_n = 0;
                let improved = val_acc.is_some_and(|a| ck.progress.best_val_acc.is_none_or(|b| a > b));
                if improved {
                    ck.progress.best_val_acc = val_acc;
                    best = ck.clone();
                }
                on_log(&row, improved.then_some(&best));
                log.push(row);
            }
        }
        ck.progress.epoch += 1;
        ck.progress.batch_pos = 0;
        ck.progress.rng = RngState::capture(&rng);
    }
    if best.progress.best_val_acc.is_none() {
        best = ck.clone();
    }
    best.progress.best_val_acc = ck.progress.best_val_acc;
    Ok(TrainOutcome { best, last: ck, log })
}
