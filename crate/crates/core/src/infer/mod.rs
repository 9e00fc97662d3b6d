//! Candidate mining: standardize, decode K candidates per bag, rank and
//! dedup the pool, refine constants with BFGS, map back to raw units.

pub mod bfgs;
pub mod toy;

use ndarray::ArrayView2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bag::{Provenance, SampleBag};
use crate::codec::{decode_expression, encode_points, CodecError, Token};
use crate::eval::r_squared;
use crate::expr::{
    evaluate, fingerprint, grad_constants, probe_matrix, substitute_affine, Expression, FingerprintSet, OperatorSet,
};
use crate::model::{decode_candidates, Checkpoint, DecodeMode, DecodeOptions, Grammar, ModelError, Params};
use crate::par;
use bfgs::{minimize, BfgsOptions};

/// Squared-error contribution of a point where the candidate is undefined.
pub const INVALID_PENALTY: f64 = 1e6;
/// Column standard deviations below this are replaced by 1.
pub const DEGENERATE_SD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Points per bag fed to the model.
    pub bag_size: usize,
    /// B: bags decoded.
    pub bags: usize,
    /// K: candidates decoded per bag.
    pub candidates_per_bag: usize,
    /// C: candidates kept for refinement.
    pub keep: usize,
    pub subset_cap: usize,
    pub bfgs_max_iter: usize,
    pub bfgs_grad_tol: f64,
    /// Standardize targets as well as inputs.
    pub standardize_targets: bool,
    pub decode: DecodeMode,
    /// Mask tokens that cannot extend a well-formed expression.
    pub constrain_grammar: bool,
    pub max_len: Option<usize>,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            bag_size: 400,
            bags: 100,
            candidates_per_bag: 10,
            keep: 10,
            subset_cap: 1024,
            bfgs_max_iter: 200,
            bfgs_grad_tol: 1e-10,
            standardize_targets: true,
            decode: DecodeMode::Beam,
            constrain_grammar: true,
            max_len: None,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        let bad = |m: &str| Err(InferError::Config(m.into()));
        if self.bags == 0 || self.candidates_per_bag == 0 || self.keep == 0 {
            return bad("bags, candidates_per_bag and keep must be positive");
        }
        if self.keep > self.bags * self.candidates_per_bag {
            return bad("keep must not exceed bags * candidates_per_bag");
        }
        if self.subset_cap == 0 || self.bag_size < 2 {
            return bad("subset_cap must be positive and bag_size at least 2");
        }
        if !(self.bfgs_grad_tol >= 0.0) {
            return bad("bfgs_grad_tol must be non-negative");
        }
        Ok(())
    }

    fn bfgs(&self) -> BfgsOptions {
        BfgsOptions { max_iter: self.bfgs_max_iter, grad_tol: self.bfgs_grad_tol }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error("invalid inference config: {0}")]
    Config(String),
    #[error("no bags to mine")]
    NoBags,
    #[error("bags have differing widths {0} and {1}")]
    WidthMismatch(usize, usize),
    #[error("bag width {width} exceeds model width {w_max}")]
    TooWide { width: usize, w_max: usize },
    #[error("mining failed: no parsable candidate among {proposed} decoded from {bags} bag(s)")]
    NoCandidates { bags: usize, proposed: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Affine map between raw and standardized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub y_mu: f64,
    pub y_sigma: f64,
    /// Some column or the target had sd below the threshold.
    pub degenerate: bool,
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

impl Scaling {
    /// Population statistics of `bag`; target left untouched unless
    /// `targets` is set.
    pub fn fit(bag: &SampleBag, targets: bool) -> Self {
        let mut degenerate = false;
        let mut fix = |sd: f64| {
            if sd < DEGENERATE_SD {
                degenerate = true;
                1.0
            } else {
                sd
            }
        };
        let (mut mu, mut sigma) = (Vec::new(), Vec::new());
        for col in bag.inputs.columns() {
            let (m, s) = mean_sd(col.iter().copied());
            mu.push(m);
            sigma.push(fix(s));
        }
        let (y_mu, y_sigma) = if targets {
            let (m, s) = mean_sd(bag.targets.iter().copied());
            (m, fix(s))
        } else {
            (0.0, 1.0)
        };
        Self { mu, sigma, y_mu, y_sigma, degenerate }
    }

    pub fn apply(&self, bag: &SampleBag) -> SampleBag {
        let mut inputs = bag.inputs.clone();
        for (w, mut col) in inputs.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mu[w]) / self.sigma[w]);
        }
        let targets = bag.targets.iter().map(|y| (y - self.y_mu) / self.y_sigma).collect();
        SampleBag { inputs, targets, provenance: bag.provenance.clone() }
    }

    /// Raw-unit expression equal to `y_sigma·e((x−μ)/σ) + y_mu`.
    pub fn unscale(&self, e: &Expression) -> Expression {
        substitute_affine(e, &self.mu, &self.sigma, self.y_mu, self.y_sigma).expect("scales are nonzero")
    }
}

/// Standardizes inputs and targets of a nonempty bag.
pub fn scale_bag(bag: &SampleBag) -> (SampleBag, Scaling) {
    let s = Scaling::fit(bag, true);
    (s.apply(bag), s)
}

/// Mean squared error with [`INVALID_PENALTY`] per undefined point.
pub fn fit_error(e: &Expression, inputs: ArrayView2<'_, f64>, targets: &[f64]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let r = evaluate(e, inputs);
    let sum: f64 = r
        .values
        .iter()
        .zip(&r.valid)
        .zip(targets)
        .map(|((v, ok), y)| if *ok { (v - y) * (v - y) } else { INVALID_PENALTY })
        .sum();
    let mse = sum / targets.len() as f64;
    if mse.is_finite() {
        mse
    } else {
        INVALID_PENALTY
    }
}

/// Uniform subset of at most `cap` rows, in original order.
pub fn subsample(bag: &SampleBag, cap: usize, seed: u64) -> SampleBag {
    if bag.len() <= cap {
        return bag.clone();
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), bag.len(), cap).into_vec();
    idx.sort_unstable();
    bag.select(&idx)
}

/// Splits a bag into shuffled chunks of `size` points; a short remainder is
/// dropped unless it is the only chunk.
pub fn split_into_bags(bag: &SampleBag, size: usize, seed: u64) -> Vec<SampleBag> {
    let mut idx: Vec<usize> = (0..bag.len()).collect();
    rand::seq::SliceRandom::shuffle(&mut idx[..], &mut ChaCha8Rng::seed_from_u64(seed));
    let chunks: Vec<&[usize]> = idx.chunks(size.max(1)).collect();
    let full = chunks.iter().filter(|c| c.len() == size).count();
    chunks
        .iter()
        .enumerate()
        .filter(|(_, c)| c.len() == size || full == 0)
        .map(|(part, c)| {
            let mut rows = c.to_vec();
            rows.sort_unstable();
            let mut b = bag.select(&rows);
            b.provenance = Provenance::Subset { parent: Box::new(bag.provenance.clone()), part };
            b
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub expr: Expression,
    /// True when BFGS strictly lowered the error.
    pub refined: bool,
    pub error_before: f64,
    pub error_after: f64,
    pub iterations: usize,
}

/// BFGS on the constants of `e`, minimizing [`fit_error`] over a subset of
/// at most `cfg.subset_cap` points, starting from the current constants.
/// Never returns a worse expression than it was given.
pub fn refine_constants(e: &Expression, bag: &SampleBag, cfg: &InferenceConfig) -> Refinement {
    let data = subsample(bag, cfg.subset_cap, cfg.seed);
    refine_on(e, &data, cfg)
}

fn refine_on(e: &Expression, data: &SampleBag, cfg: &InferenceConfig) -> Refinement {
    let before = fit_error(e, data.inputs.view(), &data.targets);
    let c0 = e.constants();
    let unchanged = |iterations| Refinement { expr: e.clone(), refined: false, error_before: before, error_after: before, iterations };
    if c0.is_empty() || data.is_empty() {
        return unchanged(0);
    }
    let n = data.len() as f64;
    let objective = |c: &[f64]| {
        let cand = e.with_constants(c).expect("constant count preserved");
        let g = grad_constants(&cand, data.inputs.view());
        let mut loss = 0.0;
        let mut grad = vec![0.0; c.len()];
        for (k, ((v, ok), y)) in g.values.iter().zip(&g.valid).zip(&data.targets).enumerate() {
            if !*ok {
                loss += INVALID_PENALTY;
                continue;
            }
            let r = v - y;
            loss += r * r;
            for (p, gp) in grad.iter_mut().enumerate() {
                *gp += 2.0 * r * g.jacobian[[k, p]];
            }
        }
        grad.iter_mut().for_each(|v| *v /= n);
        (loss / n, grad)
    };
    let r = minimize(objective, &c0, &cfg.bfgs());
    let cand = e.with_constants(&r.x).expect("constant count preserved");
    let after = fit_error(&cand, data.inputs.view(), &data.targets);
    if after < before {
        Refinement { expr: cand, refined: true, error_before: before, error_after: after, iterations: r.iterations }
    } else {
        unchanged(r.iterations)
    }
}

/// A parsed decoder output in standardized units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCandidate {
    pub expr: Expression,
    pub tokens: Vec<Token>,
    pub bag: usize,
    pub error: f64,
}

/// Scores every candidate on `data`, sorts ascending (stable), drops
/// fingerprint duplicates keeping the earlier one, returns the first `keep`.
pub fn rank_and_dedup(cands: Vec<RawCandidate>, data: &SampleBag, keep: usize) -> Vec<RawCandidate> {
    let errors = par::map(&cands, |c| fit_error(&c.expr, data.inputs.view(), &data.targets));
    let mut scored: Vec<RawCandidate> =
        cands.into_iter().zip(errors).map(|(c, error)| RawCandidate { error, ..c }).collect();
    scored.sort_by(|a, b| a.error.total_cmp(&b.error));
    let probe = probe_matrix(data.width().max(1));
    let mut seen = FingerprintSet::new();
    let mut out = Vec::with_capacity(keep);
    for c in scored {
        if out.len() == keep {
            break;
        }
        if seen.insert(fingerprint(&c.expr, probe.view())) {
            out.push(c);
        }
    }
    out
}

/// Decoder front end; lets tests force token sequences.
pub trait CandidateSource: Sync {
    /// Largest bag width accepted.
    fn max_width(&self) -> usize;
    /// Up to `k` token sequences for a standardized bag.
    fn propose(&self, bag: &SampleBag, k: usize) -> Result<Vec<Vec<Token>>, InferError>;
}

/// Candidates from a trained checkpoint.
#[derive(Debug, Clone)]
pub struct ModelSource {
    pub params: Params<f32>,
    pub operators: OperatorSet,
    pub mode: DecodeMode,
    pub constrain_grammar: bool,
    pub max_len: Option<usize>,
}

impl ModelSource {
    pub fn new(ck: &Checkpoint, cfg: &InferenceConfig) -> Self {
        Self {
            params: ck.params.clone(),
            operators: ck.generator.as_ref().map(|g| g.operators.clone()).unwrap_or_default(),
            mode: cfg.decode,
            constrain_grammar: cfg.constrain_grammar,
            max_len: cfg.max_len,
        }
    }
}

impl CandidateSource for ModelSource {
    fn max_width(&self) -> usize {
        self.params.layout.config.w_max
    }

    fn propose(&self, bag: &SampleBag, k: usize) -> Result<Vec<Vec<Token>>, InferError> {
        let grid = encode_points(bag, self.max_width())?;
        let grammar = self.constrain_grammar.then(|| Grammar {
            width: bag.width(),
            binary: self.operators.binary.clone(),
            unary: self.operators.unary.clone(),
        });
        let opts = DecodeOptions { k, mode: self.mode, max_len: self.max_len, grammar };
        Ok(decode_candidates(&self.params, &grid, &opts)?.into_iter().map(|d| d.tokens).collect())
    }
}

/// A mined factor in raw units.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub expr: Expression,
    /// Refined expression in standardized units.
    pub scaled: Expression,
    pub tokens: Vec<Token>,
    /// MSE on standardized targets over all pooled points.
    pub fit_error: f64,
    pub r2: Option<f64>,
    /// Subset error before and after refinement.
    pub pre_refinement_error: f64,
    pub refinement_error: f64,
    pub refined: bool,
    pub bag: usize,
    pub provenance: Provenance,
}

#[derive(Debug, Clone)]
pub struct MineOutcome {
    /// At most `keep`, ascending by `fit_error`.
    pub candidates: Vec<Candidate>,
    pub bags_used: Vec<usize>,
    pub proposed: usize,
    pub parsed: usize,
    pub scaling: Scaling,
}

/// Runs the full pipeline on bags of equal width.
pub fn mine(bags: &[SampleBag], source: &dyn CandidateSource, cfg: &InferenceConfig) -> Result<MineOutcome, InferError> {
    cfg.validate()?;
    let first = bags.first().ok_or(InferError::NoBags)?;
    let width = first.width();
    if let Some(b) = bags.iter().find(|b| b.width() != width) {
        return Err(InferError::WidthMismatch(width, b.width()));
    }
    if width > source.max_width() {
        return Err(InferError::TooWide { width, w_max: source.max_width() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut chosen: Vec<usize> = if bags.len() > cfg.bags {
        sample(&mut rng, bags.len(), cfg.bags).into_vec()
    } else {
        (0..bags.len()).collect()
    };
    chosen.sort_unstable();
    let picked: Vec<SampleBag> = chosen
        .iter()
        .enumerate()
        .map(|(j, &i)| subsample(&bags[i], cfg.bag_size, cfg.seed.wrapping_add(j as u64 + 1)))
        .collect();
    let pooled = SampleBag::concat(&picked).ok_or(InferError::NoBags)?;
    let scaling = Scaling::fit(&pooled, cfg.standardize_targets);
    let scaled: Vec<SampleBag> = picked.iter().map(|b| scaling.apply(b)).collect();

    let proposals = par::map(&scaled, |b| source.propose(b, cfg.candidates_per_bag));
    let mut pool = Vec::new();
    let mut proposed = 0;
    for (j, p) in proposals.into_iter().enumerate() {
        let p = p?;
        proposed += p.len();
        for tokens in p {
            if let Ok(expr) = decode_expression(&tokens) {
                if expr.arity() <= width {
                    pool.push(RawCandidate { expr, tokens, bag: chosen[j], error: 0.0 });
                }
            }
        }
    }
    let parsed = pool.len();
    if pool.is_empty() {
        return Err(InferError::NoCandidates { bags: chosen.len(), proposed });
    }
    let scaled_pool = scaling.apply(&pooled);
    let data = subsample(&scaled_pool, cfg.subset_cap, cfg.seed);
    let ranked = rank_and_dedup(pool, &data, cfg.keep);
    let refined = par::map(&ranked, |c| refine_on(&c.expr, &data, cfg));

    let mut candidates: Vec<Candidate> = ranked
        .into_iter()
        .zip(refined)
        .map(|(c, r)| {
            let expr = scaling.unscale(&r.expr);
            let pred = evaluate(&expr, pooled.inputs.view());
            let fit_error = fit_error(&r.expr, scaled_pool.inputs.view(), &scaled_pool.targets);
            let r2 = pred.all_valid().then(|| r_squared(&pooled.targets, &pred.values).ok()).flatten();
            Candidate {
                expr,
                scaled: r.expr,
                tokens: c.tokens,
                fit_error,
                r2,
                pre_refinement_error: r.error_before,
                refinement_error: r.error_after,
                refined: r.refined,
                bag: c.bag,
                provenance: bags[c.bag].provenance.clone(),
            }
        })
        .collect();
    candidates.sort_by(|a, b| a.fit_error.total_cmp(&b.fit_error));
    Ok(MineOutcome { candidates, bags_used: chosen, proposed, parsed, scaling })
}

/// Prefix rendering with full-precision constants.
pub fn prefix_strings(e: &Expression) -> Vec<String> {
    let mut out = Vec::new();
    e.walk(&mut |n| {
        out.push(match n {
            Expression::Const(c) => format!("{c:e}"),
            Expression::Var(w) => format!("x{w}"),
            Expression::Unary(op, _) => op.name().to_string(),
            Expression::Binary(op, _, _) => op.name().to_string(),
        })
    });
    out
}

/// Serialized form of a mined factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub infix: String,
    pub prefix: Vec<String>,
    pub constants: Vec<f64>,
    pub fit_error: f64,
    #[serde(rename = "R2")]
    pub r2: Option<f64>,
    pub expression: Expression,
    pub provenance: FactorProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorProvenance {
    pub bag: usize,
    pub source: Provenance,
    pub decoded: Vec<String>,
    pub refined: bool,
    pub pre_refinement_error: f64,
    pub refinement_error: f64,
}

impl FactorRecord {
    pub fn new(c: &Candidate, names: &[&str]) -> Self {
        Self {
            infix: c.expr.to_infix_with(names),
            prefix: prefix_strings(&c.expr),
            constants: c.expr.constants(),
            fit_error: c.fit_error,
            r2: c.r2,
            expression: c.expr.clone(),
            provenance: FactorProvenance {
                bag: c.bag,
                source: c.provenance.clone(),
                decoded: c.tokens.iter().map(|t| t.to_string()).collect(),
                refined: c.refined,
                pre_refinement_error: c.pre_refinement_error,
                refinement_error: c.refinement_error,
            },
        }
    }
}
