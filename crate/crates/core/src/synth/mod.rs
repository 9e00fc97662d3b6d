//! Synthetic `(point set, expression)` generator.
//!
//! Expressions are random binary trees (uniform over shapes with a given
//! number of internal nodes), decorated with unary operators and random
//! affine coefficients. Inputs come from a rotated mixture of Gaussian and
//! uniform clusters, standardized per column. Any attempt whose targets
//! leave the domain or exceed 1e100 is discarded and regenerated.

mod corpus;
mod haar;
mod tree;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bag::{Provenance, SampleBag};
use crate::expr::{evaluate, Expression, OperatorSet};

pub use crate::bag::SampleBag as Bag;
pub use corpus::{generate_corpus, read_corpus, write_corpus, CorpusLine, CorpusManifest};
pub use haar::{haar_rotation, householder_qr};
pub use tree::{random_binary_shape, ShapeCounter};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("no valid sample after {attempts} attempts (seed {seed}, index {index})")]
    RetriesExhausted { seed: u64, index: u64, attempts: usize },
    #[error("cannot standardize {0} point(s); need at least 2")]
    TooFewPoints(usize),
    #[error("degenerate input columns after {0} resamples")]
    Degenerate(usize),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] crate::codec::CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `sign * mantissa * 10^exponent` with sign uniform on {-1, 1}, mantissa
/// uniform on (0, 1) and exponent uniform on the integer range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineDistribution {
    pub exponent_min: i32,
    pub exponent_max: i32,
}

impl Default for AffineDistribution {
    fn default() -> Self {
        Self { exponent_min: -2, exponent_max: 2 }
    }
}

impl AffineDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let mantissa: f64 = loop {
            let m: f64 = rng.gen();
            if m > 0.0 {
                break m;
            }
        };
        let exponent = rng.gen_range(self.exponent_min..=self.exponent_max);
        sign * mantissa * 10f64.powi(exponent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub w_max: usize,
    /// Binary operator count is drawn from `W-1 ..= W + b_max`.
    pub b_max: usize,
    pub u_max: usize,
    pub operators: OperatorSet,
    /// Points per bag are drawn from `10 * W ..= m_max`.
    pub m_max: usize,
    pub c_max: usize,
    pub affine: AffineDistribution,
    pub p_drop: f64,
    /// Depth limit on the operator skeleton before affine decoration.
    pub max_depth: Option<usize>,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            w_max: 10,
            b_max: 5,
            u_max: 5,
            operators: OperatorSet::default(),
            m_max: 200,
            c_max: 10,
            affine: AffineDistribution::default(),
            p_drop: 0.1,
            max_depth: None,
            max_retries: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.w_max == 0 || self.c_max == 0 || self.max_retries == 0 {
            return err("w_max, c_max and max_retries must be positive");
        }
        if self.m_max < 10 * self.w_max {
            return err("m_max must be at least 10 * w_max");
        }
        if self.operators.binary.is_empty() {
            return err("at least one binary operator is required");
        }
        if self.u_max > 0 && self.operators.unary.is_empty() {
            return err("u_max > 0 needs unary operators");
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return err("p_drop must lie in [0, 1]");
        }
        if self.affine.exponent_min > self.affine.exponent_max {
            return err("affine exponent range is empty");
        }
        if let Some(d) = self.max_depth {
            // a balanced tree over w_max leaves must fit
            let need = (self.w_max as f64).log2().ceil() as usize;
            if d < need {
                return err("max_depth too small for w_max");
            }
        }
        Ok(())
    }
}

/// Per-sample RNG stream derived from a master seed.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn sample_expression<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Expression {
    let w = rng.gen_range(1..=cfg.w_max);
    sample_expression_for_width(cfg, w, rng)
}

/// Samples an expression over exactly `w` variables.
pub fn sample_expression_for_width<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    w: usize,
    rng: &mut R,
) -> Expression {
    assert!(w >= 1);
    let skeleton = loop {
        let b = rng.gen_range(w - 1..=w + cfg.b_max);
        let shape = random_binary_shape(b, rng);
        // every variable appears once, remaining leaves uniform
        let mut leaves: Vec<usize> = (0..w).collect();
        leaves.extend((w..=b).map(|_| rng.gen_range(0..w)));
        leaves.shuffle(rng);
        let mut tree = tree::build_from_shape(&shape, &leaves, &cfg.operators.binary, rng);
        let u = rng.gen_range(0..=cfg.u_max);
        for _ in 0..u {
            let op = *cfg.operators.unary.choose(rng).expect("validated");
            tree = tree::insert_unary(tree, op, rng);
        }
        if cfg.max_depth.is_none_or(|d| tree.depth() <= d) {
            break tree;
        }
    };
    let dropped: Vec<bool> = (0..w).map(|_| rng.gen_bool(cfg.p_drop)).collect();
    tree::decorate_affine(&skeleton, &cfg.affine, &dropped, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterFamily {
    Gaussian,
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub weight: f64,
    pub centroid: Vec<f64>,
    pub scale: Vec<f64>,
    pub family: ClusterFamily,
}

/// Draws `c ~ U{1, c_max}` clusters with normalized weights.
pub fn sample_clusters<R: Rng + ?Sized>(w: usize, c_max: usize, rng: &mut R) -> Vec<ClusterSpec> {
    let c = rng.gen_range(1..=c_max);
    let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(f64::EPSILON..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter()
        .map(|r| ClusterSpec {
            weight: r / total,
            centroid: (0..w).map(|_| StandardNormal.sample(rng)).collect(),
            scale: (0..w).map(|_| rng.gen_range(f64::EPSILON..1.0)).collect(),
            family: if rng.gen_bool(0.5) { ClusterFamily::Gaussian } else { ClusterFamily::Uniform },
        })
        .collect()
}

/// Points per cluster: floor of `weight * m`, remainder to the last cluster.
pub fn cluster_counts(clusters: &[ClusterSpec], m: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = clusters.iter().map(|c| (c.weight * m as f64).floor() as usize).collect();
    let used: usize = counts.iter().sum();
    if let Some(last) = counts.last_mut() {
        *last += m.saturating_sub(used);
    }
    counts
}

/// Raw (unstandardized) mixture points: each cluster is sampled around its
/// centroid and its spread is rotated by a fresh Haar matrix.
pub fn sample_mixture<R: Rng + ?Sized>(clusters: &[ClusterSpec], m: usize, rng: &mut R) -> Array2<f64> {
    let w = clusters.first().map_or(0, |c| c.centroid.len());
    let counts = cluster_counts(clusters, m);
    let mut out = Array2::zeros((m, w));
    let mut row = 0;
    let sqrt3 = 3f64.sqrt();
    for (cl, &n) in clusters.iter().zip(&counts) {
        let q = haar_rotation(w, rng);
        for _ in 0..n {
            let z: Vec<f64> = (0..w)
                .map(|j| {
                    let u: f64 = match cl.family {
                        ClusterFamily::Gaussian => StandardNormal.sample(rng),
                        ClusterFamily::Uniform => rng.gen_range(-sqrt3..sqrt3),
                    };
                    u * cl.scale[j]
                })
                .collect();
            for i in 0..w {
                let rot: f64 = (0..w).map(|j| q[[i, j]] * z[j]).sum();
                out[[row, i]] = cl.centroid[i] + rot;
            }
            row += 1;
        }
    }
    out
}

/// Standardizes columns in place to mean 0 and population sd 1. Returns
/// false if some column has (numerically) zero variance.
pub fn standardize_columns(x: &mut Array2<f64>) -> bool {
    for mut col in x.axis_iter_mut(Axis(1)) {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        if !(sd > 1e-12) {
            return false;
        }
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    true
}

/// `m` standardized points in `w` dimensions from a random cluster mixture.
pub fn sample_inputs<R: Rng + ?Sized>(
    w: usize,
    m: usize,
    cfg: &GeneratorConfig,
    rng: &mut R,
) -> Result<Array2<f64>, SynthError> {
    if m < 2 {
        return Err(SynthError::TooFewPoints(m));
    }
    for _ in 0..cfg.max_retries {
        let clusters = sample_clusters(w, cfg.c_max, rng);
        let mut x = sample_mixture(&clusters, m, rng);
        if standardize_columns(&mut x) {
            return Ok(x);
        }
    }
    Err(SynthError::Degenerate(cfg.max_retries))
}

/// Targets for `expr` on `inputs`, or `None` if any point is invalid.
pub fn targets_if_valid(expr: &Expression, inputs: &Array2<f64>) -> Option<Vec<f64>> {
    let r = evaluate(expr, inputs.view());
    r.all_valid().then_some(r.values)
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub bag: SampleBag,
    pub expr: Expression,
}

/// One valid `(bag, expression)` pair, retrying rejected attempts.
pub fn make_training_sample<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    rng: &mut R,
    provenance: Provenance,
) -> Result<TrainingSample, SynthError> {
    make_training_sample_with(cfg, rng, provenance, |rng| sample_expression(cfg, rng))
}

/// Retry loop with a caller-supplied expression source.
pub fn make_training_sample_with<R, F>(
    cfg: &GeneratorConfig,
    rng: &mut R,
    provenance: Provenance,
    mut next_expr: F,
) -> Result<TrainingSample, SynthError>
where
    R: Rng + ?Sized,
    F: FnMut(&mut R) -> Expression,
{
    for _ in 0..cfg.max_retries {
        let expr = next_expr(rng);
        let w = expr.arity().max(1);
        let m = rng.gen_range((10 * w).min(cfg.m_max)..=cfg.m_max);
        let inputs = sample_inputs(w, m, cfg, rng)?;
        if let Some(targets) = targets_if_valid(&expr, &inputs) {
            return Ok(TrainingSample { bag: SampleBag::new(inputs, targets, provenance), expr });
        }
    }
    let (seed, index) = match provenance {
        Provenance::Synthetic { seed, index } => (seed, index),
        _ => (0, 0),
    };
    Err(SynthError::RetriesExhausted { seed, index, attempts: cfg.max_retries })
}

/// The `index`-th sample of the corpus with master seed `seed`.
pub fn sample_at(cfg: &GeneratorConfig, seed: u64, index: u64) -> Result<TrainingSample, SynthError> {
    let mut rng = sample_rng(seed, index);
    make_training_sample(cfg, &mut rng, Provenance::Synthetic { seed, index })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::UnaryOp;

    #[test]
    fn forced_width_references_all_variables() {
        let cfg = GeneratorConfig { p_drop: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let e = sample_expression_for_width(&cfg, 3, &mut rng);
            assert_eq!(e.variables(), vec![0, 1, 2]);
        }
    }

    #[test]
    fn no_unary_when_u_max_zero() {
        let cfg = GeneratorConfig { u_max: 0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            assert_eq!(sample_expression(&cfg, &mut rng).unary_count(), 0);
        }
    }

    #[test]
    fn dropout_zeroes_coefficients() {
        let cfg = GeneratorConfig { p_drop: 1.0, u_max: 0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = sample_expression_for_width(&cfg, 2, &mut rng);
        // every variable is multiplied by zero, so the function is constant
        let x = Array2::from_shape_fn((5, 2), |(i, j)| (i * 2 + j) as f64 + 0.5);
        let r = evaluate(&e, x.view());
        if r.all_valid() {
            assert!(r.values.iter().all(|&v| (v - r.values[0]).abs() < 1e-9 * v.abs().max(1.0)));
        }
    }

    #[test]
    fn affine_values_in_range() {
        let d = AffineDistribution::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let v = d.sample(&mut rng);
            assert!(v != 0.0 && v.abs() < 100.0);
        }
    }

    #[test]
    fn inputs_standardized() {
        let cfg = GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for w in 1..=4 {
            let x = sample_inputs(w, 50, &cfg, &mut rng).unwrap();
            for col in x.columns() {
                let mean = col.sum() / 50.0;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 50.0).sqrt();
                assert!(mean.abs() <= 1e-9 && (sd - 1.0).abs() <= 1e-9);
            }
        }
        assert!(matches!(sample_inputs(1, 1, &cfg, &mut rng), Err(SynthError::TooFewPoints(1))));
    }

    #[test]
    fn cluster_counts_sum_to_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for m in [2, 7, 100, 333] {
            let cl = sample_clusters(3, 10, &mut rng);
            assert_eq!(cluster_counts(&cl, m).iter().sum::<usize>(), m);
        }
    }

    #[test]
    fn single_gaussian_cluster_is_centered_on_centroid() {
        let cl = vec![ClusterSpec {
            weight: 1.0,
            centroid: vec![3.0, -2.0],
            scale: vec![0.5, 0.1],
            family: ClusterFamily::Gaussian,
        }];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = sample_mixture(&cl, 20_000, &mut rng);
        let mean = x.mean_axis(Axis(0)).unwrap();
        assert!((mean[0] - 3.0).abs() < 0.02 && (mean[1] + 2.0).abs() < 0.02);
        // rotation preserves total variance
        let var: f64 = x.var_axis(Axis(0), 0.0).sum();
        assert!((var - 0.26).abs() < 0.02, "{var}");
    }

    #[test]
    fn log_of_negative_inputs_is_rejected() {
        let e = Expression::unary(UnaryOp::Log, Expression::var(0));
        let neg = Array2::from_elem((10, 1), -1.0);
        assert!(targets_if_valid(&e, &neg).is_none());
        let pos = Array2::from_elem((10, 1), 2.0);
        assert!(targets_if_valid(&e, &pos).is_some());
    }

    #[test]
    fn samples_are_valid_and_reproducible() {
        let cfg = GeneratorConfig::default();
        for i in 0..20 {
            let a = sample_at(&cfg, 9, i).unwrap();
            let b = sample_at(&cfg, 9, i).unwrap();
            assert_eq!(a.expr, b.expr);
            assert_eq!(a.bag, b.bag);
            let w = a.bag.width();
            assert!(a.bag.len() >= 10 * w && a.bag.len() <= cfg.m_max);
            assert!(a.bag.targets.iter().all(|y| y.is_finite() && y.abs() <= 1e100));
        }
    }

    #[test]
    fn rejected_attempt_is_regenerated() {
        let cfg = GeneratorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut calls = 0;
        // log(x0 - x0) is never valid; the second expression always is
        let s = make_training_sample_with(&cfg, &mut rng, Provenance::Synthetic { seed: 1, index: 2 }, |_| {
            calls += 1;
            if calls == 1 {
                Expression::unary(UnaryOp::Log, Expression::sub(Expression::var(0), Expression::var(0)))
            } else {
                Expression::var(0)
            }
        })
        .unwrap();
        assert_eq!(calls, 2);
        assert_eq!(s.expr, Expression::var(0));
    }

    #[test]
    fn retry_cap_surfaces_seed() {
        let cfg = GeneratorConfig { max_retries: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let err = make_training_sample_with(&cfg, &mut rng, Provenance::Synthetic { seed: 77, index: 5 }, |_| {
            Expression::unary(UnaryOp::Inv, Expression::sub(Expression::var(0), Expression::var(0)))
        })
        .unwrap_err();
        assert!(matches!(err, SynthError::RetriesExhausted { seed: 77, index: 5, attempts: 3 }));
    }
}
