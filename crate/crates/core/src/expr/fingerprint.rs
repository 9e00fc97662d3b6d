use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{evaluate, Expression};

pub const PROBE_ROWS: usize = 64;
const PROBE_SEED: u64 = 0x5eed_f1a9;
/// Grid used to quantize probe predictions. Values sharing a grid cell are
/// within this distance of each other.
const QUANTUM: f64 = 1e-9;

/// Deterministic probe points used for prediction-based dedup.
pub fn probe_matrix(width: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    Array2::from_shape_simple_fn((PROBE_ROWS, width), || StandardNormal.sample(&mut rng))
}

/// Two expressions are duplicates if either component matches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    pub skeleton: String,
    pub predictions: u64,
}

impl Fingerprint {
    pub fn matches(&self, other: &Fingerprint) -> bool {
        self.skeleton == other.skeleton || self.predictions == other.predictions
    }
}

pub fn fingerprint(expr: &Expression, probe: ArrayView2<'_, f64>) -> Fingerprint {
    let r = evaluate(expr, probe);
    let mut h = DefaultHasher::new();
    for (&v, &ok) in r.values.iter().zip(&r.valid) {
        if !ok {
            0u8.hash(&mut h);
        } else if v.abs() < 1e6 {
            1u8.hash(&mut h);
            ((v / QUANTUM).round() as i64).hash(&mut h);
        } else {
            2u8.hash(&mut h);
            v.to_bits().hash(&mut h);
        }
    }
    Fingerprint { skeleton: expr.canonical(), predictions: h.finish() }
}

/// Accumulates fingerprints and reports whether a new one duplicates any
/// previously inserted.
#[derive(Debug, Default)]
pub struct FingerprintSet {
    skeletons: HashSet<String>,
    predictions: HashSet<u64>,
}

impl FingerprintSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns true if the fingerprint was new.
    pub fn insert(&mut self, fp: Fingerprint) -> bool {
        if self.skeletons.contains(&fp.skeleton) || self.predictions.contains(&fp.predictions) {
            return false;
        }
        self.skeletons.insert(fp.skeleton);
        self.predictions.insert(fp.predictions);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::UnaryOp;

    #[test]
    fn commutative_operands_share_fingerprint() {
        let p = probe_matrix(2);
        let a = fingerprint(&Expression::add(Expression::var(0), Expression::var(1)), p.view());
        let b = fingerprint(&Expression::add(Expression::var(1), Expression::var(0)), p.view());
        assert_eq!(a, b);
    }

    #[test]
    fn pointwise_equal_functions_share_prediction_hash() {
        let p = probe_matrix(1);
        let a = fingerprint(&Expression::mul(Expression::constant(2.0), Expression::var(0)), p.view());
        let b = fingerprint(&Expression::add(Expression::var(0), Expression::var(0)), p.view());
        assert_ne!(a.skeleton, b.skeleton);
        assert_eq!(a.predictions, b.predictions);
        assert!(a.matches(&b));
    }

    #[test]
    fn distinct_functions_differ() {
        let p = probe_matrix(1);
        let a = fingerprint(&Expression::unary(UnaryOp::Sin, Expression::var(0)), p.view());
        let b = fingerprint(&Expression::unary(UnaryOp::Cos, Expression::var(0)), p.view());
        assert!(!a.matches(&b));
    }

    #[test]
    fn set_rejects_duplicates() {
        let p = probe_matrix(1);
        let mut set = FingerprintSet::new();
        assert!(set.insert(fingerprint(&Expression::var(0), p.view())));
        assert!(!set.insert(fingerprint(
            &Expression::mul(Expression::constant(1.0), Expression::var(0)),
            p.view()
        )));
        assert!(set.insert(fingerprint(&Expression::constant(1.0), p.view())));
    }
}
