use rand::seq::SliceRandom;
use rand::Rng;

use super::AffineDistribution;
use crate::expr::{BinaryOp, Expression, UnaryOp};

/// Counts `D(e, n)`: the number of binary trees that can fill `e` empty
/// slots using exactly `n` more internal nodes.
///
/// `D(0, n) = 0` for `n > 0`, `D(e, 0) = 1`, and
/// `D(e, n) = D(e - 1, n) + D(e + 1, n - 1)`.
#[derive(Debug, Clone)]
pub struct ShapeCounter {
    table: Vec<Vec<u128>>,
}

impl ShapeCounter {
    pub fn new(max_ops: usize) -> Self {
        let max_e = 2 * max_ops + 3;
        let mut table = vec![vec![0u128; max_ops + 1]; max_e + 1];
        for row in table.iter_mut() {
            row[0] = 1;
        }
        for n in 1..=max_ops {
            for e in 1..=max_e - n {
                table[e][n] = table[e - 1][n] + table[e + 1][n - 1];
            }
        }
        Self { table }
    }

    pub fn count(&self, empty: usize, ops: usize) -> u128 {
        self.table[empty][ops]
    }
}

/// Prefix layout of a uniformly random binary tree with `ops` internal nodes
/// (`true` = internal node, `false` = leaf).
pub fn random_binary_shape<R: Rng + ?Sized>(ops: usize, rng: &mut R) -> Vec<bool> {
    let counter = ShapeCounter::new(ops);
    let mut shape = Vec::with_capacity(2 * ops + 1);
    let mut empty = 1usize;
    let mut left = ops;
    while left > 0 {
        // choose how many of the pending slots become leaves before the next op
        let total = counter.count(empty, left);
        let mut r = rng.gen_range(0..total);
        let mut k = 0;
        loop {
            let w = counter.count(empty - k + 1, left - 1);
            if r < w {
                break;
            }
            r -= w;
            k += 1;
        }
        shape.extend(std::iter::repeat_n(false, k));
        shape.push(true);
        empty = empty - k + 1;
        left -= 1;
    }
    shape.extend(std::iter::repeat_n(false, empty));
    shape
}

/// Builds a tree from a prefix shape, assigning leaves in order and drawing
/// each internal node's operator uniformly from `ops`.
pub fn build_from_shape<R: Rng + ?Sized>(
    shape: &[bool],
    leaves: &[usize],
    ops: &[BinaryOp],
    rng: &mut R,
) -> Expression {
    fn go<R: Rng + ?Sized>(
        shape: &[bool],
        pos: &mut usize,
        leaves: &mut std::slice::Iter<'_, usize>,
        ops: &[BinaryOp],
        rng: &mut R,
    ) -> Expression {
        let internal = shape[*pos];
        *pos += 1;
        if internal {
            let op = *ops.choose(rng).expect("non-empty operator set");
            let l = go(shape, pos, leaves, ops, rng);
            let r = go(shape, pos, leaves, ops, rng);
            Expression::binary(op, l, r)
        } else {
            Expression::var(*leaves.next().expect("one variable per leaf"))
        }
    }
    let mut pos = 0;
    let mut it = leaves.iter();
    let e = go(shape, &mut pos, &mut it, ops, rng);
    debug_assert_eq!(pos, shape.len());
    e
}

/// Wraps a uniformly chosen node (equivalently, the edge above it, including
/// the one above the root) in `op`.
pub fn insert_unary<R: Rng + ?Sized>(tree: Expression, op: UnaryOp, rng: &mut R) -> Expression {
    fn go(e: Expression, target: usize, pos: &mut usize, op: UnaryOp) -> Expression {
        let here = *pos;
        *pos += 1;
        let e = match e {
            Expression::Unary(u, c) => Expression::unary(u, go(*c, target, pos, op)),
            Expression::Binary(b, l, r) => {
                let l = go(*l, target, pos, op);
                let r = go(*r, target, pos, op);
                Expression::binary(b, l, r)
            }
            leaf => leaf,
        };
        if here == target {
            Expression::unary(op, e)
        } else {
            e
        }
    }
    let target = rng.gen_range(0..tree.complexity());
    let mut pos = 0;
    go(tree, target, &mut pos, op)
}

/// Replaces each variable `x` by `a*x + b` and each unary node `u` by
/// `a*u + b`. Variables flagged in `dropped` get `a = 0`.
pub fn decorate_affine<R: Rng + ?Sized>(
    e: &Expression,
    dist: &AffineDistribution,
    dropped: &[bool],
    rng: &mut R,
) -> Expression {
    let wrap = |inner: Expression, a: f64, b: f64| {
        Expression::add(Expression::mul(Expression::constant(a), inner), Expression::constant(b))
    };
    match e {
        Expression::Var(w) => {
            let a = dist.sample(rng);
            let b = dist.sample(rng);
            let a = if dropped.get(*w).copied().unwrap_or(false) { 0.0 } else { a };
            wrap(Expression::var(*w), a, b)
        }
        Expression::Const(c) => Expression::constant(*c),
        Expression::Unary(op, c) => {
            let inner = Expression::unary(*op, decorate_affine(c, dist, dropped, rng));
            let a = dist.sample(rng);
            let b = dist.sample(rng);
            wrap(inner, a, b)
        }
        Expression::Binary(op, l, r) => {
            let l = decorate_affine(l, dist, dropped, rng);
            let r = decorate_affine(r, dist, dropped, rng);
            Expression::binary(*op, l, r)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn catalan(n: u128) -> u128 {
        let mut c = 1u128;
        for i in 0..n {
            c = c * 2 * (2 * i + 1) / (i + 2);
        }
        c
    }

    #[test]
    fn counter_gives_catalan_numbers() {
        let c = ShapeCounter::new(15);
        for n in 0..=15 {
            assert_eq!(c.count(1, n), catalan(n as u128), "n={n}");
        }
    }

    #[test]
    fn shapes_are_valid_prefix_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for ops in 0..12 {
            let s = random_binary_shape(ops, &mut rng);
            assert_eq!(s.len(), 2 * ops + 1);
            let mut need = 1i64;
            for (i, &internal) in s.iter().enumerate() {
                assert!(need > 0, "closed early at {i}");
                need += if internal { 1 } else { -1 };
            }
            assert_eq!(need, 0);
        }
    }

    #[test]
    fn shapes_are_uniform() {
        // 5 shapes with 3 internal nodes
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut hist: HashMap<Vec<bool>, usize> = HashMap::new();
        let n = 50_000;
        for _ in 0..n {
            *hist.entry(random_binary_shape(3, &mut rng)).or_default() += 1;
        }
        assert_eq!(hist.len(), 5);
        for (_, c) in hist {
            let p = c as f64 / n as f64;
            assert!((p - 0.2).abs() < 0.01, "{p}");
        }
    }

    #[test]
    fn unary_insertion_adds_one_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Expression::add(Expression::var(0), Expression::var(1));
        let mut seen_root = false;
        for _ in 0..100 {
            let u = insert_unary(t.clone(), UnaryOp::Sin, &mut rng);
            assert_eq!(u.complexity(), 4);
            assert_eq!(u.unary_count(), 1);
            seen_root |= matches!(u, Expression::Unary(..));
        }
        assert!(seen_root);
    }
}
