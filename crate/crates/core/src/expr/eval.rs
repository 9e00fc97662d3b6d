use ndarray::{Array2, ArrayView2};

use super::{BinaryOp, Expression, UnaryOp};

/// Any intermediate or final magnitude above this marks the point invalid.
pub const OVERFLOW_LIMIT: f64 = 1e100;

/// |cos| below this makes `tan` invalid.
const TAN_POLE_EPS: f64 = 1e-12;

/// Point-wise values plus a validity mask. Invalid entries hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl EvalResult {
    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Debug, Clone)]
pub struct GradResult {
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    /// Row k, column p: derivative of the value at point k w.r.t. constant p.
    pub jacobian: Array2<f64>,
}

#[inline]
fn check(v: f64) -> f64 {
    if v.is_finite() && v.abs() <= OVERFLOW_LIMIT {
        v
    } else {
        f64::NAN
    }
}

#[inline]
fn apply_binary(op: BinaryOp, a: f64, b: f64) -> f64 {
    let v = match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => {
            if b == 0.0 {
                return f64::NAN;
            }
            a / b
        }
    };
    check(v)
}

#[inline]
fn apply_unary(op: UnaryOp, a: f64) -> f64 {
    let v = match op {
        UnaryOp::Inv => {
            if a == 0.0 {
                return f64::NAN;
            }
            1.0 / a
        }
        UnaryOp::Abs => a.abs(),
        UnaryOp::Sqr => a * a,
        UnaryOp::Sqrt => {
            if a < 0.0 {
                return f64::NAN;
            }
            a.sqrt()
        }
        UnaryOp::Sin => a.sin(),
        UnaryOp::Cos => a.cos(),
        UnaryOp::Tan => {
            if a.cos().abs() < TAN_POLE_EPS {
                return f64::NAN;
            }
            a.tan()
        }
        UnaryOp::Atan => a.atan(),
        UnaryOp::Log => {
            if a <= 0.0 {
                return f64::NAN;
            }
            a.ln()
        }
        UnaryOp::Exp => a.exp(),
    };
    check(v)
}

/// Evaluates at a single point. Returns `None` when the point is invalid.
pub fn evaluate_point(expr: &Expression, x: &[f64]) -> Option<f64> {
    fn go(e: &Expression, x: &[f64]) -> f64 {
        match e {
            Expression::Const(c) => check(*c),
            Expression::Var(w) => check(x[*w]),
            Expression::Unary(op, c) => apply_unary(*op, go(c, x)),
            Expression::Binary(op, l, r) => apply_binary(*op, go(l, x), go(r, x)),
        }
    }
    let v = go(expr, x);
    v.is_finite().then_some(v)
}

/// Evaluates `expr` on every row of `inputs` (M points by W features).
///
/// Panics if the expression references a column outside `inputs`.
pub fn evaluate(expr: &Expression, inputs: ArrayView2<'_, f64>) -> EvalResult {
    assert!(
        expr.arity() <= inputs.ncols(),
        "expression uses x{} but inputs have {} columns",
        expr.arity().saturating_sub(1),
        inputs.ncols()
    );
    let values = eval_columns(expr, inputs);
    let valid = values.iter().map(|v| v.is_finite()).collect();
    EvalResult { values, valid }
}

fn eval_columns(e: &Expression, inputs: ArrayView2<'_, f64>) -> Vec<f64> {
    let m = inputs.nrows();
    match e {
        Expression::Const(c) => vec![check(*c); m],
        Expression::Var(w) => inputs.column(*w).iter().map(|&v| check(v)).collect(),
        Expression::Unary(op, c) => {
            let mut v = eval_columns(c, inputs);
            for x in v.iter_mut() {
                *x = apply_unary(*op, *x);
            }
            v
        }
        Expression::Binary(op, l, r) => {
            let mut a = eval_columns(l, inputs);
            let b = eval_columns(r, inputs);
            for (x, &y) in a.iter_mut().zip(&b) {
                *x = apply_binary(*op, *x, y);
            }
            a
        }
    }
}

/// Forward-mode derivatives of the expression w.r.t. each constant leaf
/// (prefix order), alongside the values.
pub fn grad_constants(expr: &Expression, inputs: ArrayView2<'_, f64>) -> GradResult {
    assert!(expr.arity() <= inputs.ncols());
    let p = expr.constant_count();
    let mut next = 0usize;
    let (values, jacobian) = dual(expr, inputs, p, &mut next);
    let valid = values.iter().map(|v| v.is_finite()).collect();
    GradResult { values, valid, jacobian }
}

fn dual(
    e: &Expression,
    inputs: ArrayView2<'_, f64>,
    p: usize,
    next: &mut usize,
) -> (Vec<f64>, Array2<f64>) {
    let m = inputs.nrows();
    match e {
        Expression::Const(c) => {
            let mut d = Array2::zeros((m, p));
            d.column_mut(*next).fill(1.0);
            *next += 1;
            (vec![check(*c); m], d)
        }
        Expression::Var(w) => {
            (inputs.column(*w).iter().map(|&v| check(v)).collect(), Array2::zeros((m, p)))
        }
        Expression::Unary(op, c) => {
            let (a, mut d) = dual(c, inputs, p, next);
            let mut v = a.clone();
            for k in 0..m {
                let x = a[k];
                let y = apply_unary(*op, x);
                v[k] = y;
                let scale = match op {
                    UnaryOp::Inv => -1.0 / (x * x),
                    UnaryOp::Abs => x.signum(),
                    UnaryOp::Sqr => 2.0 * x,
                    UnaryOp::Sqrt => 0.5 / y,
                    UnaryOp::Sin => x.cos(),
                    UnaryOp::Cos => -x.sin(),
                    UnaryOp::Tan => {
                        let c = x.cos();
                        1.0 / (c * c)
                    }
                    UnaryOp::Atan => 1.0 / (1.0 + x * x),
                    UnaryOp::Log => 1.0 / x,
                    UnaryOp::Exp => y,
                };
                d.row_mut(k).mapv_inplace(|g| g * scale);
            }
            (v, d)
        }
        Expression::Binary(op, l, r) => {
            let (a, mut da) = dual(l, inputs, p, next);
            let (b, db) = dual(r, inputs, p, next);
            let mut v = Vec::with_capacity(m);
            for k in 0..m {
                let (x, y) = (a[k], b[k]);
                v.push(apply_binary(*op, x, y));
                let mut ra = da.row_mut(k);
                let rb = db.row(k);
                match op {
                    BinaryOp::Add => ra += &rb,
                    BinaryOp::Sub => ra -= &rb,
                    BinaryOp::Mul => {
                        for (ga, &gb) in ra.iter_mut().zip(rb.iter()) {
                            *ga = *ga * y + x * gb;
                        }
                    }
                    BinaryOp::Div => {
                        let y2 = y * y;
                        for (ga, &gb) in ra.iter_mut().zip(rb.iter()) {
                            *ga = (*ga * y - x * gb) / y2;
                        }
                    }
                }
            }
            (v, da)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(v: f64) -> Expression {
        Expression::constant(v)
    }
    fn x(w: usize) -> Expression {
        Expression::var(w)
    }

    #[test]
    fn simple_arithmetic() {
        let e = Expression::sub(Expression::mul(c(2.0), x(0)), x(1));
        let r = evaluate(&e, array![[3.0, 1.0]].view());
        assert_eq!(r.values, vec![5.0]);
        assert!(r.all_valid());
    }

    #[test]
    fn division_by_zero_is_flagged() {
        let e = Expression::div(c(1.0), x(0));
        let r = evaluate(&e, array![[0.0], [2.0]].view());
        assert_eq!(r.valid, vec![false, true]);
        assert_eq!(r.values[1], 0.5);
    }

    #[test]
    fn overflow_is_flagged() {
        let e = Expression::unary(UnaryOp::Exp, c(300.0));
        let r = evaluate(&e, array![[0.0], [1.0]].view());
        assert_eq!(r.valid, vec![false, false]);
    }

    #[test]
    fn domain_rules() {
        let pts = array![[-1.0], [0.0], [std::f64::consts::FRAC_PI_2]];
        let log = evaluate(&Expression::unary(UnaryOp::Log, x(0)), pts.view());
        assert_eq!(log.valid, vec![false, false, true]);
        let sqrt = evaluate(&Expression::unary(UnaryOp::Sqrt, x(0)), pts.view());
        assert_eq!(sqrt.valid, vec![false, true, true]);
        let inv = evaluate(&Expression::unary(UnaryOp::Inv, x(0)), pts.view());
        assert_eq!(inv.valid, vec![true, false, true]);
        let tan = evaluate(&Expression::unary(UnaryOp::Tan, x(0)), pts.view());
        assert_eq!(tan.valid, vec![true, true, false]);
    }

    #[test]
    fn point_and_batch_agree() {
        let e = Expression::add(Expression::unary(UnaryOp::Sin, x(0)), Expression::mul(x(1), c(0.5)));
        let pts = array![[0.3, 2.0], [1.0, -4.0]];
        let r = evaluate(&e, pts.view());
        for k in 0..2 {
            assert_eq!(evaluate_point(&e, pts.row(k).as_slice().unwrap()), Some(r.values[k]));
        }
    }

    #[test]
    fn gradient_linear_case() {
        let e = Expression::mul(c(2.0), x(0));
        let g = grad_constants(&e, array![[3.0]].view());
        assert_eq!(g.jacobian[[0, 0]], 3.0);
    }

    #[test]
    fn gradient_chain_rule_at_zero() {
        let e = Expression::unary(UnaryOp::Sin, Expression::mul(c(0.0), x(0)));
        let g = grad_constants(&e, array![[5.0]].view());
        assert_eq!(g.jacobian[[0, 0]], 5.0);
    }

    #[test]
    fn gradient_matches_finite_differences_for_every_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for op in UnaryOp::ALL {
            for bop in BinaryOp::ALL {
                // bop(c0 * x0 + c1, op(c2 * x1 + c3))
                let inner = Expression::unary(
                    op,
                    Expression::add(Expression::mul(c(0.7), x(1)), c(1.3)),
                );
                let e = Expression::binary(
                    bop,
                    Expression::add(Expression::mul(c(1.1), x(0)), c(-0.4)),
                    inner,
                );
                let pt: Vec<f64> = (0..2).map(|_| rng.gen_range(0.1..1.0)).collect();
                let inputs = Array2::from_shape_vec((1, 2), pt).unwrap();
                let g = grad_constants(&e, inputs.view());
                if !g.valid[0] {
                    continue;
                }
                let base = e.constants();
                for p in 0..base.len() {
                    let h = 1e-6;
                    let mut up = base.clone();
                    up[p] += h;
                    let mut dn = base.clone();
                    dn[p] -= h;
                    let fu = evaluate(&e.with_constants(&up).unwrap(), inputs.view()).values[0];
                    let fd = evaluate(&e.with_constants(&dn).unwrap(), inputs.view()).values[0];
                    let fdiff = (fu - fd) / (2.0 * h);
                    let an = g.jacobian[[0, p]];
                    let rel = (an - fdiff).abs() / an.abs().max(fdiff.abs()).max(1e-8);
                    assert!(rel < 1e-5, "{op:?}/{bop:?} p={p}: {an} vs {fdiff}");
                }
            }
        }
    }
}
