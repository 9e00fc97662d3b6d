//! Expression trees over the cross-sectional operator set.
//!
//! An [`Expression`] is an immutable tree of binary operators, unary
//! operators, feature variables and real constants. Constants keep full
//! precision here; quantization only happens in [`crate::codec`].

mod affine;
mod eval;
mod fingerprint;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use affine::substitute_affine;
pub use eval::{evaluate, evaluate_point, grad_constants, EvalResult, GradResult, OVERFLOW_LIMIT};
pub use fingerprint::{fingerprint, probe_matrix, Fingerprint, FingerprintSet, PROBE_ROWS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ExprError {
    #[error("scale component {index} is zero")]
    ZeroScale { index: usize },
    #[error("target scale is zero")]
    ZeroTargetScale,
    #[error("expected {expected} constants, got {got}")]
    ConstantCount { expected: usize, got: usize },
    #[error("unknown operator `{0}`")]
    UnknownOperator(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UnaryOp {
    Inv,
    Abs,
    Sqr,
    Sqrt,
    Sin,
    Cos,
    Tan,
    Atan,
    Log,
    Exp,
}

impl BinaryOp {
    pub const ALL: [BinaryOp; 4] = [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div];

    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    pub fn is_commutative(self) -> bool {
        matches!(self, BinaryOp::Add | BinaryOp::Mul)
    }

    fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }
}

impl UnaryOp {
    pub const ALL: [UnaryOp; 10] = [
        UnaryOp::Inv,
        UnaryOp::Abs,
        UnaryOp::Sqr,
        UnaryOp::Sqrt,
        UnaryOp::Sin,
        UnaryOp::Cos,
        UnaryOp::Tan,
        UnaryOp::Atan,
        UnaryOp::Log,
        UnaryOp::Exp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Inv => "inv",
            UnaryOp::Abs => "abs",
            UnaryOp::Sqr => "sqr",
            UnaryOp::Sqrt => "sqrt",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Tan => "tan",
            UnaryOp::Atan => "atan",
            UnaryOp::Log => "log",
            UnaryOp::Exp => "exp",
        }
    }
}

impl std::str::FromStr for BinaryOp {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BinaryOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| ExprError::UnknownOperator(s.to_string()))
    }
}

impl std::str::FromStr for UnaryOp {
    type Err = ExprError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UnaryOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| ExprError::UnknownOperator(s.to_string()))
    }
}

/// The operator vocabulary an expression generator may draw from.
///
/// Defaults to the full cross-sectional set; restricted grammars pick
/// subsets. There are no time-series operators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSet {
    pub binary: Vec<BinaryOp>,
    pub unary: Vec<UnaryOp>,
}

impl Default for OperatorSet {
    fn default() -> Self {
        Self { binary: BinaryOp::ALL.to_vec(), unary: UnaryOp::ALL.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expression {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Expression>),
    Binary(BinaryOp, Box<Expression>, Box<Expression>),
}

// `Expression::add(a, b)` builds a node; it is not arithmetic on trees.
#[allow(clippy::should_implement_trait)]
impl Expression {
    pub fn constant(v: f64) -> Self {
        Expression::Const(v)
    }

    pub fn var(index: usize) -> Self {
        Expression::Var(index)
    }

    pub fn unary(op: UnaryOp, child: Expression) -> Self {
        Expression::Unary(op, Box::new(child))
    }

    pub fn binary(op: BinaryOp, lhs: Expression, rhs: Expression) -> Self {
        Expression::Binary(op, Box::new(lhs), Box::new(rhs))
    }

    pub fn add(lhs: Expression, rhs: Expression) -> Self {
        Self::binary(BinaryOp::Add, lhs, rhs)
    }

    pub fn sub(lhs: Expression, rhs: Expression) -> Self {
        Self::binary(BinaryOp::Sub, lhs, rhs)
    }

    pub fn mul(lhs: Expression, rhs: Expression) -> Self {
        Self::binary(BinaryOp::Mul, lhs, rhs)
    }

    pub fn div(lhs: Expression, rhs: Expression) -> Self {
        Self::binary(BinaryOp::Div, lhs, rhs)
    }

    /// Total node count.
    pub fn complexity(&self) -> usize {
        match self {
            Expression::Const(_) | Expression::Var(_) => 1,
            Expression::Unary(_, c) => 1 + c.complexity(),
            Expression::Binary(_, l, r) => 1 + l.complexity() + r.complexity(),
        }
    }

    /// Operator depth: leaves have depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Expression::Const(_) | Expression::Var(_) => 0,
            Expression::Unary(_, c) => 1 + c.depth(),
            Expression::Binary(_, l, r) => 1 + l.depth().max(r.depth()),
        }
    }

    pub fn binary_count(&self) -> usize {
        match self {
            Expression::Const(_) | Expression::Var(_) => 0,
            Expression::Unary(_, c) => c.binary_count(),
            Expression::Binary(_, l, r) => 1 + l.binary_count() + r.binary_count(),
        }
    }

    pub fn unary_count(&self) -> usize {
        match self {
            Expression::Const(_) | Expression::Var(_) => 0,
            Expression::Unary(_, c) => 1 + c.unary_count(),
            Expression::Binary(_, l, r) => l.unary_count() + r.unary_count(),
        }
    }

    /// Largest variable index plus one, or 0 for variable-free trees.
    pub fn arity(&self) -> usize {
        match self {
            Expression::Const(_) => 0,
            Expression::Var(w) => w + 1,
            Expression::Unary(_, c) => c.arity(),
            Expression::Binary(_, l, r) => l.arity().max(r.arity()),
        }
    }

    /// Sorted, deduplicated variable indices referenced by the tree.
    pub fn variables(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.walk(&mut |node| {
            if let Expression::Var(w) = node {
                out.push(*w);
            }
        });
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Constants in prefix order.
    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.walk(&mut |node| {
            if let Expression::Const(c) = node {
                out.push(*c);
            }
        });
        out
    }

    pub fn constant_count(&self) -> usize {
        match self {
            Expression::Const(_) => 1,
            Expression::Var(_) => 0,
            Expression::Unary(_, c) => c.constant_count(),
            Expression::Binary(_, l, r) => l.constant_count() + r.constant_count(),
        }
    }

    /// Returns a copy with constants replaced, in prefix order.
    pub fn with_constants(&self, values: &[f64]) -> Result<Expression, ExprError> {
        let expected = self.constant_count();
        if values.len() != expected {
            return Err(ExprError::ConstantCount { expected, got: values.len() });
        }
        let mut it = values.iter().copied();
        Ok(self.map_constants(&mut || it.next().expect("count checked")))
    }

    fn map_constants(&self, next: &mut dyn FnMut() -> f64) -> Expression {
        match self {
            Expression::Const(_) => Expression::Const(next()),
            Expression::Var(w) => Expression::Var(*w),
            Expression::Unary(op, c) => Expression::unary(*op, c.map_constants(next)),
            Expression::Binary(op, l, r) => {
                let l = l.map_constants(next);
                let r = r.map_constants(next);
                Expression::binary(*op, l, r)
            }
        }
    }

    /// Pre-order traversal.
    pub fn walk<'a>(&'a self, f: &mut dyn FnMut(&'a Expression)) {
        f(self);
        match self {
            Expression::Const(_) | Expression::Var(_) => {}
            Expression::Unary(_, c) => c.walk(f),
            Expression::Binary(_, l, r) => {
                l.walk(f);
                r.walk(f);
            }
        }
    }

    /// Canonical skeleton string: operands of `add`/`mul` sorted, constants
    /// printed at full precision. No other simplification is applied.
    pub fn canonical(&self) -> String {
        match self {
            Expression::Const(c) => format!("{c:?}"),
            Expression::Var(w) => format!("x{w}"),
            Expression::Unary(op, c) => format!("{}({})", op.name(), c.canonical()),
            Expression::Binary(op, l, r) => {
                let (mut a, mut b) = (l.canonical(), r.canonical());
                if op.is_commutative() && b < a {
                    std::mem::swap(&mut a, &mut b);
                }
                format!("{}({},{})", op.name(), a, b)
            }
        }
    }

    /// Infix rendering with custom variable names.
    pub fn to_infix_with(&self, names: &[&str]) -> String {
        let mut out = String::new();
        self.write_infix(&mut out, names, 0);
        out
    }

    fn precedence(&self) -> u8 {
        match self {
            Expression::Binary(BinaryOp::Add | BinaryOp::Sub, _, _) => 1,
            Expression::Binary(BinaryOp::Mul | BinaryOp::Div, _, _) => 2,
            Expression::Const(c) if *c < 0.0 => 1,
            _ => 3,
        }
    }

    fn write_infix(&self, out: &mut String, names: &[&str], parent: u8) {
        use std::fmt::Write;
        match self {
            Expression::Const(c) => {
                if *c < 0.0 && parent > 0 {
                    let _ = write!(out, "({})", fmt_const(*c));
                } else {
                    out.push_str(&fmt_const(*c));
                }
            }
            Expression::Var(w) => match names.get(*w) {
                Some(name) => out.push_str(name),
                None => {
                    let _ = write!(out, "x{w}");
                }
            },
            Expression::Unary(op, c) => {
                match op {
                    UnaryOp::Abs => {
                        out.push_str("abs(");
                    }
                    UnaryOp::Sqr => {
                        out.push('(');
                        c.write_infix(out, names, 0);
                        out.push_str(")^2");
                        return;
                    }
                    UnaryOp::Inv => {
                        out.push_str("1/(");
                    }
                    _ => {
                        out.push_str(op.name());
                        out.push('(');
                    }
                }
                c.write_infix(out, names, 0);
                out.push(')');
            }
            Expression::Binary(op, l, r) => {
                let prec = self.precedence();
                let wrap = prec < parent;
                if wrap {
                    out.push('(');
                }
                l.write_infix(out, names, prec);
                let _ = write!(out, " {} ", op.symbol());
                // right operand of a non-associative op binds tighter
                let rp = match op {
                    BinaryOp::Sub | BinaryOp::Div => prec + 1,
                    _ => prec,
                };
                r.write_infix(out, names, rp);
                if wrap {
                    out.push(')');
                }
            }
        }
    }
}

fn fmt_const(c: f64) -> String {
    let a = c.abs();
    if a != 0.0 && !(1e-4..1e6).contains(&a) {
        format!("{c:e}")
    } else {
        format!("{c}")
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix_with(&[]))
    }
}
