use super::{ExprError, Expression};

/// Rewrites an expression fitted on standardized data back into raw units.
///
/// Every variable leaf `x_w` becomes `(x_w - mu_w) / sigma_w` and the root is
/// wrapped as `y_sigma * root + y_mu`, so that the result evaluated on raw
/// inputs equals `y_sigma * e((x - mu) / sigma) + y_mu`.
pub fn substitute_affine(
    expr: &Expression,
    mu: &[f64],
    sigma: &[f64],
    y_mu: f64,
    y_sigma: f64,
) -> Result<Expression, ExprError> {
    assert_eq!(mu.len(), sigma.len(), "mu and sigma lengths differ");
    if let Some(index) = sigma.iter().position(|&s| s == 0.0) {
        return Err(ExprError::ZeroScale { index });
    }
    if y_sigma == 0.0 {
        return Err(ExprError::ZeroTargetScale);
    }
    assert!(expr.arity() <= mu.len(), "expression references a variable without scaling data");
    let inner = replace_vars(expr, mu, sigma);
    Ok(Expression::add(
        Expression::mul(Expression::constant(y_sigma), inner),
        Expression::constant(y_mu),
    ))
}

fn replace_vars(e: &Expression, mu: &[f64], sigma: &[f64]) -> Expression {
    match e {
        Expression::Const(c) => Expression::Const(*c),
        Expression::Var(w) => Expression::div(
            Expression::sub(Expression::var(*w), Expression::constant(mu[*w])),
            Expression::constant(sigma[*w]),
        ),
        Expression::Unary(op, c) => Expression::unary(*op, replace_vars(c, mu, sigma)),
        Expression::Binary(op, l, r) => {
            Expression::binary(*op, replace_vars(l, mu, sigma), replace_vars(r, mu, sigma))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{evaluate, UnaryOp};
    use ndarray::array;

    #[test]
    fn linear_substitution() {
        let e = Expression::mul(Expression::constant(3.0), Expression::var(0));
        let u = substitute_affine(&e, &[5.0], &[2.0], 0.0, 1.0).unwrap();
        let r = evaluate(&u, array![[7.0], [5.0], [-1.0]].view());
        assert_eq!(r.values, vec![3.0, 0.0, -9.0]);
    }

    #[test]
    fn identity_transform_evaluates_identically() {
        let e = Expression::add(Expression::unary(UnaryOp::Sin, Expression::var(0)), Expression::var(1));
        let u = substitute_affine(&e, &[0.0, 0.0], &[1.0, 1.0], 0.0, 1.0).unwrap();
        assert!(u.complexity() > e.complexity());
        let pts = array![[0.1, 2.0], [-3.0, 0.5]];
        assert_eq!(evaluate(&u, pts.view()).values, evaluate(&e, pts.view()).values);
    }

    #[test]
    fn target_rescaling() {
        let e = Expression::unary(UnaryOp::Sin, Expression::var(0));
        let u = substitute_affine(&e, &[1.0], &[2.0], 4.0, 3.0).unwrap();
        assert_eq!(evaluate(&u, array![[1.0]].view()).values, vec![4.0]);
    }

    #[test]
    fn zero_scale_rejected() {
        let e = Expression::var(0);
        assert_eq!(substitute_affine(&e, &[0.0], &[0.0], 0.0, 1.0), Err(ExprError::ZeroScale { index: 0 }));
        assert_eq!(substitute_affine(&e, &[0.0], &[1.0], 0.0, 0.0), Err(ExprError::ZeroTargetScale));
    }
}
