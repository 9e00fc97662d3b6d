//! Dense BFGS with Armijo backtracking.

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the largest gradient component falls below this.
    pub grad_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    /// Best point seen; `f` is finite here unless the start was not.
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which returns the value and gradient at a point. A
/// non-finite value counts as a failed trial step.
pub fn minimize(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), x0: &[f64], opts: &BfgsOptions) -> BfgsResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    if n == 0 || !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return BfgsResult { x, f: fx, iterations: 0, converged: n == 0 };
    }
    // row-major inverse Hessian approximation
    let mut h = identity(n);
    let mut first = true;
    for it in 0..opts.max_iter {
        if inf_norm(&g) < opts.grad_tol {
            return BfgsResult { x, f: fx, iterations: it, converged: true };
        }
        let mut d = matvec(&h, &g, n);
        d.iter_mut().for_each(|v| *v = -*v);
        let mut slope = dot(&g, &d);
        if slope >= 0.0 || !slope.is_finite() {
            h = identity(n);
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut t = 1.0;
        let accepted = loop {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (fnew, gnew) = f(&xn);
            if fnew.is_finite() && gnew.iter().all(|v| v.is_finite()) && fnew <= fx + ARMIJO_C * t * slope {
                break Some((xn, fnew, gnew));
            }
            t *= 0.5;
            if t < MIN_STEP {
                break None;
            }
        };
        let Some((xn, fnew, gnew)) = accepted else {
            return BfgsResult { x, f: fx, iterations: it, converged: false };
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first {
                let scale = sy / dot(&y, &y);
                h.iter_mut().for_each(|v| *v *= scale);
                first = false;
            }
            update(&mut h, &s, &y, sy, n);
        }
        let progress = fx - fnew;
        x = xn;
        fx = fnew;
        g = gnew;
        if progress == 0.0 && inf_norm(&s) == 0.0 {
            return BfgsResult { x, f: fx, iterations: it + 1, converged: false };
        }
    }
    let converged = inf_norm(&g) < opts.grad_tol;
    BfgsResult { x, f: fx, iterations: opts.max_iter, converged }
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn matvec(h: &[f64], v: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|i| dot(&h[i * n..(i + 1) * n], v)).collect()
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1 / sᵀy`.
fn update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64, n: usize) {
    let rho = 1.0 / sy;
    let hy = matvec(h, y, n);
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (f, g)
    }

    #[test]
    fn solves_rosenbrock() {
        let r = minimize(rosenbrock, &[-1.2, 1.0], &BfgsOptions::default());
        assert!(r.converged, "{r:?}");
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_in_few_steps() {
        let q = |x: &[f64]| {
            let f = 3.0 * x[0] * x[0] + x[0] * x[1] + 2.0 * x[1] * x[1] - x[0];
            (f, vec![6.0 * x[0] + x[1] - 1.0, x[0] + 4.0 * x[1]])
        };
        let r = minimize(q, &[5.0, -3.0], &BfgsOptions::default());
        // exact minimizer of the quadratic
        assert!((r.x[0] - 4.0 / 23.0).abs() < 1e-9 && (r.x[1] + 1.0 / 23.0).abs() < 1e-9);
        assert!(r.iterations < 20);
    }

    #[test]
    fn non_finite_start_is_returned_unchanged() {
        let r = minimize(|_| (f64::NAN, vec![0.0]), &[1.0], &BfgsOptions::default());
        assert_eq!(r.x, vec![1.0]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn infinite_region_is_avoided() {
        // finite only for x < 1
        let f = |x: &[f64]| if x[0] < 1.0 { ((x[0] - 0.9).powi(2), vec![2.0 * (x[0] - 0.9)]) } else { (f64::INFINITY, vec![0.0]) };
        let r = minimize(f, &[-5.0], &BfgsOptions::default());
        assert!((r.x[0] - 0.9).abs() < 1e-6);
    }
}
