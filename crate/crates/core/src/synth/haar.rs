use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Householder QR of a square matrix: returns `(Q, R)` with `A = Q R`.
pub fn householder_qr(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "square matrices only");
    let mut r = a.clone();
    let mut q = Array2::<f64>::eye(n);
    for k in 0..n.saturating_sub(1) {
        let norm = (k..n).map(|i| r[[i, k]] * r[[i, k]]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[[k, k]] >= 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| r[[i, k]]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- (I - 2vv'/v'v) R
        for j in 0..n {
            let dot: f64 = (k..n).map(|i| v[i - k] * r[[i, j]]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                r[[i, j]] -= f * v[i - k];
            }
        }
        // Q <- Q (I - 2vv'/v'v)
        for i in 0..n {
            let dot: f64 = (k..n).map(|j| q[[i, j]] * v[j - k]).sum();
            let f = 2.0 * dot / vnorm2;
            for j in k..n {
                q[[i, j]] -= f * v[j - k];
            }
        }
    }
    (q, r)
}

/// Haar-uniform random orthogonal matrix: QR of a standard Gaussian matrix
/// with the columns of Q sign-corrected by the diagonal of R.
pub fn haar_rotation<R: Rng + ?Sized>(w: usize, rng: &mut R) -> Array2<f64> {
    assert!(w >= 1);
    let g = Array2::from_shape_simple_fn((w, w), || StandardNormal.sample(rng));
    let (mut q, r) = householder_qr(&g);
    for j in 0..w {
        if r[[j, j]] < 0.0 {
            q.column_mut(j).mapv_inplace(|v| -v);
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_orth_error(q: &Array2<f64>) -> f64 {
        let qtq = q.t().dot(q);
        let eye = Array2::<f64>::eye(q.nrows());
        (&qtq - &eye).iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    #[test]
    fn qr_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Array2::from_shape_simple_fn((6, 6), || StandardNormal.sample(&mut rng));
        let (q, r) = householder_qr(&a);
        let back = q.dot(&r);
        assert!((&back - &a).iter().all(|v| v.abs() < 1e-12));
        for i in 0..6 {
            for j in 0..i {
                assert!(r[[i, j]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_dimensional_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = [false; 2];
        for _ in 0..50 {
            let q = haar_rotation(1, &mut rng);
            let v = q[[0, 0]];
            assert!(v == 1.0 || v == -1.0);
            seen[usize::from(v > 0.0)] = true;
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn orthogonal_for_all_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for w in 1..=10 {
            for _ in 0..20 {
                assert!(max_orth_error(&haar_rotation(w, &mut rng)) <= 1e-10);
            }
        }
    }
}
