//! Forward and backward kernels shared by the embedder, encoder and decoder.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::params::{AttnIdx, FfnIdx, LnIdx, Params};
use super::Float;

const LN_EPS: f64 = 1e-5;

pub(crate) fn linear<F: Float>(x: ArrayView2<F>, p: &Params<F>, w: usize, b: usize) -> Array2<F> {
    let mut y = x.dot(&p.mat(w));
    y += &p.mat(b);
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and returns `dx = dy Wᵀ`.
pub(crate) fn linear_bwd<F: Float>(
    x: ArrayView2<F>,
    dy: ArrayView2<F>,
    p: &Params<F>,
    g: &mut Params<F>,
    w: usize,
    b: usize,
) -> Array2<F> {
    general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut g.mat_mut(w));
    let sums = dy.sum_axis(Axis(0));
    let mut gb = g.mat_mut(b);
    gb.row_mut(0).zip_mut_with(&sums, |a, &v| *a += v);
    dy.dot(&p.mat(w).t())
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

pub(crate) fn layer_norm<F: Float>(x: ArrayView2<F>, p: &Params<F>, idx: LnIdx) -> (Array2<F>, LnCache<F>) {
    let d = F::lit(x.ncols() as f64);
    let eps = F::lit(LN_EPS);
    let mut xhat = x.to_owned();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mu = row.sum() / d;
        row.mapv_inplace(|v| v - mu);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        *r = F::one() / (var + eps).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let mut y = &xhat * &p.mat(idx.g);
    y += &p.mat(idx.b);
    (y, LnCache { xhat, rstd })
}

pub(crate) fn layer_norm_bwd<F: Float>(
    dy: ArrayView2<F>,
    c: &LnCache<F>,
    p: &Params<F>,
    g: &mut Params<F>,
    idx: LnIdx,
) -> Array2<F> {
    let dg = (&dy * &c.xhat).sum_axis(Axis(0));
    let db = dy.sum_axis(Axis(0));
    g.mat_mut(idx.g).row_mut(0).zip_mut_with(&dg, |a, &v| *a += v);
    g.mat_mut(idx.b).row_mut(0).zip_mut_with(&db, |a, &v| *a += v);
    let d = F::lit(dy.ncols() as f64);
    let mut dx = &dy * &p.mat(idx.g);
    for ((mut row, xh), &rs) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(&c.rstd) {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / d;
        Zip::from(&mut row).and(xh).for_each(|v, &h| *v = rs * (*v - m1 - h * m2));
    }
    dx
}

pub(crate) fn relu<F: Float>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

#[derive(Debug, Clone)]
pub(crate) struct FfnCache<F> {
    x: Array2<F>,
    h_pre: Array2<F>,
    h: Array2<F>,
}

pub(crate) fn ffn<F: Float>(x: ArrayView2<F>, p: &Params<F>, idx: FfnIdx) -> (Array2<F>, FfnCache<F>) {
    let h_pre = linear(x, p, idx.w1, idx.b1);
    let h = relu(&h_pre);
    let y = linear(h.view(), p, idx.w2, idx.b2);
    (y, FfnCache { x: x.to_owned(), h_pre, h })
}

pub(crate) fn ffn_bwd<F: Float>(
    dy: ArrayView2<F>,
    c: &FfnCache<F>,
    p: &Params<F>,
    g: &mut Params<F>,
    idx: FfnIdx,
) -> Array2<F> {
    let mut dh = linear_bwd(c.h.view(), dy, p, g, idx.w2, idx.b2);
    Zip::from(&mut dh).and(&c.h_pre).for_each(|d, &h| {
        if h <= F::zero() {
            *d = F::zero();
        }
    });
    linear_bwd(c.x.view(), dh.view(), p, g, idx.w1, idx.b1)
}

/// Keys and values of one attention block, projected once.
#[derive(Debug, Clone)]
pub(crate) struct Kv<F> {
    pub k: Array2<F>,
    pub v: Array2<F>,
}

pub(crate) fn project_kv<F: Float>(x: ArrayView2<F>, p: &Params<F>, idx: AttnIdx) -> Kv<F> {
    Kv { k: linear(x, p, idx.wk, idx.bk), v: linear(x, p, idx.wv, idx.bv) }
}

#[derive(Debug, Clone)]
pub(crate) struct AttnCache<F> {
    q_in: Array2<F>,
    q: Array2<F>,
    probs: Vec<Array2<F>>,
    o: Array2<F>,
}

/// Row-wise softmax in place; with `causal`, row `i` only sees columns
/// `0..=i` and the rest are zero.
fn softmax_rows<F: Float>(s: &mut Array2<F>, causal: bool) {
    for (i, mut row) in s.rows_mut().into_iter().enumerate() {
        let n = if causal { i + 1 } else { row.len() };
        let mut live = row.slice_mut(s![..n]);
        let m = live.fold(F::neg_infinity(), |a, &b| a.max(b));
        live.mapv_inplace(|v| (v - m).exp());
        let z = live.sum();
        live.mapv_inplace(|v| v / z);
        row.slice_mut(s![n..]).fill(F::zero());
    }
}

/// Multi-head scaled dot-product attention followed by the output
/// projection.
pub(crate) fn attention<F: Float>(
    q_in: ArrayView2<F>,
    kv: &Kv<F>,
    p: &Params<F>,
    idx: AttnIdx,
    heads: usize,
    causal: bool,
) -> (Array2<F>, AttnCache<F>) {
    let q = linear(q_in, p, idx.wq, idx.bq);
    let d = q.ncols();
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut o = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&kv.k.slice(cols).t());
        sc.mapv_inplace(|v| v * scale);
        softmax_rows(&mut sc, causal);
        o.slice_mut(cols).assign(&sc.dot(&kv.v.slice(cols)));
        probs.push(sc);
    }
    let out = linear(o.view(), p, idx.wo, idx.bo);
    (out, AttnCache { q_in: q_in.to_owned(), q, probs, o })
}

/// Returns `(dq_in, dk, dv)`; the caller maps `dk`, `dv` back through
/// [`kv_bwd`].
pub(crate) fn attention_bwd<F: Float>(
    dout: ArrayView2<F>,
    c: &AttnCache<F>,
    kv: &Kv<F>,
    p: &Params<F>,
    g: &mut Params<F>,
    idx: AttnIdx,
    heads: usize,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let d_o = linear_bwd(c.o.view(), dout, p, g, idx.wo, idx.bo);
    let d = c.q.ncols();
    let dh = d / heads;
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(kv.k.raw_dim());
    let mut dv = Array2::zeros(kv.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let pr = &c.probs[h];
        let doh = d_o.slice(cols);
        let mut ds = doh.dot(&kv.v.slice(cols).t());
        dv.slice_mut(cols).assign(&pr.t().dot(&doh));
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
            let dot = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<F>();
            Zip::from(&mut drow).and(prow).for_each(|v, &pv| *v = pv * (*v - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&kv.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let dq_in = linear_bwd(c.q_in.view(), dq.view(), p, g, idx.wq, idx.bq);
    (dq_in, dk, dv)
}

/// Gradient of the key/value projections with respect to their input.
pub(crate) fn kv_bwd<F: Float>(
    kv_in: ArrayView2<F>,
    dk: ArrayView2<F>,
    dv: ArrayView2<F>,
    p: &Params<F>,
    g: &mut Params<F>,
    idx: AttnIdx,
) -> Array2<F> {
    let mut dx = linear_bwd(kv_in, dk, p, g, idx.wk, idx.bk);
    dx += &linear_bwd(kv_in, dv, p, g, idx.wv, idx.bv);
    dx
}

/// Sinusoidal position table, `t × d`.
pub(crate) fn positions<F: Float>(t: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 / rate;
        F::lit(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}
