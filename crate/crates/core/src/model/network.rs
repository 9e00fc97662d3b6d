use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::layers::{
    attention, attention_bwd, ffn, ffn_bwd, kv_bwd, layer_norm, layer_norm_bwd, linear, linear_bwd, positions,
    project_kv, AttnCache, FfnCache, Kv, LnCache,
};
use super::params::Params;
use super::{Float, ModelError};
use crate::par;
use crate::synth::CorpusLine;

/// One training pair: encoder token grid and decoder ids `BOS ... EOS`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub rows: usize,
    /// Row-major `rows × grid_width` encoder ids.
    pub grid: Vec<u32>,
    pub target: Vec<u32>,
}

impl From<&CorpusLine> for Sample {
    fn from(l: &CorpusLine) -> Self {
        Sample { id: l.index, rows: l.input_tokens.len(), grid: l.input_tokens.concat(), target: l.target_tokens.clone() }
    }
}

struct EmbedCache<F> {
    ids: Vec<u32>,
    e: Array2<F>,
    h_pre: Array2<F>,
    h: Array2<F>,
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<(), ModelError> {
    match ids.iter().find(|&&i| i as usize >= vocab) {
        Some(&id) => Err(ModelError::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

fn embed_fwd<F: Float>(p: &Params<F>, grid: &[u32], rows: usize) -> Result<(Array2<F>, EmbedCache<F>), ModelError> {
    let cfg = &p.layout.config;
    let (gw, d) = (cfg.grid_width(), cfg.d_emb);
    assert_eq!(grid.len(), rows * gw, "grid shape");
    check_ids(grid, cfg.enc_vocab())?;
    let idx = p.layout.index.emb_ffn;
    let table = p.mat(p.layout.index.emb_tok);
    let mut e = Array2::zeros((rows, gw * d));
    for (r, mut row) in e.rows_mut().into_iter().enumerate() {
        for c in 0..gw {
            let id = grid[r * gw + c] as usize;
            row.slice_mut(s![c * d..(c + 1) * d]).assign(&table.row(id));
        }
    }
    let h_pre = linear(e.view(), p, idx.w1, idx.b1);
    let h = super::layers::relu(&h_pre);
    let out = linear(h.view(), p, idx.w2, idx.b2);
    Ok((out, EmbedCache { ids: grid.to_vec(), e, h_pre, h }))
}

fn embed_bwd<F: Float>(dout: ArrayView2<F>, c: &EmbedCache<F>, p: &Params<F>, g: &mut Params<F>) {
    let idx = p.layout.index.emb_ffn;
    let cfg = &p.layout.config;
    let (gw, d) = (cfg.grid_width(), cfg.d_emb);
    let mut dh = linear_bwd(c.h.view(), dout, p, g, idx.w2, idx.b2);
    dh.zip_mut_with(&c.h_pre, |v, &h| {
        if h <= F::zero() {
            *v = F::zero();
        }
    });
    let de = linear_bwd(c.e.view(), dh.view(), p, g, idx.w1, idx.b1);
    let mut table = g.mat_mut(p.layout.index.emb_tok);
    for (r, row) in de.rows().into_iter().enumerate() {
        for col in 0..gw {
            let id = c.ids[r * gw + col] as usize;
            let mut t = table.row_mut(id);
            t.zip_mut_with(&row.slice(s![col * d..(col + 1) * d]), |a, &b| *a += b);
        }
    }
}

/// Per-point embeddings, `rows × d_emb`.
pub fn embed_bag<F: Float>(p: &Params<F>, grid: &[u32], rows: usize) -> Result<Array2<F>, ModelError> {
    embed_fwd(p, grid, rows).map(|(x, _)| x)
}

struct EncLayerCache<F> {
    ln1: LnCache<F>,
    kv: Kv<F>,
    a_in: Array2<F>,
    attn: AttnCache<F>,
    ln2: LnCache<F>,
    ffn: FfnCache<F>,
}

struct EncCache<F> {
    embed: EmbedCache<F>,
    layers: Vec<EncLayerCache<F>>,
    ln: LnCache<F>,
}

fn encode_fwd<F: Float>(p: &Params<F>, grid: &[u32], rows: usize) -> Result<(Array2<F>, EncCache<F>), ModelError> {
    let heads = p.layout.config.heads;
    let (mut x, embed) = embed_fwd(p, grid, rows)?;
    let mut layers = Vec::with_capacity(p.layout.index.enc.len());
    for blk in &p.layout.index.enc {
        let (a_in, ln1) = layer_norm(x.view(), p, blk.ln1);
        let kv = project_kv(a_in.view(), p, blk.attn);
        let (a, attn) = attention(a_in.view(), &kv, p, blk.attn, heads, false);
        x += &a;
        let (f_in, ln2) = layer_norm(x.view(), p, blk.ln2);
        let (f, ffn_c) = ffn(f_in.view(), p, blk.ffn);
        x += &f;
        layers.push(EncLayerCache { ln1, kv, a_in, attn, ln2, ffn: ffn_c });
    }
    let (mem, ln) = layer_norm(x.view(), p, p.layout.index.enc_ln);
    Ok((mem, EncCache { embed, layers, ln }))
}

fn encode_bwd<F: Float>(dmem: ArrayView2<F>, c: &EncCache<F>, p: &Params<F>, g: &mut Params<F>) {
    let heads = p.layout.config.heads;
    let mut dx = layer_norm_bwd(dmem, &c.ln, p, g, p.layout.index.enc_ln);
    for (blk, lc) in p.layout.index.enc.iter().zip(&c.layers).rev() {
        let df = ffn_bwd(dx.view(), &lc.ffn, p, g, blk.ffn);
        dx += &layer_norm_bwd(df.view(), &lc.ln2, p, g, blk.ln2);
        let (dq, dk, dv) = attention_bwd(dx.view(), &lc.attn, &lc.kv, p, g, blk.attn, heads);
        let mut da = dq;
        da += &kv_bwd(lc.a_in.view(), dk.view(), dv.view(), p, g, blk.attn);
        dx += &layer_norm_bwd(da.view(), &lc.ln1, p, g, blk.ln1);
    }
    embed_bwd(dx.view(), &c.embed, p, g);
}

/// Encoder output with every decoder layer's cross-attention keys and values.
pub(crate) struct Memory<F> {
    pub h: Array2<F>,
    pub kv: Vec<Kv<F>>,
}

pub(crate) fn memory<F: Float>(p: &Params<F>, h: Array2<F>) -> Memory<F> {
    let kv = p.layout.index.dec.iter().map(|blk| project_kv(h.view(), p, blk.cross)).collect();
    Memory { h, kv }
}

pub(crate) fn encode<F: Float>(p: &Params<F>, grid: &[u32], rows: usize) -> Result<Memory<F>, ModelError> {
    let (h, _) = encode_fwd(p, grid, rows)?;
    Ok(memory(p, h))
}

struct DecLayerCache<F> {
    ln1: LnCache<F>,
    a_in: Array2<F>,
    kv: Kv<F>,
    self_attn: AttnCache<F>,
    ln2: LnCache<F>,
    cross: AttnCache<F>,
    ln3: LnCache<F>,
    ffn: FfnCache<F>,
}

struct DecCache<F> {
    ids: Vec<u32>,
    layers: Vec<DecLayerCache<F>>,
    ln: LnCache<F>,
    h: Array2<F>,
}

fn decode_fwd<F: Float>(p: &Params<F>, ids: &[u32], mem: &Memory<F>) -> Result<DecCache<F>, ModelError> {
    let cfg = &p.layout.config;
    if ids.len() > cfg.max_len {
        return Err(ModelError::TooLong { len: ids.len(), max: cfg.max_len });
    }
    check_ids(ids, cfg.dec_vocab())?;
    let d = cfg.d_emb;
    let scale = F::lit((d as f64).sqrt());
    let table = p.mat(p.layout.index.dec_tok);
    let mut x = positions::<F>(ids.len(), d);
    for (mut row, &id) in x.rows_mut().into_iter().zip(ids) {
        row.zip_mut_with(&table.row(id as usize), |a, &b| *a += b * scale);
    }
    let mut layers = Vec::with_capacity(p.layout.index.dec.len());
    for (blk, ckv) in p.layout.index.dec.iter().zip(&mem.kv) {
        let (a_in, ln1) = layer_norm(x.view(), p, blk.ln1);
        let kv = project_kv(a_in.view(), p, blk.self_attn);
        let (a, self_attn) = attention(a_in.view(), &kv, p, blk.self_attn, cfg.heads, true);
        x += &a;
        let (c_in, ln2) = layer_norm(x.view(), p, blk.ln2);
        let (c, cross) = attention(c_in.view(), ckv, p, blk.cross, cfg.heads, false);
        x += &c;
        let (f_in, ln3) = layer_norm(x.view(), p, blk.ln3);
        let (f, ffn_c) = ffn(f_in.view(), p, blk.ffn);
        x += &f;
        layers.push(DecLayerCache { ln1, a_in, kv, self_attn, ln2, cross, ln3, ffn: ffn_c });
    }
    let (h, ln) = layer_norm(x.view(), p, p.layout.index.dec_ln);
    Ok(DecCache { ids: ids.to_vec(), layers, ln, h })
}

/// Returns the gradient with respect to the encoder output.
fn decode_bwd<F: Float>(dh: ArrayView2<F>, c: &DecCache<F>, mem: &Memory<F>, p: &Params<F>, g: &mut Params<F>) -> Array2<F> {
    let cfg = &p.layout.config;
    let mut dmem = Array2::zeros(mem.h.raw_dim());
    let mut dx = layer_norm_bwd(dh, &c.ln, p, g, p.layout.index.dec_ln);
    for ((blk, lc), ckv) in p.layout.index.dec.iter().zip(&c.layers).zip(&mem.kv).rev() {
        let df = ffn_bwd(dx.view(), &lc.ffn, p, g, blk.ffn);
        dx += &layer_norm_bwd(df.view(), &lc.ln3, p, g, blk.ln3);
        let (dc, dk, dv) = attention_bwd(dx.view(), &lc.cross, ckv, p, g, blk.cross, cfg.heads);
        dmem += &kv_bwd(mem.h.view(), dk.view(), dv.view(), p, g, blk.cross);
        dx += &layer_norm_bwd(dc.view(), &lc.ln2, p, g, blk.ln2);
        let (dq, dk, dv) = attention_bwd(dx.view(), &lc.self_attn, &lc.kv, p, g, blk.self_attn, cfg.heads);
        let mut da = dq;
        da += &kv_bwd(lc.a_in.view(), dk.view(), dv.view(), p, g, blk.self_attn);
        dx += &layer_norm_bwd(da.view(), &lc.ln1, p, g, blk.ln1);
    }
    let scale = F::lit((cfg.d_emb as f64).sqrt());
    let mut table = g.mat_mut(p.layout.index.dec_tok);
    for (row, &id) in dx.rows().into_iter().zip(&c.ids) {
        table.row_mut(id as usize).zip_mut_with(&row, |a, &b| *a += b * scale);
    }
    dmem
}

/// Decoder logits for the given prefix, one row per position.
pub(crate) fn logits_from<F: Float>(p: &Params<F>, ids: &[u32], mem: &Memory<F>) -> Result<Array2<F>, ModelError> {
    let c = decode_fwd(p, ids, mem)?;
    Ok(linear(c.h.view(), p, p.layout.index.out_w, p.layout.index.out_b))
}

/// Logits of the next token after `ids`.
pub(crate) fn next_logits<F: Float>(p: &Params<F>, ids: &[u32], mem: &Memory<F>) -> Result<Vec<f64>, ModelError> {
    let c = decode_fwd(p, ids, mem)?;
    let last = c.h.slice(s![c.h.nrows() - 1.., ..]);
    let l = linear(last, p, p.layout.index.out_w, p.layout.index.out_b);
    Ok(l.iter().map(|v| v.as_f64()).collect())
}

/// Teacher-forced logits, `len(target_in) × dec_vocab`. `target_in` must
/// start with BOS.
pub fn forward<F: Float>(p: &Params<F>, grid: &[u32], rows: usize, target_in: &[u32]) -> Result<Array2<F>, ModelError> {
    let mem = encode(p, grid, rows)?;
    logits_from(p, target_in, &mem)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchStats {
    /// Summed token cross-entropy.
    pub loss_sum: f64,
    pub tokens: usize,
    pub correct: usize,
}

impl BatchStats {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.tokens.max(1) as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }

    pub fn merge(&mut self, o: &BatchStats) {
        self.loss_sum += o.loss_sum;
        self.tokens += o.tokens;
        self.correct += o.correct;
    }
}

/// Sum over eight interleaved accumulators, finished in f64.
fn lane_sum<F: Float>(v: &[F]) -> f64 {
    let mut acc = [F::zero(); 8];
    let mut chunks = v.chunks_exact(8);
    for c in &mut chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    acc.iter().chain(chunks.remainder()).map(|x| x.as_f64()).sum()
}

/// Replaces logits by `softmax - onehot` scaled by `scale`, returning the
/// sample's statistics. PAD labels are skipped.
fn softmax_xent<F: Float>(logits: &mut Array2<F>, labels: &[u32], scale: f64) -> BatchStats {
    let mut st = BatchStats::default();
    for (mut row, &y) in logits.rows_mut().into_iter().zip(labels) {
        if y == 0 {
            row.fill(F::zero());
            continue;
        }
        let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let argmax = row.iter().position(|&v| v == m).unwrap_or(0);
        let target = row[y as usize];
        let vals = row.as_slice_mut().expect("contiguous logits");
        for v in vals.iter_mut() {
            *v = (*v - m).exp_kernel();
        }
        let z = lane_sum(vals);
        st.loss_sum += z.ln() - (target - m).as_f64();
        st.tokens += 1;
        st.correct += usize::from(argmax == y as usize);
        let k = F::lit(scale / z);
        row.mapv_inplace(|v| v * k);
        row[y as usize] -= F::lit(scale);
    }
    st
}

fn sample_grads<F: Float>(p: &Params<F>, s: &Sample, scale: f64, g: &mut Params<F>) -> Result<BatchStats, ModelError> {
    let n = s.target.len();
    if n < 2 {
        return Err(ModelError::TooLong { len: n, max: p.layout.config.max_len });
    }
    let (h, enc) = encode_fwd(p, &s.grid, s.rows)?;
    let mem = memory(p, h);
    let dec = decode_fwd(p, &s.target[..n - 1], &mem)?;
    let idx = &p.layout.index;
    let mut logits = linear(dec.h.view(), p, idx.out_w, idx.out_b);
    let st = softmax_xent(&mut logits, &s.target[1..], scale);
    let dh = linear_bwd(dec.h.view(), logits.view(), p, g, idx.out_w, idx.out_b);
    let dmem = decode_bwd(dh.view(), &dec, &mem, p, g);
    encode_bwd(dmem.view(), &enc, p, g);
    Ok(st)
}

/// Samples per gradient worker; fixed so summation order never depends on
/// the thread count.
pub const GRAD_CHUNK: usize = 4;

/// Mean token cross-entropy over the batch and its gradient.
pub fn loss_and_grads<F: Float>(
    p: &Params<F>,
    batch: &[Sample],
    batch_id: u64,
) -> Result<(BatchStats, Params<F>), ModelError> {
    let total: usize = batch.iter().map(|s| s.target.iter().skip(1).filter(|&&t| t != 0).count()).sum();
    let scale = 1.0 / total.max(1) as f64;
    let chunks: Vec<&[Sample]> = batch.chunks(GRAD_CHUNK).collect();
    let parts = par::map(&chunks, |chunk| {
        let mut g = Params::zeros(p.layout.clone());
        let mut st = BatchStats::default();
        for s in chunk.iter() {
            st.merge(&sample_grads(p, s, scale, &mut g)?);
        }
        Ok::<_, ModelError>((st, g))
    });
    let mut stats = BatchStats::default();
    let mut grads: Option<Params<F>> = None;
    for part in parts {
        let (st, g) = part?;
        stats.merge(&st);
        match grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads = Some(g),
        }
    }
    if !stats.loss_sum.is_finite() {
        return Err(ModelError::NonFiniteLoss { batch: batch_id });
    }
    Ok((stats, grads.unwrap_or_else(|| Params::zeros(p.layout.clone()))))
}

/// Teacher-forced statistics without gradients.
pub fn evaluate_batch<F: Float>(p: &Params<F>, batch: &[Sample]) -> Result<BatchStats, ModelError> {
    let parts = par::map(batch, |s| {
        let n = s.target.len();
        let mut logits = forward(p, &s.grid, s.rows, &s.target[..n - 1])?;
        Ok::<_, ModelError>(softmax_xent(&mut logits, &s.target[1..], 0.0))
    });
    let mut st = BatchStats::default();
    for part in parts {
        st.merge(&part?);
    }
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::model::Layout;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig { d_emb: 8, enc_layers: 1, dec_layers: 1, heads: 2, ffn_mult: 2, w_max: 1, max_len: 16 }
    }

    fn random_sample(cfg: &ModelConfig, rng: &mut impl Rng, rows: usize, len: usize) -> Sample {
        let ev = cfg.enc_vocab() as u32;
        let dv = cfg.dec_vocab() as u32;
        let mut target = vec![1];
        target.extend((0..len).map(|_| rng.gen_range(3..dv)));
        target.push(2);
        Sample { id: 0, rows, grid: (0..rows * cfg.grid_width()).map(|_| rng.gen_range(0..ev)).collect(), target }
    }

    fn random_params(cfg: &ModelConfig, seed: u64) -> Params<f64> {
        let layout = Arc::new(Layout::new(cfg));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::<f64>::init(layout.clone(), &mut rng);
        // non-trivial output layer, gains and biases
        for e in layout.entries() {
            if e.name.starts_with("out") || e.name.ends_with(".b") || e.name.ends_with(".g") {
                for v in &mut p.data[e.offset..e.offset + e.len()] {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
        }
        p
    }

    #[test]
    fn logits_shape_and_initial_loss() {
        let cfg = tiny();
        let layout = Arc::new(Layout::new(&cfg));
        let p = Params::<f64>::init(layout, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = random_sample(&cfg, &mut rng, 5, 4);
        let l = forward(&p, &s.grid, s.rows, &s.target[..5]).unwrap();
        assert_eq!(l.dim(), (5, cfg.dec_vocab()));
        let (st, _) = loss_and_grads(&p, &[s], 0).unwrap();
        assert!((st.mean_loss() - (cfg.dec_vocab() as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn encoder_is_permutation_invariant() {
        let cfg = tiny();
        let p = random_params(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = random_sample(&cfg, &mut rng, 7, 3);
        let grid = crate::codec::PointGrid::from_rows(cfg.grid_width(), s.grid.clone());
        let order = [3, 0, 6, 1, 5, 2, 4];
        let perm = grid.permuted(&order);
        let a = forward(&p, &s.grid, 7, &s.target).unwrap();
        let b = forward(&p, &perm.ids, 7, &s.target).unwrap();
        assert!((&a - &b).iter().all(|v| v.abs() <= 1e-9));
        let ea = embed_bag(&p, &s.grid, 7).unwrap();
        let eb = embed_bag(&p, &perm.ids, 7).unwrap();
        for (i, &k) in order.iter().enumerate() {
            assert_eq!(ea.row(k), eb.row(i));
        }
    }

    #[test]
    fn causal_mask_holds() {
        let cfg = tiny();
        let p = random_params(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = random_sample(&cfg, &mut rng, 4, 6);
        let a = forward(&p, &s.grid, 4, &s.target).unwrap();
        let mut t2 = s.target.clone();
        t2[4] = 5;
        let b = forward(&p, &s.grid, 4, &t2).unwrap();
        for pos in 0..4 {
            assert_eq!(a.row(pos), b.row(pos));
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn batch_of_copies_has_single_sample_loss() {
        let cfg = tiny();
        let p = random_params(&cfg, 7);
        let s = random_sample(&cfg, &mut ChaCha8Rng::seed_from_u64(8), 3, 5);
        let (one, g1) = loss_and_grads(&p, std::slice::from_ref(&s), 0).unwrap();
        let (many, g9) = loss_and_grads(&p, &vec![s; 9], 0).unwrap();
        assert!((one.mean_loss() - many.mean_loss()).abs() < 1e-12);
        assert!(g1.data.iter().zip(&g9.data).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let cfg = tiny();
        let p = random_params(&cfg, 9);
        let mut s = random_sample(&cfg, &mut ChaCha8Rng::seed_from_u64(10), 2, 2);
        s.grid[0] = cfg.enc_vocab() as u32;
        assert!(matches!(forward(&p, &s.grid, 2, &s.target), Err(ModelError::TokenOutOfRange { .. })));
        let long = vec![1u32; cfg.max_len + 1];
        let ok = random_sample(&cfg, &mut ChaCha8Rng::seed_from_u64(11), 2, 2);
        assert!(matches!(forward(&p, &ok.grid, 2, &long), Err(ModelError::TooLong { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = tiny();
        let mut p = random_params(&cfg, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let batch: Vec<Sample> = (0..2).map(|_| random_sample(&cfg, &mut rng, 4, 3)).collect();
        let (_, g) = loss_and_grads(&p, &batch, 0).unwrap();
        let loss = |p: &Params<f64>| loss_and_grads(p, &batch, 0).unwrap().0.mean_loss();
        let h = 1e-4;
        let mut checked = 0;
        for e in p.layout.clone().entries() {
            // embedding rows only carry gradient where tokens occur
            let picks: Vec<usize> = if e.name.ends_with("tok") {
                let used: Vec<u32> = if e.name.starts_with("embed") {
                    batch.iter().flat_map(|s| s.grid.clone()).collect()
                } else {
                    batch.iter().flat_map(|s| s.target.clone()).collect()
                };
                (0..4).map(|k| used[k * 3 % used.len()] as usize * e.cols + k % e.cols).collect()
            } else {
                (0..4).map(|_| rng.gen_range(0..e.len())).collect()
            };
            for k in picks {
                let i = e.offset + k;
                let orig = p.data[i];
                p.data[i] = orig + h;
                let up = loss(&p);
                p.data[i] = orig - h;
                let down = loss(&p);
                p.data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g.data[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                assert!(rel <= 1e-4, "{} [{k}]: analytic {an:e} vs fd {fd:e}", e.name);
                checked += 1;
            }
        }
        assert!(checked >= 100);
    }
}
