use std::sync::Arc;

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Float, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Embedding,
    Weight,
    Bias,
    Gain,
    /// Zero-initialized output projection.
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub kind: ParamKind,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncBlockIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecBlockIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Index {
    pub emb_tok: usize,
    pub emb_ffn: FfnIdx,
    pub enc: Vec<EncBlockIdx>,
    pub enc_ln: LnIdx,
    pub dec_tok: usize,
    pub dec: Vec<DecBlockIdx>,
    pub dec_ln: LnIdx,
    pub out_w: usize,
    pub out_b: usize,
}

/// Names, shapes and offsets of every tensor in one flat buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub config: ModelConfig,
    entries: Vec<ParamInfo>,
    pub(crate) index: Index,
    total: usize,
}

struct Builder {
    entries: Vec<ParamInfo>,
    offset: usize,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, kind: ParamKind) -> usize {
        self.entries.push(ParamInfo { name, rows, cols, offset: self.offset, kind });
        self.offset += rows * cols;
        self.entries.len() - 1
    }

    fn ln(&mut self, p: &str, d: usize) -> LnIdx {
        LnIdx { g: self.add(format!("{p}.g"), 1, d, ParamKind::Gain), b: self.add(format!("{p}.b"), 1, d, ParamKind::Bias) }
    }

    fn linear(&mut self, p: &str, i: usize, o: usize) -> (usize, usize) {
        (self.add(format!("{p}.w"), i, o, ParamKind::Weight), self.add(format!("{p}.b"), 1, o, ParamKind::Bias))
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIdx {
        let (wq, bq) = self.linear(&format!("{p}.q"), d, d);
        let (wk, bk) = self.linear(&format!("{p}.k"), d, d);
        let (wv, bv) = self.linear(&format!("{p}.v"), d, d);
        let (wo, bo) = self.linear(&format!("{p}.o"), d, d);
        AttnIdx { wq, bq, wk, bk, wv, bv, wo, bo }
    }

    fn ffn(&mut self, p: &str, i: usize, h: usize, o: usize) -> FfnIdx {
        let (w1, b1) = self.linear(&format!("{p}.1"), i, h);
        let (w2, b2) = self.linear(&format!("{p}.2"), h, o);
        FfnIdx { w1, b1, w2, b2 }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.d_emb;
        let f = cfg.ffn_mult * d;
        let mut b = Builder { entries: Vec::new(), offset: 0 };
        let emb_tok = b.add("embed.tok".into(), cfg.enc_vocab(), d, ParamKind::Embedding);
        // embedder hidden width equals d_emb
        let emb_ffn = b.ffn("embed.ffn", cfg.grid_width() * d, d, d);
        let enc = (0..cfg.enc_layers)
            .map(|l| EncBlockIdx {
                ln1: b.ln(&format!("enc.{l}.ln1"), d),
                attn: b.attn(&format!("enc.{l}.attn"), d),
                ln2: b.ln(&format!("enc.{l}.ln2"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, f, d),
            })
            .collect();
        let enc_ln = b.ln("enc.ln", d);
        let dec_tok = b.add("dec.tok".into(), cfg.dec_vocab(), d, ParamKind::Embedding);
        let dec = (0..cfg.dec_layers)
            .map(|l| DecBlockIdx {
                ln1: b.ln(&format!("dec.{l}.ln1"), d),
                self_attn: b.attn(&format!("dec.{l}.self"), d),
                ln2: b.ln(&format!("dec.{l}.ln2"), d),
                cross: b.attn(&format!("dec.{l}.cross"), d),
                ln3: b.ln(&format!("dec.{l}.ln3"), d),
                ffn: b.ffn(&format!("dec.{l}.ffn"), d, f, d),
            })
            .collect();
        let dec_ln = b.ln("dec.ln", d);
        let out_w = b.add("out.w".into(), d, cfg.dec_vocab(), ParamKind::Output);
        let out_b = b.add("out.b".into(), 1, cfg.dec_vocab(), ParamKind::Bias);
        let index = Index { emb_tok, emb_ffn, enc, enc_ln, dec_tok, dec, dec_ln, out_w, out_b };
        Self { config: cfg.clone(), total: b.offset, entries: b.entries, index }
    }

    pub fn entries(&self) -> &[ParamInfo] {
        &self.entries
    }

    pub fn total(&self) -> usize {
        self.total
    }
}

/// All parameters (or gradients) of one model in a single flat buffer.
#[derive(Debug, Clone)]
pub struct Params<F> {
    pub layout: Arc<Layout>,
    pub data: Vec<F>,
}

impl<F: Float> Params<F> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let data = vec![F::zero(); layout.total()];
        Self { layout, data }
    }

    /// Xavier-uniform weights and embeddings, unit gains, zero biases, zero
    /// output projection.
    pub fn init<R: Rng + ?Sized>(layout: Arc<Layout>, rng: &mut R) -> Self {
        let mut p = Self::zeros(layout.clone());
        for e in layout.entries() {
            let slot = &mut p.data[e.offset..e.offset + e.len()];
            match e.kind {
                ParamKind::Weight | ParamKind::Embedding => {
                    let a = (6.0 / (e.rows + e.cols) as f64).sqrt();
                    for v in slot.iter_mut() {
                        *v = F::lit(rng.gen_range(-a..a));
                    }
                }
                ParamKind::Gain => slot.fill(F::one()),
                ParamKind::Bias | ParamKind::Output => {}
            }
        }
        p
    }

    pub fn mat(&self, id: usize) -> ArrayView2<'_, F> {
        let e = &self.layout.entries[id];
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.offset..e.offset + e.len()]).expect("layout shape")
    }

    pub fn mat_mut(&mut self, id: usize) -> ArrayViewMut2<'_, F> {
        let e = &self.layout.entries[id];
        ArrayViewMut2::from_shape((e.rows, e.cols), &mut self.data[e.offset..e.offset + e.len()]).expect("layout shape")
    }

    pub fn info(&self, name: &str) -> Option<&ParamInfo> {
        self.layout.entries.iter().find(|e| e.name == name)
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params { layout: self.layout.clone(), data: self.data.iter().map(|v| G::lit(v.as_f64())).collect() }
    }

    pub fn add_assign(&mut self, other: &Params<F>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}
