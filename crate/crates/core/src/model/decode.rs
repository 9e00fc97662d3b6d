use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{encode, next_logits, Memory};
use super::params::Params;
use super::{Float, ModelError};
use crate::codec::{PointGrid, Token, Vocabulary};
use crate::expr::{BinaryOp, UnaryOp};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum DecodeMode {
    Beam,
    Sample { temperature: f64, seed: u64 },
}

/// Token constraints that keep every emitted prefix completable into a
/// well-formed expression over `width` variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grammar {
    pub width: usize,
    pub binary: Vec<BinaryOp>,
    pub unary: Vec<UnaryOp>,
}

#[derive(Debug, Clone)]
pub struct DecodeOptions {
    pub k: usize,
    pub mode: DecodeMode,
    /// Cap on sequence length including BOS and EOS; defaults to the model's.
    pub max_len: Option<usize>,
    pub grammar: Option<Grammar>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub ids: Vec<u32>,
    pub tokens: Vec<Token>,
    /// Summed log-probability of the generated tokens.
    pub log_prob: f64,
}

impl Decoded {
    /// Length-normalized score used to rank beams.
    pub fn score(&self) -> f64 {
        self.log_prob / (self.ids.len().saturating_sub(1)).max(1) as f64
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&Token::Eos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct State {
    /// Subtrees still to be emitted.
    open: usize,
    /// Tokens of the current float already emitted (0 when not inside one).
    float: u8,
}

impl State {
    fn start() -> Self {
        Self { open: 1, float: 0 }
    }

    fn after(self, t: Token) -> Option<State> {
        match (self.float, t) {
            (1, Token::Mantissa(m)) if m == 0 || m >= 1000 => Some(State { float: 2, ..self }),
            (2, Token::Exponent(_)) => Some(State { float: 0, ..self }),
            (0, _) if self.open == 0 => (t == Token::Eos).then_some(self),
            (0, Token::Binary(_)) => Some(State { open: self.open + 1, float: 0 }),
            (0, Token::Unary(_)) => Some(self),
            (0, Token::Var(_)) => Some(State { open: self.open - 1, float: 0 }),
            (0, Token::Plus | Token::Minus) => Some(State { open: self.open - 1, float: 1 }),
            _ => None,
        }
    }

    /// Fewest further tokens that finish the sequence, EOS included.
    fn min_finish(self) -> usize {
        let rest_float = match self.float {
            1 => 2,
            2 => 1,
            _ => 0,
        };
        rest_float + self.open + 1
    }
}

struct Mask {
    allowed: Vec<bool>,
}

impl Grammar {
    fn permits(&self, t: Token) -> bool {
        match t {
            Token::Binary(op) => self.binary.contains(&op),
            Token::Unary(op) => self.unary.contains(&op),
            Token::Var(w) => (w as usize) < self.width,
            Token::Pad | Token::Bos => false,
            _ => true,
        }
    }

    fn mask(&self, vocab: &Vocabulary, state: State, len: usize, max_len: usize) -> Mask {
        let allowed = vocab
            .tokens()
            .iter()
            .map(|&t| {
                self.permits(t)
                    && state.after(t).is_some_and(|s| t == Token::Eos || len + 1 + s.min_finish() <= max_len)
            })
            .collect();
        Mask { allowed }
    }
}

fn log_softmax(logits: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return;
    }
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    for v in logits.iter_mut() {
        *v -= z;
    }
}

struct Beam {
    ids: Vec<u32>,
    log_prob: f64,
    state: State,
}

fn step_scores<F: Float>(
    p: &Params<F>,
    mem: &Memory<F>,
    vocab: &Vocabulary,
    beam: &Beam,
    grammar: Option<&Grammar>,
    max_len: usize,
    temperature: f64,
) -> Result<Vec<f64>, ModelError> {
    let mut l = next_logits(p, &beam.ids, mem)?;
    if temperature != 1.0 {
        for v in l.iter_mut() {
            *v /= temperature;
        }
    }
    // PAD and BOS are never emitted
    l[0] = f64::NEG_INFINITY;
    l[1] = f64::NEG_INFINITY;
    if let Some(g) = grammar {
        let mask = g.mask(vocab, beam.state, beam.ids.len(), max_len);
        for (v, ok) in l.iter_mut().zip(mask.allowed) {
            if !ok {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    log_softmax(&mut l);
    Ok(l)
}

fn finish(vocab: &Vocabulary, b: Beam) -> Decoded {
    let tokens = b.ids.iter().map(|&i| vocab.token(i).expect("id from vocabulary")).collect();
    Decoded { ids: b.ids, tokens, log_prob: b.log_prob }
}

fn advance(state: State, t: Token) -> State {
    state.after(t).unwrap_or(state)
}

/// Exactly `k` sequences, each starting with BOS and ending at EOS or the
/// length cap.
pub fn decode_candidates<F: Float>(p: &Params<F>, grid: &PointGrid, opts: &DecodeOptions) -> Result<Vec<Decoded>, ModelError> {
    assert!(opts.k >= 1, "k must be at least 1");
    let cfg = &p.layout.config;
    let max_len = opts.max_len.unwrap_or(cfg.max_len).min(cfg.max_len);
    let vocab = Vocabulary::decoder(cfg.w_max);
    let mem = encode(p, &grid.ids, grid.rows)?;
    let eos = 2u32;
    let grammar = opts.grammar.as_ref();
    match opts.mode {
        DecodeMode::Beam => {
            let mut alive = vec![Beam { ids: vec![1], log_prob: 0.0, state: State::start() }];
            let mut done: Vec<Decoded> = Vec::new();
            while !alive.is_empty() && done.len() < opts.k {
                let mut cands: Vec<(f64, usize, u32)> = Vec::new();
                for (bi, b) in alive.iter().enumerate() {
                    let lp = step_scores(p, &mem, &vocab, b, grammar, max_len, 1.0)?;
                    let mut idx: Vec<u32> = (0..lp.len() as u32).filter(|&i| lp[i as usize].is_finite()).collect();
                    idx.sort_by(|&a, &c| lp[c as usize].total_cmp(&lp[a as usize]).then(a.cmp(&c)));
                    idx.truncate(opts.k);
                    cands.extend(idx.into_iter().map(|t| (b.log_prob + lp[t as usize], bi, t)));
                }
                cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                cands.truncate(opts.k);
                let mut next = Vec::with_capacity(opts.k);
                for (lp, bi, t) in cands {
                    let prev = &alive[bi];
                    let mut ids = prev.ids.clone();
                    ids.push(t);
                    let tok = vocab.token(t).expect("id from vocabulary");
                    let beam = Beam { ids, log_prob: lp, state: advance(prev.state, tok) };
                    if t == eos || beam.ids.len() >= max_len {
                        done.push(finish(&vocab, beam));
                    } else {
                        next.push(beam);
                    }
                }
                alive = next;
            }
            done.sort_by(|a, b| b.score().total_cmp(&a.score()));
            done.truncate(opts.k);
            let mut rest: Vec<Decoded> = alive.into_iter().map(|b| finish(&vocab, b)).collect();
            rest.sort_by(|a, b| b.score().total_cmp(&a.score()));
            done.extend(rest.into_iter().take(opts.k - done.len()));
            Ok(done)
        }
        DecodeMode::Sample { temperature, seed } => {
            let mut out = Vec::with_capacity(opts.k);
            for i in 0..opts.k {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut b = Beam { ids: vec![1], log_prob: 0.0, state: State::start() };
                while b.ids.len() < max_len && b.ids.last() != Some(&eos) {
                    let greedy = temperature <= 1e-6;
                    let lp = step_scores(p, &mem, &vocab, &b, grammar, max_len, if greedy { 1.0 } else { temperature })?;
                    let t = if greedy {
                        argmax(&lp)
                    } else {
                        let w: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                        match WeightedIndex::new(&w) {
                            Ok(d) => d.sample(&mut rng) as u32,
                            Err(_) => argmax(&lp),
                        }
                    };
                    let tok = vocab.token(t).expect("id from vocabulary");
                    b.log_prob += lp[t as usize];
                    b.state = advance(b.state, tok);
                    b.ids.push(t);
                }
                out.push(finish(&vocab, b));
            }
            Ok(out)
        }
    }
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best as u32
}
