//! Hybrid symbolic-numeric tokenization.
//!
//! Reals become three tokens (sign, four-digit mantissa, exponent);
//! expressions are written in prefix order with every constant expanded to
//! its triple. Point sets use a numeric-only encoder vocabulary.

mod vocab;

use crate::bag::SampleBag;
use crate::expr::{Expression, OVERFLOW_LIMIT};

pub use vocab::{Token, VocabKind, Vocabulary, MANTISSA_COUNT, MAX_EXPONENT, MIN_EXPONENT};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("value {0} is outside the encodable range")]
    OutOfRange(f64),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("malformed float triple at position {0}")]
    MalformedFloat(usize),
    #[error("sequence truncated at position {0}")]
    Truncated(usize),
    #[error("unexpected token `{token}` at position {pos}")]
    Unexpected { token: Token, pos: usize },
    #[error("dangling tokens after a complete expression at position {0}")]
    Dangling(usize),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("bag width {width} exceeds w_max {w_max}")]
    TooWide { width: usize, w_max: usize },
    #[error("vocabulary table does not match the built-in layout")]
    VocabularyMismatch,
}

/// A real in scientific notation: `sign * mantissa * 10^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FloatTokens {
    pub negative: bool,
    pub mantissa: u16,
    pub exponent: i16,
}

impl FloatTokens {
    pub fn tokens(self) -> [Token; 3] {
        [
            if self.negative { Token::Minus } else { Token::Plus },
            Token::Mantissa(self.mantissa),
            Token::Exponent(self.exponent),
        ]
    }
}

/// Pure power of ten for integer exponents, exact up to 1e22.
fn pow10(e: i32) -> f64 {
    10f64.powi(e)
}

/// Four significant digits, mantissa normalized into `[1000, 9999]`.
/// Magnitudes that would need an exponent below `E-103` encode as zero.
pub fn encode_float(v: f64) -> Result<FloatTokens, CodecError> {
    if !v.is_finite() {
        return Err(CodecError::NonFinite(v));
    }
    if v.abs() > OVERFLOW_LIMIT {
        return Err(CodecError::OutOfRange(v));
    }
    let zero = FloatTokens { negative: false, mantissa: 0, exponent: 0 };
    if v == 0.0 {
        return Ok(zero);
    }
    let negative = v < 0.0;
    let a = v.abs();
    let mut e = a.log10().floor() as i32 - 3;
    let scaled = |e: i32| if e < 0 { a * pow10(-e) } else { a / pow10(e) };
    let mut m = scaled(e).round();
    // log10 can land one off near powers of ten
    if m < 1000.0 {
        e -= 1;
        m = scaled(e).round();
    }
    if m >= 10_000.0 {
        e += 1;
        m = scaled(e).round();
    }
    if m >= 10_000.0 {
        m = 1000.0;
        e += 1;
    }
    if e < i32::from(MIN_EXPONENT) {
        return Ok(zero);
    }
    debug_assert!((1000.0..10_000.0).contains(&m));
    Ok(FloatTokens { negative, mantissa: m as u16, exponent: e as i16 })
}

pub fn decode_float(t: FloatTokens) -> f64 {
    let m = f64::from(t.mantissa);
    let e = i32::from(t.exponent);
    let a = if e < 0 { m / pow10(-e) } else { m * pow10(e) };
    if t.negative {
        -a
    } else {
        a
    }
}

/// Reads a `(sign, mantissa, exponent)` triple.
pub fn decode_float_tokens(tokens: &[Token]) -> Result<f64, CodecError> {
    match tokens {
        [s, Token::Mantissa(m), Token::Exponent(e)] if matches!(s, Token::Plus | Token::Minus) => {
            Ok(decode_float(FloatTokens { negative: *s == Token::Minus, mantissa: *m, exponent: *e }))
        }
        _ => Err(CodecError::MalformedFloat(0)),
    }
}

/// Round trip through the codec, i.e. the value the model can represent.
pub fn quantize(v: f64) -> Result<f64, CodecError> {
    encode_float(v).map(decode_float)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceRole {
    PointEncoding,
    ExpressionEncoding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub role: SequenceRole,
    pub tokens: Vec<Token>,
}

/// `[BOS, prefix traversal..., EOS]` with constants as float triples.
pub fn encode_expression(expr: &Expression) -> Result<TokenSequence, CodecError> {
    fn go(e: &Expression, out: &mut Vec<Token>) -> Result<(), CodecError> {
        match e {
            Expression::Const(c) => out.extend(encode_float(*c)?.tokens()),
            Expression::Var(w) => out.push(Token::Var(*w as u16)),
            Expression::Unary(op, c) => {
                out.push(Token::Unary(*op));
                go(c, out)?;
            }
            Expression::Binary(op, l, r) => {
                out.push(Token::Binary(*op));
                go(l, out)?;
                go(r, out)?;
            }
        }
        Ok(())
    }
    let mut tokens = vec![Token::Bos];
    go(expr, &mut tokens)?;
    tokens.push(Token::Eos);
    Ok(TokenSequence { role: SequenceRole::ExpressionEncoding, tokens })
}

/// Parses a prefix token stream. A leading BOS is skipped; the tree must be
/// followed by EOS or the end of the stream. Nothing after EOS is read.
pub fn decode_expression(tokens: &[Token]) -> Result<Expression, CodecError> {
    let start = usize::from(tokens.first() == Some(&Token::Bos));
    let end = tokens[start..].iter().position(|&t| t == Token::Eos).map_or(tokens.len(), |p| p + start);
    let body = &tokens[..end];
    let mut pos = start;
    let e = parse(body, &mut pos)?;
    if pos != body.len() {
        return Err(CodecError::Dangling(pos));
    }
    Ok(e)
}

fn parse(tokens: &[Token], pos: &mut usize) -> Result<Expression, CodecError> {
    let at = *pos;
    let tok = *tokens.get(at).ok_or(CodecError::Truncated(at))?;
    *pos += 1;
    match tok {
        Token::Binary(op) => {
            let l = parse(tokens, pos)?;
            let r = parse(tokens, pos)?;
            Ok(Expression::binary(op, l, r))
        }
        Token::Unary(op) => Ok(Expression::unary(op, parse(tokens, pos)?)),
        Token::Var(w) => Ok(Expression::var(w as usize)),
        Token::Plus | Token::Minus => {
            if at + 3 > tokens.len() {
                return Err(CodecError::Truncated(tokens.len()));
            }
            let v = decode_float_tokens(&tokens[at..at + 3]).map_err(|_| CodecError::MalformedFloat(at))?;
            *pos = at + 3;
            Ok(Expression::constant(v))
        }
        other => Err(CodecError::Unexpected { token: other, pos: at }),
    }
}

/// Token grid for a point set: one row per point, `3 * (w_max + 1)` columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointGrid {
    pub rows: usize,
    pub width: usize,
    /// Encoder-vocabulary ids, row-major.
    pub ids: Vec<u32>,
}

impl PointGrid {
    pub fn row(&self, k: usize) -> &[u32] {
        &self.ids[k * self.width..(k + 1) * self.width]
    }

    pub fn from_rows(width: usize, ids: Vec<u32>) -> Self {
        assert_eq!(ids.len() % width, 0);
        Self { rows: ids.len() / width, width, ids }
    }

    /// Copy with rows reordered.
    pub fn permuted(&self, order: &[usize]) -> PointGrid {
        let ids = order.iter().flat_map(|&k| self.row(k).iter().copied()).collect();
        PointGrid { rows: order.len(), width: self.width, ids }
    }
}

/// Each point becomes `w_max` feature slots then one target slot, three
/// tokens per slot. Features beyond the bag width are PAD triples.
pub fn encode_points(bag: &SampleBag, w_max: usize) -> Result<PointGrid, CodecError> {
    let w = bag.width();
    if w > w_max {
        return Err(CodecError::TooWide { width: w, w_max });
    }
    let vocab = Vocabulary::encoder();
    let width = 3 * (w_max + 1);
    let pad = vocab.id(Token::Pad).expect("pad");
    let mut ids = Vec::with_capacity(bag.len() * width);
    let push = |v: f64, ids: &mut Vec<u32>| -> Result<(), CodecError> {
        for t in encode_float(v)?.tokens() {
            ids.push(vocab.id(t).expect("numeric token"));
        }
        Ok(())
    };
    for (k, row) in bag.inputs.rows().into_iter().enumerate() {
        for &v in row.iter() {
            push(v, &mut ids)?;
        }
        ids.extend(std::iter::repeat_n(pad, 3 * (w_max - w)));
        push(bag.targets[k], &mut ids)?;
    }
    Ok(PointGrid { rows: bag.len(), width, ids })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag::Provenance;
    use crate::expr::{BinaryOp, UnaryOp};
    use ndarray::{array, Array2};

    fn ft(negative: bool, mantissa: u16, exponent: i16) -> FloatTokens {
        FloatTokens { negative, mantissa, exponent }
    }

    #[test]
    fn float_examples() {
        assert_eq!(encode_float(9.7341).unwrap(), ft(false, 9734, -3));
        assert_eq!(encode_float(0.0).unwrap(), ft(false, 0, 0));
        assert_eq!(encode_float(-0.042).unwrap(), ft(true, 4200, -5));
        assert_eq!(encode_float(1e100).unwrap(), ft(false, 1000, 97));
        assert_eq!(encode_float(1e-100).unwrap(), ft(false, 1000, -103));
        assert_eq!(encode_float(9.9996).unwrap(), ft(false, 1000, -2));
        assert!(matches!(encode_float(2e100), Err(CodecError::OutOfRange(_))));
        assert!(matches!(encode_float(f64::NAN), Err(CodecError::NonFinite(_))));
        assert_eq!(encode_float(1e-120).unwrap(), ft(false, 0, 0));
    }

    #[test]
    fn float_decode_examples() {
        assert_eq!(decode_float(ft(false, 9734, -3)), 9.734);
        assert_eq!(decode_float(ft(true, 1000, 0)), -1000.0);
        assert!(decode_float_tokens(&[Token::Plus, Token::Exponent(0), Token::Mantissa(1)]).is_err());
    }

    #[test]
    fn expression_examples() {
        let tan = Expression::unary(
            UnaryOp::Tan,
            Expression::mul(Expression::constant(9.7341), Expression::var(0)),
        );
        let seq = encode_expression(&tan).unwrap();
        let expected: Vec<Token> = ["BOS", "tan", "mul", "+", "9734", "E-3", "x0", "EOS"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        assert_eq!(seq.tokens, expected);
        assert_eq!(
            decode_expression(&expected[1..7]).unwrap(),
            Expression::unary(UnaryOp::Tan, Expression::mul(Expression::constant(9.734), Expression::var(0)))
        );

        let leaf = encode_expression(&Expression::var(0)).unwrap();
        assert_eq!(leaf.tokens, vec![Token::Bos, Token::Var(0), Token::Eos]);

        let add = encode_expression(&Expression::add(Expression::var(0), Expression::constant(2.0))).unwrap();
        assert_eq!(
            add.tokens,
            vec![
                Token::Bos,
                Token::Binary(BinaryOp::Add),
                Token::Var(0),
                Token::Plus,
                Token::Mantissa(2000),
                Token::Exponent(-3),
                Token::Eos
            ]
        );
    }

    #[test]
    fn malformed_sequences() {
        let add = Token::Binary(BinaryOp::Add);
        assert!(matches!(decode_expression(&[add, Token::Var(0)]), Err(CodecError::Truncated(_))));
        assert!(matches!(decode_expression(&[Token::Var(0), Token::Var(1)]), Err(CodecError::Dangling(1))));
        assert!(matches!(
            decode_expression(&[add, Token::Var(0), Token::Plus, Token::Var(1)]),
            Err(CodecError::Truncated(_)) | Err(CodecError::MalformedFloat(_))
        ));
        assert!(matches!(
            decode_expression(&[add, Token::Var(0), Token::Plus, Token::Mantissa(1), Token::Var(0)]),
            Err(CodecError::MalformedFloat(2))
        ));
        assert!(matches!(decode_expression(&[Token::Bos, add, Token::Eos, Token::Var(0)]), Err(CodecError::Truncated(_))));
        assert!(matches!(decode_expression(&[Token::Mantissa(3)]), Err(CodecError::Unexpected { .. })));
        assert!(decode_expression(&[]).is_err());
        // nothing after EOS is read
        assert_eq!(decode_expression(&[Token::Bos, Token::Var(0), Token::Eos, Token::Pad]).unwrap(), Expression::var(0));
    }

    #[test]
    fn point_grid_layout() {
        let bag = SampleBag::new(array![[1.5, -2.0]], vec![3.0], Provenance::Pooled { parts: 1 });
        let grid = encode_points(&bag, 10).unwrap();
        assert_eq!(grid.width, 33);
        assert_eq!(grid.rows, 1);
        let vocab = Vocabulary::encoder();
        let toks = vocab.decode_ids(grid.row(0)).unwrap();
        assert_eq!(&toks[..3], &encode_float(1.5).unwrap().tokens());
        assert!(toks[6..30].iter().all(|&t| t == Token::Pad));
        assert_eq!(&toks[30..], &encode_float(3.0).unwrap().tokens());
    }

    #[test]
    fn zero_point_and_full_width() {
        let bag = SampleBag::new(array![[0.0, 0.0]], vec![0.0], Provenance::Pooled { parts: 1 });
        let vocab = Vocabulary::encoder();
        let toks = vocab.decode_ids(encode_points(&bag, 10).unwrap().row(0)).unwrap();
        let zero = [Token::Plus, Token::Mantissa(0), Token::Exponent(0)];
        assert_eq!(&toks[..3], &zero);
        assert_eq!(&toks[3..6], &zero);
        assert_eq!(&toks[30..], &zero);

        let full = SampleBag::new(Array2::ones((2, 10)), vec![1.0, 2.0], Provenance::Pooled { parts: 1 });
        let grid = encode_points(&full, 10).unwrap();
        assert!(!vocab.decode_ids(&grid.ids).unwrap().contains(&Token::Pad));
    }

    #[test]
    fn rejects_bad_bags() {
        let bag = SampleBag::new(array![[f64::INFINITY]], vec![0.0], Provenance::Pooled { parts: 1 });
        assert!(matches!(encode_points(&bag, 2), Err(CodecError::NonFinite(_))));
        let wide = SampleBag::new(Array2::zeros((1, 3)), vec![0.0], Provenance::Pooled { parts: 1 });
        assert!(matches!(encode_points(&wide, 2), Err(CodecError::TooWide { .. })));
    }
}
