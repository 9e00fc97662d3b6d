use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::CodecError;
use crate::expr::{BinaryOp, UnaryOp};

pub const MANTISSA_COUNT: u32 = 10_000;
pub const MIN_EXPONENT: i16 = -103;
pub const MAX_EXPONENT: i16 = 100;
const EXPONENT_COUNT: u32 = (MAX_EXPONENT - MIN_EXPONENT + 1) as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    Binary(BinaryOp),
    Unary(UnaryOp),
    Var(u16),
    Plus,
    Minus,
    Mantissa(u16),
    Exponent(i16),
}

impl Token {
    pub fn is_numeric(self) -> bool {
        matches!(self, Token::Plus | Token::Minus | Token::Mantissa(_) | Token::Exponent(_))
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("PAD"),
            Token::Bos => f.write_str("BOS"),
            Token::Eos => f.write_str("EOS"),
            Token::Binary(op) => f.write_str(op.name()),
            Token::Unary(op) => f.write_str(op.name()),
            Token::Var(w) => write!(f, "x{w}"),
            Token::Plus => f.write_str("+"),
            Token::Minus => f.write_str("-"),
            Token::Mantissa(m) => write!(f, "{m}"),
            Token::Exponent(e) => write!(f, "E{e}"),
        }
    }
}

impl FromStr for Token {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CodecError::UnknownToken(s.to_string());
        Ok(match s {
            "PAD" => Token::Pad,
            "BOS" => Token::Bos,
            "EOS" => Token::Eos,
            "+" => Token::Plus,
            "-" => Token::Minus,
            _ => {
                if let Ok(op) = s.parse::<BinaryOp>() {
                    Token::Binary(op)
                } else if let Ok(op) = s.parse::<UnaryOp>() {
                    Token::Unary(op)
                } else if let Some(rest) = s.strip_prefix('x') {
                    Token::Var(rest.parse().map_err(|_| bad())?)
                } else if let Some(rest) = s.strip_prefix('E') {
                    let e: i16 = rest.parse().map_err(|_| bad())?;
                    if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&e) {
                        return Err(bad());
                    }
                    Token::Exponent(e)
                } else {
                    let m: u16 = s.parse().map_err(|_| bad())?;
                    if u32::from(m) >= MANTISSA_COUNT {
                        return Err(bad());
                    }
                    Token::Mantissa(m)
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabKind {
    /// Numeric tokens and PAD only.
    Encoder,
    /// Operators, variables, numeric tokens and BOS/EOS/PAD.
    Decoder,
}

/// Dense, stable token ids.
///
/// Decoder layout: PAD BOS EOS, binary ops, unary ops, `x0..x{w_max-1}`,
/// `+ -`, mantissas `0..9999`, exponents `E-103..E100`. The encoder layout is
/// PAD followed by the numeric block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    kind: VocabKind,
    w_max: usize,
    tokens: Vec<Token>,
}

impl Vocabulary {
    pub fn encoder() -> Self {
        let mut tokens = vec![Token::Pad];
        push_numeric(&mut tokens);
        let v = Self { kind: VocabKind::Encoder, w_max: 0, tokens };
        assert!(
            v.tokens.iter().all(|t| !matches!(t, Token::Binary(_) | Token::Unary(_) | Token::Var(_))),
            "encoder vocabulary must not contain symbolic tokens"
        );
        v
    }

    pub fn decoder(w_max: usize) -> Self {
        assert!(w_max >= 1 && w_max <= u16::MAX as usize);
        let mut tokens = vec![Token::Pad, Token::Bos, Token::Eos];
        tokens.extend(BinaryOp::ALL.map(Token::Binary));
        tokens.extend(UnaryOp::ALL.map(Token::Unary));
        tokens.extend((0..w_max as u16).map(Token::Var));
        push_numeric(&mut tokens);
        Self { kind: VocabKind::Decoder, w_max, tokens }
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn w_max(&self) -> usize {
        self.w_max
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    fn numeric_base(&self) -> u32 {
        match self.kind {
            VocabKind::Encoder => 1,
            VocabKind::Decoder => 3 + 4 + 10 + self.w_max as u32,
        }
    }

    pub fn id(&self, token: Token) -> Option<u32> {
        let nb = self.numeric_base();
        let id = match (self.kind, token) {
            (_, Token::Pad) => 0,
            (VocabKind::Decoder, Token::Bos) => 1,
            (VocabKind::Decoder, Token::Eos) => 2,
            (VocabKind::Decoder, Token::Binary(op)) => 3 + op as u32,
            (VocabKind::Decoder, Token::Unary(op)) => 7 + op as u32,
            (VocabKind::Decoder, Token::Var(w)) if (w as usize) < self.w_max => 17 + u32::from(w),
            (_, Token::Plus) => nb,
            (_, Token::Minus) => nb + 1,
            (_, Token::Mantissa(m)) if u32::from(m) < MANTISSA_COUNT => nb + 2 + u32::from(m),
            (_, Token::Exponent(e)) if (MIN_EXPONENT..=MAX_EXPONENT).contains(&e) => {
                nb + 2 + MANTISSA_COUNT + (e - MIN_EXPONENT) as u32
            }
            _ => return None,
        };
        debug_assert_eq!(self.tokens[id as usize], token);
        Some(id)
    }

    pub fn token(&self, id: u32) -> Option<Token> {
        self.tokens.get(id as usize).copied()
    }

    pub fn ids(&self, tokens: &[Token]) -> Result<Vec<u32>, CodecError> {
        tokens
            .iter()
            .map(|&t| self.id(t).ok_or_else(|| CodecError::UnknownToken(t.to_string())))
            .collect()
    }

    pub fn decode_ids(&self, ids: &[u32]) -> Result<Vec<Token>, CodecError> {
        ids.iter().map(|&i| self.token(i).ok_or(CodecError::UnknownId(i))).collect()
    }

    /// Token string to id table.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.to_string(), serde_json::Value::from(i as u64)))
            .collect();
        serde_json::Value::Object(map)
    }

    /// Rebuilds a vocabulary from its JSON table, checking the layout matches.
    pub fn from_json(kind: VocabKind, value: &serde_json::Value) -> Result<Self, CodecError> {
        let map = value.as_object().ok_or(CodecError::VocabularyMismatch)?;
        let w_max = map.keys().filter(|k| k.starts_with('x')).count();
        let v = match kind {
            VocabKind::Encoder => Self::encoder(),
            VocabKind::Decoder => Self::decoder(w_max.max(1)),
        };
        if map.len() != v.len() {
            return Err(CodecError::VocabularyMismatch);
        }
        for (k, id) in map {
            let tok: Token = k.parse()?;
            if v.id(tok).map(u64::from) != id.as_u64() {
                return Err(CodecError::VocabularyMismatch);
            }
        }
        Ok(v)
    }
}

fn push_numeric(tokens: &mut Vec<Token>) {
    tokens.push(Token::Plus);
    tokens.push(Token::Minus);
    tokens.extend((0..MANTISSA_COUNT as u16).map(Token::Mantissa));
    tokens.extend((MIN_EXPONENT..=MAX_EXPONENT).map(Token::Exponent));
    debug_assert_eq!(EXPONENT_COUNT as usize, (MIN_EXPONENT..=MAX_EXPONENT).count());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_consistent() {
        for v in [Vocabulary::encoder(), Vocabulary::decoder(10)] {
            for (i, &t) in v.tokens().iter().enumerate() {
                assert_eq!(v.id(t), Some(i as u32), "{t}");
                assert_eq!(t.to_string().parse::<Token>().unwrap(), t);
            }
        }
    }

    #[test]
    fn decoder_contains_encoder_tokens() {
        let enc = Vocabulary::encoder();
        let dec = Vocabulary::decoder(10);
        assert!(dec.len() > enc.len());
        for &t in enc.tokens() {
            assert!(dec.id(t).is_some());
        }
        assert_eq!(enc.id(Token::Bos), None);
        assert_eq!(enc.id(Token::Var(0)), None);
        assert_eq!(dec.id(Token::Var(10)), None);
    }

    #[test]
    fn json_table_round_trip() {
        let v = Vocabulary::decoder(6);
        let back = Vocabulary::from_json(VocabKind::Decoder, &v.to_json()).unwrap();
        assert_eq!(back, v);
        let e = Vocabulary::encoder();
        assert_eq!(Vocabulary::from_json(VocabKind::Encoder, &e.to_json()).unwrap(), e);
        assert!(Vocabulary::from_json(VocabKind::Encoder, &v.to_json()).is_err());
    }

    #[test]
    fn sizes() {
        assert_eq!(Vocabulary::encoder().len(), 1 + 2 + 10_000 + 204);
        assert_eq!(Vocabulary::decoder(10).len(), 3 + 14 + 10 + 2 + 10_000 + 204);
    }
}
