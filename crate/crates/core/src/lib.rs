//! Formulaic high-frequency risk factor mining.
//!
//! The pipeline synthesizes `(point set, expression)` training pairs, trains a
//! sequence-to-sequence transformer that emits complete prefix-notation
//! formulas including constants, refines constants with BFGS, and scores
//! mined factors against realized volatility.

// `!(x > t)` style checks are written so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bag;
pub mod codec;
pub mod eval;
pub mod infer;
pub mod expr;
pub mod market;
pub mod model;
pub mod par;
pub mod synth;
