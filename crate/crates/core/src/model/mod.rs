//! Point-set embedder plus encoder-decoder transformer with explicit forward
//! and backward passes, Adam training, checkpoints and candidate decoding.

mod checkpoint;
mod decode;
mod layers;
mod network;
mod params;
mod train;

use std::fmt::Debug;
use std::iter::Sum;

use serde::{Deserialize, Serialize};

use crate::codec::Vocabulary;

pub use network::{embed_bag, evaluate_batch, forward, loss_and_grads, BatchStats, Sample, GRAD_CHUNK};
pub use checkpoint::{Checkpoint, CheckpointError, Progress, RngState};
pub use decode::{decode_candidates, DecodeMode, DecodeOptions, Decoded, Grammar};
pub use params::{Layout, ParamInfo, ParamKind, Params};
pub use train::{
    adam_step, lr_schedule, split_validation, train, AdamState, BatchPlan, TrainConfig, TrainError, TrainLogRow, TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds maximum {max}")]
    TooLong { len: usize, max: usize },
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: u64 },
}

/// Element type of parameters and activations.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Sum
    + Send
    + Sync
    + Debug
    + 'static
{
    fn lit(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite")
    }
    /// `exp` for softmax kernels; implementations may trade the last ulp for
    /// throughput.
    fn exp_kernel(self) -> Self {
        self.exp()
    }
}

impl Float for f32 {
    /// Branch-free polynomial exp, relative error below 3e-7 on
    /// `[-87, 88]`; arguments outside are clamped.
    #[inline]
    fn exp_kernel(self) -> f32 {
        const ROUND: f32 = 12_582_912.0;
        let x = self.clamp(-87.0, 88.0);
        let n = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let p = ((((1.987_569_1e-4 * r + 1.398_2e-3) * r + 8.333_452e-3) * r + 4.166_579_6e-2) * r + 1.666_666_5e-1) * r
            + 0.5;
        let poly = p * r * r + r + 1.0;
        poly * f32::from_bits(((n as i32 + 127) << 23) as u32)
    }
}
impl Float for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// FFN hidden width is `ffn_mult * d_emb` inside transformer blocks.
    pub ffn_mult: usize,
    /// Feature slots of the point grid; fixes both vocabularies.
    pub w_max: usize,
    /// Longest decoder sequence including BOS and EOS.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(10)
    }
}

impl ModelConfig {
    pub fn toy(w_max: usize) -> Self {
        Self { d_emb: 64, enc_layers: 2, dec_layers: 2, heads: 4, ffn_mult: 4, w_max, max_len: 200 }
    }

    pub fn paper() -> Self {
        Self { d_emb: 512, enc_layers: 4, dec_layers: 16, heads: 16, ffn_mult: 4, w_max: 10, max_len: 200 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d_emb == 0 || self.heads == 0 || !self.d_emb.is_multiple_of(self.heads) {
            return Err(format!("d_emb {} must be a positive multiple of heads {}", self.d_emb, self.heads));
        }
        if self.dec_layers < self.enc_layers {
            return Err("decoder must have at least as many layers as the encoder".into());
        }
        if self.ffn_mult == 0 || self.w_max == 0 || self.max_len < 3 {
            return Err("ffn_mult, w_max must be positive and max_len at least 3".into());
        }
        Ok(())
    }

    pub fn enc_vocab(&self) -> usize {
        Vocabulary::encoder().len()
    }

    pub fn dec_vocab(&self) -> usize {
        Vocabulary::decoder(self.w_max).len()
    }

    /// Token columns per point.
    pub fn grid_width(&self) -> usize {
        3 * (self.w_max + 1)
    }

    pub fn head_dim(&self) -> usize {
        self.d_emb / self.heads
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_exp_kernel_is_accurate() {
        let mut worst = 0f64;
        for i in 0..=200_000 {
            let x = -87.0 + 175.0 * i as f64 / 200_000.0;
            let got = (x as f32).exp_kernel() as f64;
            let want = (x as f32 as f64).exp();
            worst = worst.max((got - want).abs() / want);
        }
        assert!(worst < 3e-7, "{worst}");
        assert_eq!(0f32.exp_kernel(), 1.0);
        assert!(f32::NEG_INFINITY.exp_kernel() < 1e-37);
    }

    #[test]
    fn configs_validate() {
        assert!(ModelConfig::toy(2).validate().is_ok());
        assert!(ModelConfig::paper().validate().is_ok());
        let bad = ModelConfig { heads: 3, ..ModelConfig::toy(2) };
        assert!(bad.validate().is_err());
        let shallow = ModelConfig { dec_layers: 1, ..ModelConfig::toy(2) };
        assert!(shallow.validate().is_err());
    }

    #[test]
    fn paper_parameter_count() {
        let c = ModelConfig::paper();
        let d = 512;
        let enc_block = 2 * 2 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let dec_block = 3 * 2 * d + 8 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let expected = 10207 * d
            + (33 * d * d + d)
            + (d * d + d)
            + 4 * enc_block
            + 2 * d
            + 10233 * d
            + 16 * dec_block
            + 2 * d
            + (d * 10233 + 10233);
        assert_eq!(c.param_count(), expected);
        assert!(c.param_count() > 80_000_000);
    }
}
