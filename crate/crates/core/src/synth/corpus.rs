use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{sample_at, GeneratorConfig, SynthError, TrainingSample};
use crate::codec::{encode_expression, encode_points, Vocabulary};
use crate::par;

/// One NDJSON corpus line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusLine {
    pub index: u64,
    pub seed: u64,
    pub w: usize,
    pub m: usize,
    /// Encoder ids, one row of `3 * (w_max + 1)` per point.
    pub input_tokens: Vec<Vec<u32>>,
    /// Decoder ids, `BOS ... EOS`.
    pub target_tokens: Vec<u32>,
    pub infix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format: String,
    pub master_seed: u64,
    pub samples: u64,
    pub config_hash: String,
    pub config: GeneratorConfig,
}

pub fn config_hash(cfg: &GeneratorConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    format!("{:x}", Sha256::digest(json))
}

impl CorpusLine {
    pub fn from_sample(
        sample: &TrainingSample,
        index: u64,
        seed: u64,
        w_max: usize,
        decoder: &Vocabulary,
    ) -> Result<Self, SynthError> {
        let grid = encode_points(&sample.bag, w_max)?;
        let target = encode_expression(&sample.expr)?;
        Ok(Self {
            index,
            seed,
            w: sample.bag.width(),
            m: sample.bag.len(),
            input_tokens: grid.ids.chunks(grid.width).map(<[u32]>::to_vec).collect(),
            target_tokens: decoder.ids(&target.tokens)?,
            infix: sample.expr.to_string(),
        })
    }
}

/// Generates samples `start..start + n` of the corpus for `seed`.
pub fn generate_corpus(
    cfg: &GeneratorConfig,
    seed: u64,
    start: u64,
    n: usize,
) -> Result<Vec<CorpusLine>, SynthError> {
    let decoder = Vocabulary::decoder(cfg.w_max);
    par::map_range(n, |i| {
        let index = start + i as u64;
        let s = sample_at(cfg, seed, index)?;
        CorpusLine::from_sample(&s, index, seed, cfg.w_max, &decoder)
    })
    .into_iter()
    .collect()
}

const CHUNK: usize = 512;

/// Streams `n` samples as NDJSON. Output bytes depend only on `cfg`, `seed`
/// and `n`.
pub fn write_corpus<W: Write>(
    cfg: &GeneratorConfig,
    seed: u64,
    n: u64,
    out: &mut W,
) -> Result<CorpusManifest, SynthError> {
    cfg.validate()?;
    let mut done = 0u64;
    while done < n {
        let take = CHUNK.min((n - done) as usize);
        for line in generate_corpus(cfg, seed, done, take)? {
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n")?;
        }
        done += take as u64;
    }
    out.flush()?;
    Ok(CorpusManifest {
        format: "factorforge-corpus/1".to_string(),
        master_seed: seed,
        samples: n,
        config_hash: config_hash(cfg),
        config: cfg.clone(),
    })
}

pub fn read_corpus<R: BufRead>(input: R) -> impl Iterator<Item = Result<CorpusLine, SynthError>> {
    input.lines().filter_map(|line| match line {
        Ok(l) if l.trim().is_empty() => None,
        Ok(l) => Some(serde_json::from_str(&l).map_err(SynthError::from)),
        Err(e) => Some(Err(e.into())),
    })
}
