use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Layout, ParamInfo, Params};
use super::train::{AdamState, TrainConfig};
use super::ModelConfig;
use crate::codec::{VocabKind, Vocabulary};
use crate::synth::GeneratorConfig;

const MAGIC: &[u8; 8] = b"FFCKPT\x00\x01";
const FORMAT: &str = "factorforge-checkpoint/1";

/// Resumable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub step: u64,
    pub epoch: usize,
    /// Next batch within the current epoch's plan.
    pub batch_pos: usize,
    /// Generator state at the start of the current epoch.
    pub rng: RngState,
    pub best_val_acc: Option<f64>,
}

/// Model, optimizer and training position.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Grammar the model was trained on, when known.
    pub generator: Option<GeneratorConfig>,
    pub params: Params<f32>,
    pub adam: AdamState,
    pub progress: Progress,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file")]
    Magic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    train: TrainConfig,
    generator: Option<GeneratorConfig>,
    progress: Progress,
    adam_t: u64,
    encoder_vocab: serde_json::Value,
    decoder_vocab: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn layout(&self) -> &Arc<Layout> {
        &self.params.layout
    }

    pub fn decoder_vocab(&self) -> Vocabulary {
        Vocabulary::decoder(self.model.w_max)
    }

    /// Header JSON, then little-endian f32 tensors in manifest order.
    pub fn write<W: Write>(&self, mut out: W) -> Result<(), CheckpointError> {
        let entries = self.params.layout.entries();
        let mut tensors = Vec::with_capacity(3 * entries.len());
        let mut offset = 0u64;
        for g in GROUPS {
            for e in entries {
                tensors.push(TensorEntry { group: g.into(), name: e.name.clone(), rows: e.rows, cols: e.cols, offset });
                offset += 4 * e.len() as u64;
            }
        }
        let header = Header {
            format: FORMAT.into(),
            model: self.model.clone(),
            train: self.train.clone(),
            generator: self.generator.clone(),
            progress: self.progress.clone(),
            adam_t: self.adam.t,
            encoder_vocab: Vocabulary::encoder().to_json(),
            decoder_vocab: self.decoder_vocab().to_json(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let mut buf = Vec::with_capacity(4 * self.params.data.len());
        for data in [&self.params.data, &self.adam.m, &self.adam.v] {
            buf.clear();
            for v in data.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let h: Header = serde_json::from_slice(&json)?;
        if h.format != FORMAT {
            return Err(CheckpointError::Malformed(format!("format {}", h.format)));
        }
        h.model.validate().map_err(CheckpointError::Malformed)?;
        let bad = |m: &str| CheckpointError::Malformed(m.to_string());
        let enc = Vocabulary::from_json(VocabKind::Encoder, &h.encoder_vocab).map_err(|_| bad("encoder vocabulary"))?;
        let dec = Vocabulary::from_json(VocabKind::Decoder, &h.decoder_vocab).map_err(|_| bad("decoder vocabulary"))?;
        if enc.len() != h.model.enc_vocab() || dec.len() != h.model.dec_vocab() {
            return Err(bad("vocabulary does not match model config"));
        }
        let layout = Arc::new(Layout::new(&h.model));
        let expect: Vec<&ParamInfo> = layout.entries().iter().collect();
        if h.tensors.len() != 3 * expect.len() {
            return Err(bad("tensor manifest length"));
        }
        let mut offset = 0u64;
        for (t, (g, e)) in h.tensors.iter().zip(GROUPS.iter().flat_map(|g| expect.iter().map(move |e| (g, e)))) {
            if t.group != *g || t.name != e.name || t.rows != e.rows || t.cols != e.cols || t.offset != offset {
                return Err(CheckpointError::Malformed(format!("tensor {} {}", t.group, t.name)));
            }
            offset += 4 * e.len() as u64;
        }
        let n = layout.total();
        let mut read_vec = || -> Result<Vec<f32>, CheckpointError> {
            let mut bytes = vec![0u8; 4 * n];
            input.read_exact(&mut bytes)?;
            Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let data = read_vec()?;
        let m = read_vec()?;
        let v = read_vec()?;
        Ok(Self {
            model: h.model,
            train: h.train,
            generator: h.generator,
            params: Params { layout, data },
            adam: AdamState { t: h.adam_t, m, v },
            progress: h.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("in-memory write");
        v
    }
}
