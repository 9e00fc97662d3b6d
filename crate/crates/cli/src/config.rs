use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use factorforge::infer::InferenceConfig;
use factorforge::model::{DecodeMode, ModelConfig, TrainConfig};
use factorforge::synth::GeneratorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketSection {
    /// Trading days of minute bars per mining bag.
    pub lookback: usize,
}

impl Default for MarketSection {
    fn default() -> Self {
        Self { lookback: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub top_k: usize,
    pub cost: f64,
    pub corr_threshold: f64,
    pub pool_cap: usize,
    /// Fail unless built-in metrics agree with the brute-force oracle.
    pub oracle: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { top_k: 30, cost: 0.0, corr_threshold: 0.7, pool_cap: 10, oracle: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub factors: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a run reads. `seed` is the master seed; it replaces the train,
/// inference and sampling-decoder seeds when resolved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus size for `gen-corpus`.
    pub samples: u64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub market: MarketSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

impl RunConfig {
    /// Reads `path` (or defaults), applies `key.path=value` overrides in
    /// order and propagates the master seed. Unknown keys are errors.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                toml::Value::try_from(cfg)?
            }
            None => toml::Value::try_from(RunConfig::default())?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: RunConfig = value.try_into().context("applying overrides")?;
        cfg.train.seed = cfg.seed;
        cfg.inference.seed = cfg.seed;
        if let DecodeMode::Sample { seed, .. } = &mut cfg.inference.decode {
            *seed = cfg.seed;
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Writes the resolved snapshot next to `out`.
    pub fn snapshot(&self, out: &Path) -> Result<PathBuf> {
        let path = sibling(out, "config.toml");
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// `out` with `.suffix` appended to its file name.
pub fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".");
    name.push(suffix);
    out.with_file_name(name)
}

/// Sets `a.b.c = v`, parsing `v` as a TOML value and falling back to a bare
/// string. Intermediate tables are created on demand; the typed
/// deserialization afterwards rejects unknown keys.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| anyhow!("override `{spec}` is not key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override `{spec}` has an empty key segment");
    }
    let value = parse_value(raw.trim());
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| anyhow!("override `{key}`: `{part}` is inside a non-table"))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    unreachable!("parts is non-empty")
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_reach_nested_keys_and_seed_propagates() {
        let cfg = RunConfig::load(
            None,
            &["seed=9".into(), "inference.bags=3".into(), "model.d_emb=32".into(), "io.out=x.json".into()],
        )
        .unwrap();
        assert_eq!((cfg.inference.bags, cfg.model.d_emb), (3, 32));
        assert_eq!((cfg.train.seed, cfg.inference.seed), (9, 9));
        assert_eq!(cfg.io.out, Some(PathBuf::from("x.json")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::load(None, &["inference.bagz=3".into()]).is_err());
        assert!(RunConfig::load(None, &["nosuch=1".into()]).is_err());
        assert!(toml::from_str::<RunConfig>("[train]\nwarmup = 3\n").is_err());
    }

    #[test]
    fn sibling_appends_suffix() {
        assert_eq!(sibling(Path::new("a/b.ckpt"), "log.csv"), PathBuf::from("a/b.ckpt.log.csv"));
    }
}
