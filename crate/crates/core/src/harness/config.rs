use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pretrain::{CorruptionConfig, TrainConfig};

/// Decoding strategies exposed by the harness.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Causal left-to-right reference.
    Ar,
    /// Plain top-layer parallel decoding.
    Nar,
    #[default]
    Hard,
    Soft,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Ar => "ar",
            DecodeMode::Nar => "nar",
            DecodeMode::Hard => "hard",
            DecodeMode::Soft => "soft",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(DecodeMode::Ar),
            "nar" => Ok(DecodeMode::Nar),
            "hard" => Ok(DecodeMode::Hard),
            "soft" => Ok(DecodeMode::Soft),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodingConfig {
    pub mode: DecodeMode,
    pub delta: f64,
    /// Decoder positions; defaults to the model's `max_len`.
    pub length: Option<usize>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        DecodingConfig {
            mode: DecodeMode::Hard,
            delta: 0.5,
            length: None,
        }
    }
}

/// Input files. Relative paths are resolved against the config file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub vocab: Option<PathBuf>,
    /// Pre-training corpus, one document per line.
    pub corpus: Option<PathBuf>,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub eval_src: Option<PathBuf>,
    pub eval_tgt: Option<PathBuf>,
}

impl DataConfig {
    fn paths_mut(&mut self) -> [(&'static str, &mut Option<PathBuf>); 6] {
        [
            ("vocab", &mut self.vocab),
            ("corpus", &mut self.corpus),
            ("train_src", &mut self.train_src),
            ("train_tgt", &mut self.train_tgt),
            ("eval_src", &mut self.eval_src),
            ("eval_tgt", &mut self.eval_tgt),
        ]
    }

}

/// The configured path, or a config error naming the missing key.
pub fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Config(format!("[data] {key} is required for this command")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub corruption: CorruptionConfig,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub decoding: DecodingConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    /// Parses TOML, resolves data paths against `base` and checks that they
    /// exist.
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for (key, slot) in cfg.data.paths_mut() {
            if let Some(p) = slot {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
                if !p.exists() {
                    return Err(Error::Config(format!("[data] {key}: {} does not exist", p.display())));
                }
            }
        }
        cfg.corruption.validate()?;
        if cfg.decoding.delta.is_nan() || cfg.decoding.delta < 0.0 {
            return Err(Error::Config(format!("delta {} must be non-negative", cfg.decoding.delta)));
        }
        Ok(cfg)
    }

    pub fn decode_length(&self) -> usize {
        self.decoding.length.unwrap_or(self.model.max_len)
    }
}
