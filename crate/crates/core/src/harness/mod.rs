//! Plumbing around the library: configuration, data files, checkpoints,
//! synthetic tasks, benchmarking and the command-line interface.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod synthetic;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decode::{
    generate_ar, generate_hard, generate_nar, generate_soft, GenerationResult, HardExitConfig, ParallelExample,
    SoftExitConfig,
};
use crate::error::{Error, Result};
use crate::model::{Dropout, Model};
use crate::tokenizer::{TokenId, Vocabulary};

pub use bench::{bench_latency, scaling_exponent, BenchOptions, BenchmarkRecord};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{DecodeMode, RunConfig};
pub use synthetic::{generate_pairs, write_synthetic, Task};

/// Non-empty lines of a UTF-8 file.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

/// Aligned `src`/`tgt` files, encoded. Pairs whose target does not fit
/// `max_target` tokens (before `[EOS]`) are an error, not silently dropped.
pub fn load_parallel(
    vocab: &Vocabulary,
    src: impl AsRef<Path>,
    tgt: impl AsRef<Path>,
    max_target: usize,
) -> Result<Vec<ParallelExample>> {
    let (s, t) = (read_lines(src)?, read_lines(tgt)?);
    if s.len() != t.len() {
        return Err(Error::Config(format!("{} source lines but {} target lines", s.len(), t.len())));
    }
    s.iter()
        .zip(&t)
        .enumerate()
        .map(|(i, (s, t))| {
            let ex = ParallelExample {
                src: vocab.encode(s),
                tgt: vocab.encode(t),
            };
            if ex.tgt.len() > max_target {
                return Err(Error::Config(format!(
                    "line {}: target of {} tokens exceeds {max_target}",
                    i + 1,
                    ex.tgt.len()
                )));
            }
            Ok(ex)
        })
        .collect()
}

/// Encode then decode one source with the given strategy.
pub fn generate(model: &Model, src: &[TokenId], mode: DecodeMode, length: usize, delta: f64) -> Result<GenerationResult> {
    let enc = model.encode(src, &mut Dropout::eval())?;
    match mode {
        DecodeMode::Ar => generate_ar(model, &enc, length, false),
        DecodeMode::Nar => generate_nar(model, &enc, length),
        DecodeMode::Hard => generate_hard(model, &enc, &HardExitConfig::new(delta, length)?),
        DecodeMode::Soft => generate_soft(model, &enc, &SoftExitConfig { length }),
    }
}

/// One line of generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: usize,
    pub text: String,
    pub mean_exit_layer: f64,
    pub decoder_flops: u64,
    pub latency_ns: u128,
    pub exit_layers: Vec<usize>,
}

impl GenerationRecord {
    pub fn new(id: usize, vocab: &Vocabulary, out: &GenerationResult) -> Result<Self> {
        Ok(GenerationRecord {
            id,
            text: vocab.decode(&out.tokens)?,
            mean_exit_layer: out.mean_exit_layer,
            decoder_flops: out.decoder_flops(),
            latency_ns: out.elapsed_ns,
            exit_layers: out.exit_layers.clone(),
        })
    }
}

/// Per-example line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: usize,
    #[serde(flatten)]
    pub scores: crate::metrics::PairScores,
}

/// `name<TAB>score` lines.
pub fn write_summary(summary: &[(String, f64)], mut out: impl Write) -> Result<()> {
    for (k, v) in summary {
        writeln!(out, "{k}\t{v:.6}")?;
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(items: &[T], mut out: impl Write) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
