//! Denoising pre-training with the layer-permutation objective.

pub mod corruption;
pub mod lplm;

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dropout, Model};
use crate::numerics::{adam_step, AdamConfig, OptimizerState, Tensor};
use crate::tokenizer::TokenId;

pub use corruption::{
    corrupt, document_rng, infill_spans, shuffle_sentences, split_sentences, CorruptionConfig, Infilled,
};
pub use lplm::{
    lplm_loss, lplm_loss_with, sample_exit_assignment, LossRoute, LplmLoss, PermutationSampler, TrainingExample,
};

/// Optimization settings shared by pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear learning-rate ramp over the first steps.
    pub warmup_steps: usize,
    pub max_grad_norm: Option<f64>,
    /// Exit assignments sampled per sequence.
    pub samples_per_sequence: usize,
    /// Score assignments with per-assignment copy-through forwards instead
    /// of one shared full-depth forward.
    pub exact_copy_through: bool,
    /// Decoder positions per example; defaults to the model's `max_len`.
    pub decode_len: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 2e-4,
            warmup_steps: 0,
            max_grad_norm: Some(1.0),
            samples_per_sequence: 10,
            exact_copy_through: false,
            decode_len: None,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self, model: &Model) -> OptimizerState {
        let cfg = AdamConfig {
            lr: self.lr,
            max_grad_norm: self.max_grad_norm,
            ..AdamConfig::default()
        };
        OptimizerState::new(cfg, model.params().tensors())
    }

    pub fn route(&self) -> LossRoute {
        if self.exact_copy_through {
            LossRoute::CopyThrough
        } else {
            LossRoute::Shared
        }
    }

    pub fn decode_len(&self, model: &Model) -> usize {
        self.decode_len.unwrap_or(model.config().max_len)
    }
}

/// One line of a training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub tokens_per_sec: f64,
    pub mean_exit_layer: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer_losses: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub records: Vec<StepRecord>,
}

impl TrainingReport {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loss of one batch plus bookkeeping for the report.
pub(crate) struct BatchLoss {
    pub loss: Tensor,
    pub tokens: usize,
    pub mean_exit: f64,
    pub layer_losses: Option<Vec<f64>>,
}

/// Generic optimization loop: `batch_loss` builds the loss for a step from a
/// step-specific rng and dropout stream.
pub(crate) fn run_steps(
    model: &mut Model,
    cfg: &TrainConfig,
    seed: u64,
    optimizer: &mut OptimizerState,
    mut batch_loss: impl FnMut(&Model, &mut ChaCha8Rng, &mut Dropout) -> Result<BatchLoss>,
) -> Result<TrainingReport> {
    let base_lr = optimizer.config.lr;
    let mut report = TrainingReport::default();
    for step in 0..cfg.steps {
        let started = Instant::now();
        let mut rng = document_rng(seed, step as u64);
        let mut dropout = Dropout::train(rng.random());
        let batch = batch_loss(model, &mut rng, &mut dropout)?;
        let loss = batch.loss.item();
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        batch.loss.backward()?;
        drop(batch.loss);
        optimizer.config.lr = if cfg.warmup_steps > 0 {
            base_lr * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        } else {
            base_lr
        };
        adam_step(model.params_mut(), optimizer)?;
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        report.records.push(StepRecord {
            step,
            loss,
            tokens_per_sec: batch.tokens as f64 / secs,
            mean_exit_layer: batch.mean_exit,
            layer_losses: batch.layer_losses,
        });
    }
    optimizer.config.lr = base_lr;
    Ok(report)
}

/// Packs whole sentences into chunks of at most `max_tokens`; a sentence
/// longer than that is cut into pieces.
pub fn chunk_document(doc: &[TokenId], full_stop: Option<TokenId>, max_tokens: usize) -> Vec<Vec<TokenId>> {
    let sentences = match full_stop {
        Some(stop) => split_sentences(doc, stop),
        None => vec![doc],
    };
    let mut chunks = Vec::new();
    let mut current: Vec<TokenId> = Vec::new();
    for s in sentences {
        if current.len() + s.len() > max_tokens && !current.is_empty() {
            chunks.push(std::mem::take(&mut current));
        }
        if s.len() > max_tokens {
            for piece in s.chunks(max_tokens) {
                chunks.push(piece.to_vec());
            }
        } else {
            current.extend_from_slice(s);
        }
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

/// Corrupt → encode → layer-permutation loss → backward → Adam, once per
/// step over `batch_size` randomly drawn document chunks.
pub fn pretrain_loop(
    model: &mut Model,
    corpus: &[Vec<TokenId>],
    full_stop: Option<TokenId>,
    corruption: &CorruptionConfig,
    cfg: &TrainConfig,
    sampler: &mut PermutationSampler,
    optimizer: &mut OptimizerState,
) -> Result<TrainingReport> {
    corruption.validate()?;
    let decode_len = cfg.decode_len(model);
    if decode_len < 2 || decode_len > model.config().max_len {
        return Err(Error::Config(format!("decode_len {decode_len} unusable")));
    }
    let chunks: Vec<Vec<TokenId>> = corpus
        .iter()
        .flat_map(|doc| chunk_document(doc, full_stop, decode_len - 1))
        .collect();
    if chunks.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let route = cfg.route();
    let batch_size = cfg.batch_size.max(1);
    let mut drawn = 0u64;
    run_steps(model, cfg, corruption.rng_seed, optimizer, |model, rng, dropout| {
        let mut total: Option<Tensor> = None;
        let mut exit_sum = 0.0;
        let mut tokens = 0;
        for _ in 0..batch_size {
            let chunk = &chunks[rng.random_range(0..chunks.len())];
            let mut doc_rng = document_rng(corruption.rng_seed ^ 0x5eed, drawn);
            drawn += 1;
            let src = corrupt(chunk, full_stop, corruption, &mut doc_rng)?;
            let example = TrainingExample::new(src, chunk, decode_len)?;
            tokens += example.src_ids.len() + decode_len;
            let l = lplm_loss(model, &example, sampler, route, dropout)?;
            exit_sum += l.mean_exit;
            total = Some(match total {
                None => l.loss,
                Some(acc) => acc.add(&l.loss)?,
            });
        }
        Ok(BatchLoss {
            loss: total.expect("batch_size >= 1").scale(1.0 / batch_size as f64),
            tokens,
            mean_exit: exit_sum / batch_size as f64,
            layer_losses: None,
        })
    })
}
