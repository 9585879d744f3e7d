//! Inference with token-level early exit.
//!
//! * Hard exit: layers run layer-major over all positions; a position stops
//!   at the first off-ramp whose prediction entropy is at most `delta`, and
//!   its state is frozen (copied upward) while other positions continue.
//! * Soft exit: every position runs every layer; after each layer the
//!   off-ramp's argmax token is embedded and fused back into the state.
//!
//! In both modes the output is cut before the first `[EOS]`.

mod finetune;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dropout, EncoderStates, Model};
use crate::numerics::flops::{self, FlopCounts};
use crate::numerics::no_grad;
use crate::tokenizer::{TokenId, EOS};

pub use finetune::{finetune_loop, ExitMode, ParallelExample};

/// Entropy in nats of a probability vector, clamped to `[0, ln V]`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if let Some(p) = dist.iter().find(|&&p| p < 0.0 || p.is_nan()) {
        return Err(Error::contract(format!("probability {p} is negative")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-4 {
        return Err(Error::contract(format!("distribution sums to {total}")));
    }
    let h = -dist.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    Ok(h.clamp(0.0, (dist.len() as f64).ln()))
}

/// Longest prefix strictly before the first `[EOS]`.
pub fn truncate_at_eos(raw: &[TokenId]) -> Vec<TokenId> {
    raw.iter().take_while(|&&id| id != EOS).copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardExitConfig {
    /// Entropy threshold in nats.
    pub delta: f64,
    /// Decoder positions.
    pub length: usize,
}

impl HardExitConfig {
    pub fn new(delta: f64, length: usize) -> Result<Self> {
        if delta.is_nan() || delta < 0.0 {
            return Err(Error::contract(format!("delta {delta} must be non-negative")));
        }
        Ok(HardExitConfig { delta, length })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftExitConfig {
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Output with the `[EOS]` and everything after it removed.
    pub tokens: Vec<TokenId>,
    /// One prediction per decoder position.
    pub raw: Vec<TokenId>,
    /// 1-based exit layer per position.
    pub exit_layers: Vec<usize>,
    /// Entropy (nats) of each position's distribution at its exit layer.
    pub entropies: Vec<f64>,
    pub flops: FlopCounts,
    pub elapsed_ns: u128,
    pub mean_exit_layer: f64,
}

impl GenerationResult {
    fn finish(raw: Vec<TokenId>, exit_layers: Vec<usize>, entropies: Vec<f64>, flops: FlopCounts, started: Instant) -> Self {
        let mean_exit_layer = exit_layers.iter().sum::<usize>() as f64 / exit_layers.len().max(1) as f64;
        GenerationResult {
            tokens: truncate_at_eos(&raw),
            raw,
            exit_layers,
            entropies,
            flops,
            elapsed_ns: started.elapsed().as_nanos(),
            mean_exit_layer,
        }
    }

    pub fn decoder_flops(&self) -> u64 {
        self.flops.decoder()
    }
}

fn row_entropies(logits: &crate::numerics::Tensor) -> Result<(Vec<f64>, Vec<usize>)> {
    let probs = logits.softmax(1)?;
    let ent = (0..probs.rows()).map(|r| entropy(probs.row(r))).collect::<Result<Vec<_>>>()?;
    Ok((ent, probs.argmax_rows()))
}

/// Entropy-threshold early exit.
pub fn generate_hard(model: &Model, enc: &EncoderStates, cfg: &HardExitConfig) -> Result<GenerationResult> {
    let started = Instant::now();
    let t = cfg.length;
    let l = model.layers();
    let (result, counts) = no_grad(|| {
        flops::measure(|| -> Result<_> {
            let memory = model.cross_memory(enc)?;
            let mut dropout = Dropout::eval();
            let mut h = model.nar_inputs(t)?;
            let mut active: Vec<usize> = (0..t).collect();
            let mut raw = vec![0; t];
            let mut exits = vec![0; t];
            let mut ents = vec![0.0; t];
            for layer in 1..=l {
                h = model.decoder_step(layer, &h, Some(&active), &memory, &mut dropout)?;
                let rows = if active.len() == t { h.clone() } else { h.gather_rows(&active)? };
                let (ent, best) = row_entropies(&model.off_ramp_logits(&rows, layer)?)?;
                let mut still = Vec::with_capacity(active.len());
                for (j, &pos) in active.iter().enumerate() {
                    if ent[j] <= cfg.delta || layer == l {
                        raw[pos] = best[j] as TokenId;
                        exits[pos] = layer;
                        ents[pos] = ent[j];
                    } else {
                        still.push(pos);
                    }
                }
                active = still;
                if active.is_empty() {
                    break;
                }
            }
            Ok((raw, exits, ents))
        })
    });
    let (raw, exit_layers, entropies) = result?;
    Ok(GenerationResult::finish(raw, exit_layers, entropies, counts, started))
}

/// Prediction-feedback decoding through all layers.
pub fn generate_soft(model: &Model, enc: &EncoderStates, cfg: &SoftExitConfig) -> Result<GenerationResult> {
    let started = Instant::now();
    let l = model.layers();
    let (trace, counts) = no_grad(|| flops::measure(|| model.soft_forward(enc, cfg.length, &mut Dropout::eval())));
    let trace = trace?;
    let (entropies, best) = row_entropies(trace.logits.last().expect("at least one layer"))?;
    let raw = best.into_iter().map(|i| i as TokenId).collect();
    Ok(GenerationResult::finish(raw, vec![l; cfg.length], entropies, counts, started))
}

/// Plain last-layer decoding without early exit.
pub fn generate_nar(model: &Model, enc: &EncoderStates, length: usize) -> Result<GenerationResult> {
    let started = Instant::now();
    let l = model.layers();
    let (logits, counts) = no_grad(|| flops::measure(|| model.nar_logits(enc, length, &mut Dropout::eval())));
    let (entropies, best) = row_entropies(&logits?)?;
    let raw = best.into_iter().map(|i| i as TokenId).collect();
    Ok(GenerationResult::finish(raw, vec![l; length], entropies, counts, started))
}

/// Greedy causal decode over the same weights, for cost comparison only.
pub fn generate_ar(model: &Model, enc: &EncoderStates, length: usize, stop_at_eos: bool) -> Result<GenerationResult> {
    let started = Instant::now();
    let out = model.decode_ar_reference(enc, length, stop_at_eos)?;
    let n = out.ids.len();
    Ok(GenerationResult::finish(out.ids, vec![model.layers(); n], vec![0.0; n], out.flops, started))
}

#[cfg(test)]
mod tests;
