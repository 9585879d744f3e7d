use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{OptimizerState, Tensor};
use crate::pretrain::{lplm_loss, run_steps, BatchLoss, PermutationSampler, TrainConfig, TrainingExample, TrainingReport};
use crate::tokenizer::TokenId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExitMode {
    Hard,
    Soft,
}

impl std::str::FromStr for ExitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(ExitMode::Hard),
            "soft" => Ok(ExitMode::Soft),
            other => Err(Error::Config(format!("unknown exit mode {other:?}"))),
        }
    }
}

/// A supervised (source, target) pair; the target has no terminator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

/// Task fine-tuning whose training forward matches the inference forward:
/// hard mode continues the layer-permutation objective, soft mode sums the
/// per-layer cross-entropies of the prediction-feedback forward.
pub fn finetune_loop(
    model: &mut Model,
    dataset: &[ParallelExample],
    mode: ExitMode,
    cfg: &TrainConfig,
    seed: u64,
    optimizer: &mut OptimizerState,
) -> Result<TrainingReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let decode_len = cfg.decode_len(model);
    let examples = dataset
        .iter()
        .map(|ex| TrainingExample::new(ex.src.clone(), &ex.tgt, decode_len))
        .collect::<Result<Vec<_>>>()?;
    let mut sampler = PermutationSampler::new(cfg.samples_per_sequence.max(1), model.layers(), seed ^ 0xe417)?;
    let route = cfg.route();
    let batch_size = cfg.batch_size.max(1);
    let layers = model.layers();

    run_steps(model, cfg, seed, optimizer, |model, rng, dropout| {
        let mut total: Option<Tensor> = None;
        let mut exit_sum = 0.0;
        let mut tokens = 0;
        let mut per_layer = vec![0.0; layers];
        for _ in 0..batch_size {
            let ex = &examples[rng.random_range(0..examples.len())];
            tokens += ex.src_ids.len() + decode_len;
            let loss = match mode {
                ExitMode::Hard => {
                    let l = lplm_loss(model, ex, &mut sampler, route, dropout)?;
                    exit_sum += l.mean_exit;
                    l.loss
                }
                ExitMode::Soft => {
                    let enc = model.encode(&ex.src_ids, dropout)?;
                    let trace = model.soft_forward(&enc, decode_len, dropout)?;
                    let labels = ex.labels();
                    let mut sum: Option<Tensor> = None;
                    for (i, logits) in trace.logits.iter().enumerate() {
                        let ce = logits.cross_entropy(&labels)?;
                        per_layer[i] += ce.item() / batch_size as f64;
                        sum = Some(match sum {
                            None => ce,
                            Some(acc) => acc.add(&ce)?,
                        });
                    }
                    exit_sum += layers as f64;
                    sum.expect("at least one layer")
                }
            };
            total = Some(match total {
                None => loss,
                Some(acc) => acc.add(&loss)?,
            });
        }
        Ok(BatchLoss {
            loss: total.expect("batch_size >= 1").scale(1.0 / batch_size as f64),
            tokens,
            mean_exit: exit_sum / batch_size as f64,
            layer_losses: (mode == ExitMode::Soft).then_some(per_layer),
        })
    })
}
