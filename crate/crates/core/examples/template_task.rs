//! Fine-tune hard- and soft-exit models on the synthetic template task and
//! compare their held-out accuracy.
//!
//!     cargo run --release --example template_task -- [steps]

use std::time::Instant;

use layerexit::decode::{finetune_loop, ExitMode, ParallelExample};
use layerexit::harness::{generate, generate_pairs, DecodeMode, Task};
use layerexit::metrics::token_accuracy;
use layerexit::model::{Model, ModelConfig};
use layerexit::pretrain::TrainConfig;
use layerexit::tokenizer::Vocabulary;

fn main() -> layerexit::Result<()> {
    let steps = std::env::args().nth(1).map_or(2000, |s| s.parse().expect("steps"));
    let pairs = generate_pairs(Task::Template, 5000, 7);
    let vocab = Vocabulary::build(pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]), 1000)?;
    let data: Vec<ParallelExample> = pairs
        .iter()
        .map(|(s, t)| ParallelExample {
            src: vocab.encode(s),
            tgt: vocab.encode(t),
        })
        .collect();
    let (train, test) = data.split_at(4500);

    let config = ModelConfig {
        layers: 3,
        d_model: 64,
        heads: 4,
        d_ff: 128,
        max_len: 24,
        vocab_size: vocab.len(),
        share_off_ramps: true,
        dropout: 0.0,
    };
    let train_cfg = TrainConfig {
        steps,
        batch_size: 16,
        lr: 2e-3,
        warmup_steps: 100,
        samples_per_sequence: 4,
        ..Default::default()
    };

    for mode in [ExitMode::Soft, ExitMode::Hard] {
        let mut model = Model::new(config.clone(), 1)?;
        let mut opt = train_cfg.optimizer(&model);
        let started = Instant::now();
        let report = finetune_loop(&mut model, train, mode, &train_cfg, 3, &mut opt)?;
        let losses = report.losses();
        println!(
            "{mode:?}: {steps} steps in {:.1}s, loss {:.3} -> {:.3}",
            started.elapsed().as_secs_f64(),
            losses.first().copied().unwrap_or(f64::NAN),
            losses.last().copied().unwrap_or(f64::NAN)
        );
        let decode = match mode {
            ExitMode::Soft => DecodeMode::Soft,
            ExitMode::Hard => DecodeMode::Hard,
        };
        let (mut tok, mut exact, mut lbar) = (0.0, 0, 0.0);
        for ex in test {
            let out = generate(&model, &ex.src, decode, 24, 0.5)?;
            tok += token_accuracy(&out.tokens, &ex.tgt);
            exact += (out.tokens == ex.tgt) as usize;
            lbar += out.mean_exit_layer;
        }
        let n = test.len() as f64;
        println!(
            "  token accuracy {:.3}, exact match {:.3}, mean exit layer {:.2}",
            tok / n,
            exact as f64 / n,
            lbar / n
        );
    }
    Ok(())
}
