//! Sweep the hard-exit entropy threshold on a briefly trained model and
//! print the exit-layer histogram, mean exit layer and accuracy for each.
//!
//!     cargo run --release --example threshold_sweep

use layerexit::decode::{finetune_loop, ExitMode, ParallelExample};
use layerexit::harness::{generate, generate_pairs, DecodeMode, Task};
use layerexit::metrics::token_accuracy;
use layerexit::model::{Model, ModelConfig};
use layerexit::pretrain::TrainConfig;
use layerexit::tokenizer::Vocabulary;

fn main() -> layerexit::Result<()> {
    let pairs = generate_pairs(Task::Template, 1200, 3);
    let vocab = Vocabulary::build(pairs.iter().flat_map(|(s, t)| [s.as_str(), t.as_str()]), 1000)?;
    let data: Vec<ParallelExample> = pairs
        .iter()
        .map(|(s, t)| ParallelExample {
            src: vocab.encode(s),
            tgt: vocab.encode(t),
        })
        .collect();
    let (train, test) = data.split_at(1000);

    let layers = 4;
    let mut model = Model::new(
        ModelConfig {
            layers,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            max_len: 24,
            vocab_size: vocab.len(),
            share_off_ramps: true,
            dropout: 0.0,
        },
        1,
    )?;
    let cfg = TrainConfig {
        steps: 250,
        batch_size: 16,
        lr: 2e-3,
        warmup_steps: 50,
        samples_per_sequence: 4,
        ..Default::default()
    };
    let mut opt = cfg.optimizer(&model);
    finetune_loop(&mut model, train, ExitMode::Hard, &cfg, 1, &mut opt)?;

    println!("{:>6}  {:<28} {:>6} {:>9} {:>14}", "delta", "exits per layer", "L_bar", "token_acc", "decoder_flops");
    for delta in [0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, (vocab.len() as f64).ln()] {
        let mut hist = vec![0usize; layers];
        let (mut acc, mut flops) = (0.0, 0u64);
        for ex in test {
            let out = generate(&model, &ex.src, DecodeMode::Hard, 24, delta)?;
            for &l in &out.exit_layers {
                hist[l - 1] += 1;
            }
            acc += token_accuracy(&out.tokens, &ex.tgt);
            flops += out.flops.decoder_stack();
        }
        let n: usize = hist.iter().sum();
        let l_bar = hist.iter().enumerate().map(|(i, c)| (i + 1) * c).sum::<usize>() as f64 / n as f64;
        println!(
            "{delta:>6.2}  {:<28} {l_bar:>6.2} {:>9.3} {:>14}",
            format!("{hist:?}"),
            acc / test.len() as f64,
            flops / test.len() as u64
        );
    }
    Ok(())
}
