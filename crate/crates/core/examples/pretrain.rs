//! Layer-permutation denoising pre-training on a small generated corpus,
//! printing the loss curve and how each off-ramp's loss falls.
//!
//!     cargo run --release --example pretrain -- [steps]

use layerexit::harness::{generate_pairs, Task};
use layerexit::model::{Dropout, Model, ModelConfig};
use layerexit::numerics::no_grad;
use layerexit::pretrain::{pretrain_loop, CorruptionConfig, PermutationSampler, TrainConfig, TrainingExample};
use layerexit::tokenizer::{TokenId, Vocabulary};

fn main() -> layerexit::Result<()> {
    let steps = std::env::args().nth(1).map_or(300, |s| s.parse().expect("steps"));
    // documents of two to four template sentences each
    let sentences: Vec<String> = generate_pairs(Task::Template, 600, 1).into_iter().map(|(_, t)| t).collect();
    let docs: Vec<String> = sentences.chunks(3).map(|c| c.join(" ")).collect();
    let vocab = Vocabulary::build(docs.iter().map(String::as_str), 500)?;
    let corpus: Vec<Vec<TokenId>> = docs.iter().map(|d| vocab.encode(d)).collect();

    let mut model = Model::new(
        ModelConfig {
            layers: 3,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            max_len: 48,
            vocab_size: vocab.len(),
            share_off_ramps: true,
            dropout: 0.1,
        },
        1,
    )?;
    let cfg = TrainConfig {
        steps,
        batch_size: 8,
        lr: 1e-3,
        warmup_steps: 50,
        samples_per_sequence: 10,
        ..Default::default()
    };
    let mut sampler = PermutationSampler::new(cfg.samples_per_sequence, model.layers(), 2)?;
    let mut opt = cfg.optimizer(&model);
    let report = pretrain_loop(
        &mut model,
        &corpus,
        vocab.full_stop(),
        &CorruptionConfig::default(),
        &cfg,
        &mut sampler,
        &mut opt,
    )?;
    for r in report.records.iter().step_by((steps / 10).max(1)) {
        println!("step {:>4}  loss {:.3}  {:>7.0} tokens/s", r.step, r.loss, r.tokens_per_sec);
    }

    // per-layer reconstruction loss on one held-out corrupted document
    let doc = &corpus[0][..corpus[0].len().min(40)];
    let mut masked = doc.to_vec();
    masked[3] = layerexit::tokenizer::MASK;
    let ex = TrainingExample::new(masked, doc, 48)?;
    let enc = model.encode(&ex.src_ids, &mut Dropout::eval())?;
    let states = no_grad(|| model.decode_full(&enc, 48, &mut Dropout::eval()))?;
    for (l, h) in states.iter().enumerate() {
        let loss = no_grad(|| model.off_ramp_logits(h, l + 1)?.cross_entropy(&ex.labels()))?;
        println!("off-ramp {}: loss {:.3}", l + 1, loss.item());
    }
    Ok(())
}
