//! Decoder cost of each decoding mode as the output length grows, with the
//! fitted scaling exponents.
//!
//!     cargo run --release --example benchmark

use layerexit::harness::{bench_latency, generate, scaling_exponent, BenchOptions, DecodeMode};
use layerexit::harness::bench::format_table;
use layerexit::model::{Model, ModelConfig};

fn main() -> layerexit::Result<()> {
    let model = Model::new(
        ModelConfig {
            layers: 6,
            d_model: 128,
            heads: 4,
            d_ff: 512,
            max_len: 64,
            vocab_size: 500,
            share_off_ramps: true,
            dropout: 0.0,
        },
        1,
    )?;
    let sources: Vec<Vec<u32>> = (0..8).map(|i| (0..16).map(|j| 5 + (i * 31 + j * 7) % 495).collect()).collect();
    // an untrained model is uncertain everywhere, so take the median
    // top-layer entropy as threshold to get a mix of exit depths
    let mut entropies = generate(&model, &sources[0], DecodeMode::Nar, 64, 0.0)?.entropies;
    entropies.sort_by(f64::total_cmp);
    let opts = BenchOptions {
        modes: vec![DecodeMode::Ar, DecodeMode::Nar, DecodeMode::Hard, DecodeMode::Soft],
        lengths: vec![8, 16, 32, 64],
        repetitions: 30,
        delta: entropies[entropies.len() / 2],
    };
    println!("hard-exit threshold {:.4} nats", opts.delta);
    let records = bench_latency(&model, &sources, &opts)?;
    print!("{}", format_table(&records));
    for mode in opts.modes {
        let points: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| (r.length as f64, r.decoder_flops))
            .collect();
        println!("{mode:>4}: decoder FLOPs grow as T^{:.2}", scaling_exponent(&points));
    }
    Ok(())
}
