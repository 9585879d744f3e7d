//! Save a model, reload it and confirm generation is unchanged.
//!
//!     cargo run --example checkpoint

use layerexit::harness::{generate, load_checkpoint, save_checkpoint, DecodeMode};
use layerexit::model::{Model, ModelConfig};

fn main() -> layerexit::Result<()> {
    let model = Model::new(
        ModelConfig {
            layers: 3,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            max_len: 16,
            vocab_size: 60,
            share_off_ramps: false,
            dropout: 0.1,
        },
        42,
    )?;
    let path = std::env::temp_dir().join("layerexit-example.ckpt");
    save_checkpoint(&model, &path)?;
    let bytes = std::fs::metadata(&path)?.len();
    let back = load_checkpoint(&path)?;
    println!(
        "{} parameters in {} tensors, {bytes} bytes on disk, bitwise equal after reload: {}",
        model.params().numel(),
        model.params().len(),
        back.bitwise_eq(&model)
    );

    let src = [7, 8, 9, 10, 11];
    for mode in [DecodeMode::Nar, DecodeMode::Hard, DecodeMode::Soft] {
        let a = generate(&model, &src, mode, 12, 3.5)?;
        let b = generate(&back, &src, mode, 12, 3.5)?;
        println!("{mode:>4}: {:?} exits {:?} identical {}", a.raw, a.exit_layers, a.raw == b.raw);
    }

    let mut corrupt = std::fs::read(&path)?;
    corrupt.truncate(corrupt.len() / 3);
    println!("truncated file: {}", layerexit::harness::checkpoint::from_bytes(&corrupt).unwrap_err());
    Ok(())
}
