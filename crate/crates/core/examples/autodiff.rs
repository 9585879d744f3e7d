//! Fit a two-layer network to XOR with the tape-based tensor library.
//!
//!     cargo run --release --example autodiff

use layerexit::numerics::{adam_step, AdamConfig, OptimizerState, Tensor};

fn main() -> layerexit::Result<()> {
    let x = Tensor::new(vec![0., 0., 0., 1., 1., 0., 1., 1.], &[4, 2])?;
    let y = [0usize, 1, 1, 0];

    let mut params = vec![
        Tensor::param(vec![0.9, -0.7, 0.4, 0.8, -0.5, 0.6, 0.3, -0.9], &[2, 4])?,
        Tensor::param(vec![0.0; 4], &[4])?,
        Tensor::param(vec![0.5, -0.4, -0.6, 0.7, 0.8, -0.3, -0.2, 0.9], &[4, 2])?,
        Tensor::param(vec![0.0; 2], &[2])?,
    ];
    let cfg = AdamConfig {
        lr: 0.05,
        ..AdamConfig::default()
    };
    let mut state = OptimizerState::new(cfg, &params);

    for step in 0..=300 {
        let hidden = x.matmul(&params[0])?.add_bias(&params[1])?.gelu();
        let logits = hidden.matmul(&params[2])?.add_bias(&params[3])?;
        let loss = logits.cross_entropy(&y)?;
        if step % 50 == 0 {
            println!("step {step:>3}  loss {:.5}  predictions {:?}", loss.item(), logits.argmax_rows());
        }
        loss.backward()?;
        adam_step(&mut params, &mut state)?;
    }
    Ok(())
}
