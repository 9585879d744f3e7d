use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the joint gradient to this global L2 norm when exceeded.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
        }
    }
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Each parameter is replaced by a fresh
/// trainable leaf holding the updated values; a parameter without a
/// gradient is treated as having a zero gradient.
pub fn adam_step(params: &mut [Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::contract(format!(
            "optimizer tracks {} parameters, got {}",
            state.first.len(),
            params.len()
        )));
    }
    let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.grad()).collect();
    for (p, m) in params.iter().zip(&state.first) {
        if p.numel() != m.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: vec![m.len()],
            });
        }
    }

    let clip = match state.config.max_grad_norm {
        Some(max) => {
            let norm = grads
                .iter()
                .flatten()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps, .. } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let mut data = p.data().to_vec();
        let g = grads[i].as_deref();
        for j in 0..data.len() {
            let gj = g.map_or(0.0, |g| g[j] * clip);
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            data[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
        *p = Tensor::param(data, p.shape())?;
    }
    Ok(())
}
