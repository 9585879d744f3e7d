//! Single-sample latency and FLOP benchmark across decoding modes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::DecodeMode;
use super::generate;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tokenizer::TokenId;

pub const MIN_REPETITIONS: usize = 30;
pub const WARMUPS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub mode: DecodeMode,
    pub length: usize,
    pub repetitions: usize,
    /// Wall-clock per sample, encoder included.
    pub median_ns: u64,
    pub p95_ns: u64,
    /// Mean FLOPs per sample of the decoder's transformer layers, including
    /// key/value refreshes of frozen positions.
    pub decoder_flops: f64,
    /// Mean FLOPs per sample of off-ramp classifiers and feedback.
    pub head_flops: f64,
    pub mean_exit_layer: f64,
    /// AR median over this mode's median; absent when AR was not measured.
    pub speedup_vs_ar: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub modes: Vec<DecodeMode>,
    pub lengths: Vec<usize>,
    pub repetitions: usize,
    pub delta: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            modes: vec![DecodeMode::Ar, DecodeMode::Nar, DecodeMode::Hard, DecodeMode::Soft],
            lengths: vec![8, 16, 32],
            repetitions: MIN_REPETITIONS,
            delta: 0.5,
        }
    }
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[u64], q: f64) -> u64 {
    let mut s = samples.to_vec();
    s.sort_unstable();
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

fn median(samples: &[u64]) -> u64 {
    let mut s = samples.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2
    }
}

/// Times `repetitions` single-sample decodes per (mode, length), cycling
/// through `sources`, after `WARMUPS` untimed runs.
pub fn bench_latency(model: &Model, sources: &[Vec<TokenId>], opts: &BenchOptions) -> Result<Vec<BenchmarkRecord>> {
    if sources.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if opts.repetitions < MIN_REPETITIONS {
        return Err(Error::Config(format!(
            "at least {MIN_REPETITIONS} repetitions are required, got {}",
            opts.repetitions
        )));
    }
    let mut records = Vec::new();
    for &length in &opts.lengths {
        let first = records.len();
        for &mode in &opts.modes {
            for i in 0..WARMUPS {
                generate(model, &sources[i % sources.len()], mode, length, opts.delta)?;
            }
            let mut times = Vec::with_capacity(opts.repetitions);
            let mut flops = 0.0;
            let mut heads = 0.0;
            let mut exit = 0.0;
            for i in 0..opts.repetitions {
                let started = Instant::now();
                let out = generate(model, &sources[i % sources.len()], mode, length, opts.delta)?;
                times.push(started.elapsed().as_nanos() as u64);
                flops += out.flops.decoder_stack() as f64;
                heads += out.flops.heads() as f64;
                exit += out.mean_exit_layer;
            }
            let reps = opts.repetitions as f64;
            records.push(BenchmarkRecord {
                mode,
                length,
                repetitions: opts.repetitions,
                median_ns: median(&times),
                p95_ns: percentile(&times, 0.95),
                decoder_flops: flops / reps,
                head_flops: heads / reps,
                mean_exit_layer: exit / reps,
                speedup_vs_ar: None,
            });
        }
        let ar = records[first..]
            .iter()
            .find(|r| r.mode == DecodeMode::Ar)
            .map(|r| r.median_ns as f64);
        if let Some(ar) = ar {
            for r in &mut records[first..] {
                r.speedup_vs_ar = Some(ar / r.median_ns.max(1) as f64);
            }
        }
    }
    Ok(records)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn scaling_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let cov: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Fixed-width table for terminals.
pub fn format_table(records: &[BenchmarkRecord]) -> String {
    let mut out = format!(
        "{:<5} {:>4} {:>5} {:>12} {:>12} {:>14} {:>6} {:>8}\n",
        "mode", "T", "reps", "median_us", "p95_us", "decoder_flops", "L_bar", "speedup"
    );
    for r in records {
        let speedup = r.speedup_vs_ar.map_or("-".to_string(), |s| format!("{s:.2}"));
        out.push_str(&format!(
            "{:<5} {:>4} {:>5} {:>12.1} {:>12.1} {:>14.0} {:>6.2} {:>8}\n",
            r.mode.name(),
            r.length,
            r.repetitions,
            r.median_ns as f64 / 1e3,
            r.p95_ns as f64 / 1e3,
            r.decoder_flops,
            r.mean_exit_layer,
            speedup
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn percentiles() {
        let xs: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&xs, 0.95), 95);
        assert_eq!(percentile(&xs, 0.5), 50);
        assert_eq!(median(&[3, 1, 2]), 2);
        assert_eq!(median(&[4, 1, 2, 3]), 2);
    }

    #[test]
    fn exponent_of_power_law() {
        let pts: Vec<(f64, f64)> = [8.0, 16.0, 32.0].iter().map(|&t: &f64| (t, 3.0 * t.powi(2))).collect();
        assert!((scaling_exponent(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn records_are_consistent() {
        let m = Model::new(
            ModelConfig {
                layers: 2,
                d_model: 16,
                heads: 2,
                d_ff: 32,
                max_len: 16,
                vocab_size: 20,
                share_off_ramps: true,
                dropout: 0.0,
            },
            1,
        )
        .unwrap();
        let opts = BenchOptions {
            lengths: vec![4, 8],
            ..Default::default()
        };
        let recs = bench_latency(&m, &[vec![5, 6, 7]], &opts).unwrap();
        assert_eq!(recs.len(), 8);
        for r in &recs {
            assert_eq!(r.repetitions, 30);
            assert!(r.p95_ns >= r.median_ns);
            if r.mode == DecodeMode::Ar {
                assert_eq!(r.speedup_vs_ar, Some(1.0));
            }
        }
        let flops = |mode, t| recs.iter().find(|r| r.mode == mode && r.length == t).unwrap().decoder_flops;
        assert!(flops(DecodeMode::Hard, 8) <= flops(DecodeMode::Nar, 8));
        let short = BenchOptions {
            repetitions: 5,
            ..Default::default()
        };
        assert!(bench_latency(&m, &[vec![5]], &short).is_err());
    }
}
