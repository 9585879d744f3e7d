use super::*;
use crate::model::{ExitAssignment, ModelConfig};
use crate::numerics::flops::Category;
use crate::pretrain::TrainConfig;

fn tiny(layers: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        layers,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        max_len: 12,
        vocab_size: 20,
        share_off_ramps: false,
        dropout: 0.0,
    };
    Model::new(cfg, seed).unwrap()
}

fn enc(model: &Model) -> EncoderStates {
    model.encode(&[5, 6, 7, 8], &mut Dropout::eval()).unwrap()
}

#[test]
fn entropy_examples() {
    assert!((entropy(&[0.5, 0.25, 0.25]).unwrap() - 1.0397207708).abs() < 1e-6);
    assert_eq!(entropy(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
    let uniform = vec![0.25; 4];
    assert!((entropy(&uniform).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!(entropy(&[0.5, 0.6]).is_err());
    assert!(entropy(&[1.5, -0.5]).is_err());
}

#[test]
fn truncation_cases() {
    assert_eq!(truncate_at_eos(&[5, 6, EOS, 7]), vec![5, 6]);
    assert_eq!(truncate_at_eos(&[EOS, 5]), Vec::<TokenId>::new());
    assert_eq!(truncate_at_eos(&[5, 6]), vec![5, 6]);
    let once = truncate_at_eos(&[9, 8, EOS, EOS, 5]);
    assert_eq!(truncate_at_eos(&once), once);
}

#[test]
fn negative_delta_rejected() {
    assert!(HardExitConfig::new(-0.1, 4).is_err());
    assert!(HardExitConfig::new(f64::NAN, 4).is_err());
}

#[test]
fn huge_delta_exits_everything_at_first_layer() {
    let m = tiny(3, 1);
    let cfg = HardExitConfig::new((20f64).ln(), 10).unwrap();
    let out = generate_hard(&m, &enc(&m), &cfg).unwrap();
    assert_eq!(out.exit_layers, vec![1; 10]);
    assert_eq!(out.mean_exit_layer, 1.0);
}

#[test]
fn zero_delta_runs_full_depth_and_matches_plain_decoding() {
    let m = tiny(3, 2);
    let e = enc(&m);
    let hard = generate_hard(&m, &e, &HardExitConfig::new(0.0, 10).unwrap()).unwrap();
    assert_eq!(hard.exit_layers, vec![3; 10]);
    let plain = generate_nar(&m, &e, 10).unwrap();
    assert_eq!(hard.raw, plain.raw);
}

#[test]
fn larger_delta_never_exits_later() {
    let m = tiny(4, 3);
    let e = enc(&m);
    let mut previous: Option<Vec<usize>> = None;
    for delta in [0.0, 2.0, 2.5, 2.8, 2.9, 2.95, 3.0, 5.0] {
        let out = generate_hard(&m, &e, &HardExitConfig::new(delta, 12).unwrap()).unwrap();
        if let Some(prev) = &previous {
            assert!(out.exit_layers.iter().zip(prev).all(|(a, b)| a <= b), "delta {delta}");
        }
        previous = Some(out.exit_layers);
    }
}

#[test]
fn hard_exit_agrees_with_copy_through_forward() {
    let m = tiny(4, 4);
    let e = enc(&m);
    let ents: Vec<f64> = generate_soft(&m, &e, &SoftExitConfig { length: 12 }).unwrap().entropies;
    let mut sorted = ents.clone();
    sorted.sort_by(f64::total_cmp);
    let delta = sorted[sorted.len() / 2];
    let out = generate_hard(&m, &e, &HardExitConfig::new(delta, 12).unwrap()).unwrap();
    let trace = no_grad(|| {
        m.decode_with_exits(&e, &ExitAssignment::new(out.exit_layers.clone(), 4).unwrap(), &mut Dropout::eval())
    })
    .unwrap();
    let argmax: Vec<TokenId> = trace.exit_logits.argmax_rows().into_iter().map(|i| i as TokenId).collect();
    assert_eq!(argmax, out.raw);
}

#[test]
fn active_decoder_cost_tracks_exit_depth() {
    let m = tiny(4, 5);
    let e = enc(&m);
    let full = generate_hard(&m, &e, &HardExitConfig::new(0.0, 12).unwrap()).unwrap();
    let shallow = generate_hard(&m, &e, &HardExitConfig::new(10.0, 12).unwrap()).unwrap();
    let per_layer = full.flops.get(Category::DecoderActive) as f64 / 4.0;
    let ratio = shallow.flops.get(Category::DecoderActive) as f64 / per_layer;
    assert!((ratio - shallow.mean_exit_layer).abs() < 1e-9, "{ratio}");
    assert!(shallow.decoder_flops() < full.decoder_flops());
}

#[test]
fn soft_exit_is_deterministic() {
    let m = tiny(3, 6);
    let e = enc(&m);
    let a = generate_soft(&m, &e, &SoftExitConfig { length: 9 }).unwrap();
    let b = generate_soft(&m, &e, &SoftExitConfig { length: 9 }).unwrap();
    assert_eq!(a.raw, b.raw);
    assert_eq!(a.exit_layers, vec![3; 9]);
}

#[test]
fn single_layer_soft_equals_plain() {
    let m = tiny(1, 7);
    let e = enc(&m);
    let soft = generate_soft(&m, &e, &SoftExitConfig { length: 8 }).unwrap();
    let plain = generate_nar(&m, &e, 8).unwrap();
    assert_eq!(soft.raw, plain.raw);
}

#[test]
fn autoregressive_reference_costs_more() {
    let m = tiny(2, 8);
    let e = enc(&m);
    let nar = generate_nar(&m, &e, 10).unwrap();
    let ar = generate_ar(&m, &e, 10, false).unwrap();
    assert_eq!(ar.raw.len(), 10);
    assert!(ar.decoder_flops() > nar.decoder_flops());
}

fn dataset() -> Vec<ParallelExample> {
    (0..6)
        .map(|i| ParallelExample {
            src: vec![5 + i, 6 + i, 7],
            tgt: vec![7, 6 + i, 5 + i],
        })
        .collect()
}

fn train_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        lr: 1e-3,
        samples_per_sequence: 2,
        decode_len: Some(6),
        ..Default::default()
    }
}

#[test]
fn zero_steps_leave_model_unchanged() {
    let mut m = tiny(2, 9);
    let before = m.clone();
    let cfg = train_cfg(0);
    let mut opt = cfg.optimizer(&m);
    let report = finetune_loop(&mut m, &dataset(), ExitMode::Soft, &cfg, 1, &mut opt).unwrap();
    assert!(report.records.is_empty());
    assert!(m.bitwise_eq(&before));
}

#[test]
fn same_seed_same_curve() {
    for mode in [ExitMode::Hard, ExitMode::Soft] {
        let run = || {
            let mut m = tiny(2, 10);
            let cfg = train_cfg(3);
            let mut opt = cfg.optimizer(&m);
            finetune_loop(&mut m, &dataset(), mode, &cfg, 4, &mut opt).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.records[0].layer_losses.is_some(), mode == ExitMode::Soft);
    }
}

#[test]
fn soft_finetuning_reduces_loss() {
    let mut m = tiny(2, 11);
    let cfg = train_cfg(40);
    let mut opt = cfg.optimizer(&m);
    let losses = finetune_loop(&mut m, &dataset(), ExitMode::Soft, &cfg, 5, &mut opt).unwrap().losses();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[35..].iter().sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn exit_mode_parses() {
    assert_eq!("hard".parse::<ExitMode>().unwrap(), ExitMode::Hard);
    assert_eq!("soft".parse::<ExitMode>().unwrap(), ExitMode::Soft);
    assert!("medium".parse::<ExitMode>().is_err());
}
