//! Layer-permutation objective: every target position is scored by the
//! off-ramp of a randomly assigned exit layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Dropout, EncoderStates, ExitAssignment, Model};
use crate::numerics::Tensor;
use crate::tokenizer::{TokenId, EOS, PAD};

/// One (corrupted source, original target) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingExample {
    pub src_ids: Vec<TokenId>,
    /// Target ending with `[EOS]`.
    pub tgt_ids: Vec<TokenId>,
    /// Decoder positions; targets are padded with `[PAD]` up to this length.
    pub decode_len: usize,
}

impl TrainingExample {
    /// `tgt` is given without the terminator.
    pub fn new(src_ids: Vec<TokenId>, tgt: &[TokenId], decode_len: usize) -> Result<Self> {
        if src_ids.is_empty() {
            return Err(Error::contract("empty source"));
        }
        let mut tgt_ids = tgt.to_vec();
        tgt_ids.push(EOS);
        if tgt_ids.len() > decode_len {
            return Err(Error::contract(format!(
                "target of {} tokens does not fit {decode_len} positions",
                tgt_ids.len()
            )));
        }
        Ok(TrainingExample {
            src_ids,
            tgt_ids,
            decode_len,
        })
    }

    /// Per-position labels, `[PAD]` after the terminator.
    pub fn labels(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self.tgt_ids.iter().map(|&i| i as usize).collect();
        out.resize(self.decode_len, PAD as usize);
        out
    }
}

/// Draws each position's exit layer independently and uniformly from `1..=L`.
pub fn sample_exit_assignment(len: usize, layers: usize, rng: &mut impl Rng) -> ExitAssignment {
    let exits = (0..len).map(|_| rng.random_range(1..=layers)).collect();
    ExitAssignment::new(exits, layers).expect("sampled layers lie in range")
}

/// Produces `k` assignments per sequence.
#[derive(Clone, Debug)]
pub struct PermutationSampler {
    k: usize,
    layers: usize,
    rng: ChaCha8Rng,
}

impl PermutationSampler {
    pub fn new(k: usize, layers: usize, seed: u64) -> Result<Self> {
        if k == 0 || layers == 0 {
            return Err(Error::contract("sampler needs k >= 1 and at least one layer"));
        }
        Ok(PermutationSampler {
            k,
            layers,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sample(&mut self, len: usize) -> Vec<ExitAssignment> {
        (0..self.k)
            .map(|_| sample_exit_assignment(len, self.layers, &mut self.rng))
            .collect()
    }
}

/// How per-assignment losses are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossRoute {
    /// One full-depth forward; each assignment gathers its logits from the
    /// per-layer off-ramps. Upper layers do not see copied states.
    #[default]
    Shared,
    /// One copy-through forward per assignment.
    CopyThrough,
}

#[derive(Clone, Debug)]
pub struct LplmLoss {
    pub loss: Tensor,
    /// Mean exit layer across the sampled assignments.
    pub mean_exit: f64,
}

/// Samples `k` assignments and averages their losses.
pub fn lplm_loss(
    model: &Model,
    example: &TrainingExample,
    sampler: &mut PermutationSampler,
    route: LossRoute,
    dropout: &mut Dropout,
) -> Result<LplmLoss> {
    let assignments = sampler.sample(example.decode_len);
    lplm_loss_with(model, example, &assignments, route, dropout)
}

/// Mean over `assignments` of the per-token cross-entropy where position `t`
/// is scored by off-ramp `l_t` on `h^{l_t}_t`.
pub fn lplm_loss_with(
    model: &Model,
    example: &TrainingExample,
    assignments: &[ExitAssignment],
    route: LossRoute,
    dropout: &mut Dropout,
) -> Result<LplmLoss> {
    if assignments.is_empty() {
        return Err(Error::contract("no exit assignments"));
    }
    let t = example.decode_len;
    if let Some(a) = assignments.iter().find(|a| a.len() != t) {
        return Err(Error::contract(format!("assignment length {} != decode length {t}", a.len())));
    }
    let enc = model.encode(&example.src_ids, dropout)?;
    let labels = example.labels();
    let mean_exit = assignments.iter().map(ExitAssignment::mean).sum::<f64>() / assignments.len() as f64;
    let loss = match route {
        LossRoute::Shared => shared_route(model, &enc, &labels, assignments, dropout)?,
        LossRoute::CopyThrough => {
            let mut total: Option<Tensor> = None;
            for a in assignments {
                let trace = model.decode_with_exits(&enc, a, dropout)?;
                let l = trace.exit_logits.cross_entropy(&labels)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => acc.add(&l)?,
                });
            }
            total.expect("non-empty").scale(1.0 / assignments.len() as f64)
        }
    };
    Ok(LplmLoss { loss, mean_exit })
}

fn shared_route(
    model: &Model,
    enc: &EncoderStates,
    labels: &[usize],
    assignments: &[ExitAssignment],
    dropout: &mut Dropout,
) -> Result<Tensor> {
    let t = labels.len();
    let layers = model.layers();
    // weight[l][t]: share of assignments scoring position t at layer l + 1
    let mut weight = vec![vec![0.0; t]; layers];
    let norm = 1.0 / (assignments.len() * t) as f64;
    for a in assignments {
        for (pos, &l) in a.exits().iter().enumerate() {
            weight[l - 1][pos] += norm;
        }
    }
    let states = model.decode_full(enc, t, dropout)?;
    let mut total: Option<Tensor> = None;
    for (li, w) in weight.iter().enumerate() {
        let rows: Vec<usize> = (0..t).filter(|&p| w[p] > 0.0).collect();
        if rows.is_empty() {
            continue;
        }
        let h = if rows.len() == t { states[li].clone() } else { states[li].gather_rows(&rows)? };
        let row_labels: Vec<usize> = rows.iter().map(|&p| labels[p]).collect();
        let nll = model.off_ramp_logits(&h, li + 1)?.nll_rows(&row_labels)?;
        let part = nll.weighted_sum(rows.iter().map(|&p| w[p]).collect())?;
        total = Some(match total {
            None => part,
            Some(acc) => acc.add(&part)?,
        });
    }
    Ok(total.expect("at least one scored position"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numerics::no_grad;

    fn model(layers: usize) -> Model {
        Model::new(
            ModelConfig {
                layers,
                d_model: 16,
                heads: 2,
                d_ff: 32,
                max_len: 10,
                vocab_size: 24,
                share_off_ramps: false,
                dropout: 0.0,
            },
            5,
        )
        .unwrap()
    }

    fn example() -> TrainingExample {
        TrainingExample::new(vec![5, 6, 1, 9], &[5, 6, 7, 8, 9], 8).unwrap()
    }

    #[test]
    fn labels_are_padded_after_eos() {
        let ex = example();
        assert_eq!(ex.tgt_ids.last(), Some(&EOS));
        assert_eq!(ex.labels(), vec![5, 6, 7, 8, 9, EOS as usize, 0, 0]);
        assert!(TrainingExample::new(vec![5], &[5; 8], 8).is_err());
    }

    #[test]
    fn single_layer_assignment_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_exit_assignment(6, 1, &mut rng).exits(), &[1; 6]);
    }

    #[test]
    fn two_layers_three_positions_cover_eight_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seen: std::collections::HashSet<Vec<usize>> = (0..400)
            .map(|_| sample_exit_assignment(3, 2, &mut rng).exits().to_vec())
            .collect();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn top_layer_assignment_is_plain_nar_loss() {
        let m = model(3);
        let ex = example();
        let top = [ExitAssignment::uniform(8, 3)];
        let enc = m.encode(&ex.src_ids, &mut Dropout::eval()).unwrap();
        let vanilla = m
            .nar_logits(&enc, 8, &mut Dropout::eval())
            .unwrap()
            .cross_entropy(&ex.labels())
            .unwrap()
            .item();
        for route in [LossRoute::Shared, LossRoute::CopyThrough] {
            let l = lplm_loss_with(&m, &ex, &top, route, &mut Dropout::eval()).unwrap();
            assert!((l.loss.item() - vanilla).abs() < 1e-6);
            assert_eq!(l.mean_exit, 3.0);
        }
    }

    #[test]
    fn fresh_model_loss_near_uniform_entropy() {
        let m = model(3);
        let mut sampler = PermutationSampler::new(4, 3, 1).unwrap();
        let l = lplm_loss(&m, &example(), &mut sampler, LossRoute::Shared, &mut Dropout::eval()).unwrap();
        let ln_v = (24f64).ln();
        assert!(l.loss.item() >= 0.0);
        assert!((l.loss.item() - ln_v).abs() < 0.2 * ln_v, "{} vs {ln_v}", l.loss.item());
    }

    #[test]
    fn k_two_is_mean_of_single_losses() {
        let m = model(3);
        let ex = example();
        let a = ExitAssignment::new(vec![1, 2, 3, 1, 2, 3, 3, 1], 3).unwrap();
        let b = ExitAssignment::new(vec![3, 3, 1, 1, 2, 2, 1, 2], 3).unwrap();
        for route in [LossRoute::Shared, LossRoute::CopyThrough] {
            let run = |set: &[ExitAssignment]| {
                no_grad(|| lplm_loss_with(&m, &ex, set, route, &mut Dropout::eval()).unwrap().loss.item())
            };
            let la = run(std::slice::from_ref(&a));
            let lb = run(std::slice::from_ref(&b));
            let both = run(&[a.clone(), b.clone()]);
            assert!((both - (la + lb) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn routes_differ_only_through_copied_states() {
        // with every position exiting at layer 1 nothing is copied into
        // attention that a full forward would not also see at layer 1
        let m = model(2);
        let ex = example();
        let ones = [ExitAssignment::uniform(8, 1)];
        let shared = lplm_loss_with(&m, &ex, &ones, LossRoute::Shared, &mut Dropout::eval()).unwrap();
        let exact = lplm_loss_with(&m, &ex, &ones, LossRoute::CopyThrough, &mut Dropout::eval()).unwrap();
        assert!((shared.loss.item() - exact.loss.item()).abs() < 1e-9);
    }

    #[test]
    fn loss_is_differentiable() {
        let m = model(2);
        let mut sampler = PermutationSampler::new(2, 2, 3).unwrap();
        let l = lplm_loss(&m, &example(), &mut sampler, LossRoute::CopyThrough, &mut Dropout::eval()).unwrap();
        l.loss.backward().unwrap();
        let touched = m.params().tensors().iter().filter(|p| p.grad().is_some()).count();
        assert!(touched > m.params().len() / 2);
    }
}
