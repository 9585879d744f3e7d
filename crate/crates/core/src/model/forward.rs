use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Attention, Linear, Model, Norm};
use crate::error::{Error, Result};
use crate::numerics::flops::{self, Category, FlopCounts};
use crate::numerics::{no_grad, Tensor};
use crate::tokenizer::{TokenId, BOS, EOS, MASK};

const LN_EPS: f64 = 1e-5;

/// Dropout source; `eval()` disables it.
#[derive(Debug)]
pub struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Dropout { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Dropout {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    fn apply(&mut self, x: Tensor, rate: f64) -> Result<Tensor> {
        match &mut self.rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.mul_const(mask)
            }
            _ => Ok(x),
        }
    }
}

/// Final encoder hidden states `[n × d]`.
#[derive(Clone, Debug)]
pub struct EncoderStates {
    pub states: Tensor,
    /// Set when the source exceeded the position table and was cut.
    pub truncated: bool,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Cross-attention keys and values of the encoder states, per decoder layer.
#[derive(Clone, Debug)]
pub struct CrossMemory {
    layers: Vec<(Tensor, Tensor)>,
}

/// Per-position exit layers, 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExitAssignment {
    exits: Vec<usize>,
}

impl ExitAssignment {
    pub fn new(exits: Vec<usize>, layers: usize) -> Result<Self> {
        if let Some(bad) = exits.iter().find(|&&l| l == 0 || l > layers) {
            return Err(Error::contract(format!("exit layer {bad} outside [1, {layers}]")));
        }
        Ok(ExitAssignment { exits })
    }

    pub fn uniform(len: usize, layer: usize) -> Self {
        ExitAssignment { exits: vec![layer; len] }
    }

    pub fn exits(&self) -> &[usize] {
        &self.exits
    }

    pub fn len(&self) -> usize {
        self.exits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exits.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.exits.iter().sum::<usize>() as f64 / self.exits.len().max(1) as f64
    }
}

/// Hidden states of a decode with per-position exits.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// `h⁰`, `[T × d]`.
    pub input: Tensor,
    /// `h¹ … hᴸ`, each `[T × d]`; rows past a position's exit are copies.
    pub layers: Vec<Tensor>,
    /// Full-length states each layer's self-attention read keys/values from.
    pub attention_inputs: Vec<Tensor>,
    /// Logits of each position from its exit layer's off-ramp, `[T × V]`.
    pub exit_logits: Tensor,
    /// `copied[l][t]` is true when layer `l + 1` did not recompute position `t`.
    pub copied: Vec<Vec<bool>>,
}

impl DecoderTrace {
    /// `h^l_t` for 1-based `layer` (0 gives the input embedding).
    pub fn state(&self, layer: usize, position: usize) -> &[f64] {
        if layer == 0 {
            self.input.row(position)
        } else {
            self.layers[layer - 1].row(position)
        }
    }
}

/// Soft-exit forward: every layer's logits and its argmax feedback tokens.
#[derive(Clone, Debug)]
pub struct SoftTrace {
    pub logits: Vec<Tensor>,
    pub predictions: Vec<Vec<usize>>,
}

/// Greedy causal decode used only as a cost reference.
#[derive(Clone, Debug)]
pub struct ArOutput {
    pub ids: Vec<TokenId>,
    /// Number of full decoder-stack passes.
    pub passes: usize,
    pub flops: FlopCounts,
}

/// Rows to recompute at a layer; `None` means all positions.
type Active<'a> = Option<&'a [usize]>;

impl Model {
    fn linear(&self, x: &Tensor, lin: &Linear) -> Result<Tensor> {
        x.matmul(self.p(lin.weight))?.add_bias(self.p(lin.bias))
    }

    fn norm(&self, x: &Tensor, n: &Norm) -> Result<Tensor> {
        x.layer_norm(self.p(n.gain), self.p(n.bias), LN_EPS)
    }

    /// Multi-head scaled dot-product attention over projected q/k/v,
    /// followed by the output projection.
    fn attend(&self, attn: &Attention, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (q.slice_cols(h * dh, dh)?, k.slice_cols(h * dh, dh)?, v.slice_cols(h * dh, dh)?)
            };
            let mut scores = qh.matmul_t(&kh)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            outs.push(scores.softmax(1)?.matmul(&vh)?);
        }
        let joined = if heads == 1 { outs.pop().expect("one head") } else { Tensor::concat_cols(&outs)? };
        self.linear(&joined, &attn.output)
    }

    fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let positions: Vec<usize> = (0..ids.len()).collect();
        self.p(self.tok_emb)
            .gather_rows(ids)?
            .add(&self.p(self.pos_emb).gather_rows(&positions)?)
    }

    /// Runs the encoder. Sources longer than `max_len` are cut and flagged.
    pub fn encode(&self, src: &[TokenId], dropout: &mut Dropout) -> Result<EncoderStates> {
        if src.is_empty() {
            return Err(Error::contract("encoder input must not be empty"));
        }
        let v = self.config.vocab_size;
        if let Some(&bad) = src.iter().find(|&&id| id as usize >= v) {
            return Err(Error::Index { index: bad as usize, size: v });
        }
        let truncated = src.len() > self.config.max_len;
        let ids: Vec<usize> = src.iter().take(self.config.max_len).map(|&i| i as usize).collect();
        let rate = self.config.dropout;
        let states = flops::in_category(Category::Encoder, || -> Result<Tensor> {
            let mut h = dropout.apply(self.embed(&ids)?, rate)?;
            for layer in &self.encoder {
                let x = self.norm(&h, &layer.attn_norm)?;
                let q = self.linear(&x, &layer.attn.query)?;
                let k = self.linear(&x, &layer.attn.key)?;
                let val = self.linear(&x, &layer.attn.value)?;
                let att = self.attend(&layer.attn, &q, &k, &val, None)?;
                h = h.add(&dropout.apply(att, rate)?)?;
                let x = self.norm(&h, &layer.ff_norm)?;
                let f = self.linear(&self.linear(&x, &layer.ff_in)?.gelu(), &layer.ff_out)?;
                h = h.add(&dropout.apply(f, rate)?)?;
            }
            self.norm(&h, &self.enc_norm)
        })?;
        Ok(EncoderStates { states, truncated })
    }

    /// Projects encoder states to each decoder layer's cross-attention keys
    /// and values.
    pub fn cross_memory(&self, enc: &EncoderStates) -> Result<CrossMemory> {
        flops::in_category(Category::CrossMemory, || {
            let layers = self
                .decoder
                .iter()
                .map(|layer| {
                    Ok((
                        self.linear(&enc.states, &layer.cross_attn.key)?,
                        self.linear(&enc.states, &layer.cross_attn.value)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CrossMemory { layers })
        })
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.config.max_len {
            return Err(Error::contract(format!(
                "decode length {t} outside [1, {}]",
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// `h⁰`: `T` copies of the `[MASK]` embedding plus position embeddings.
    pub fn nar_inputs(&self, t: usize) -> Result<Tensor> {
        self.check_len(t)?;
        self.embed(&vec![MASK as usize; t])
    }

    /// One decoder layer (`index` is 0-based). Rows outside `active` are
    /// returned unchanged but still act as attention keys/values.
    fn decoder_layer(
        &self,
        index: usize,
        h: &Tensor,
        active: Active<'_>,
        memory: &CrossMemory,
        mask: Option<&Tensor>,
        dropout: &mut Dropout,
    ) -> Result<Tensor> {
        let layer = &self.decoder[index];
        let rate = self.config.dropout;
        let x = self.norm(h, &layer.self_norm)?;
        let (q, k, v, residual) = match active {
            None => flops::in_category(Category::DecoderActive, || -> Result<_> {
                Ok((
                    self.linear(&x, &layer.self_attn.query)?,
                    self.linear(&x, &layer.self_attn.key)?,
                    self.linear(&x, &layer.self_attn.value)?,
                    h.clone(),
                ))
            })?,
            Some(rows) => {
                let frozen: Vec<usize> = {
                    let mut is_active = vec![false; h.rows()];
                    rows.iter().for_each(|&r| is_active[r] = true);
                    (0..h.rows()).filter(|&r| !is_active[r]).collect()
                };
                let xa = x.gather_rows(rows)?;
                let (q, ka, va) = flops::in_category(Category::DecoderActive, || -> Result<_> {
                    Ok((
                        self.linear(&xa, &layer.self_attn.query)?,
                        self.linear(&xa, &layer.self_attn.key)?,
                        self.linear(&xa, &layer.self_attn.value)?,
                    ))
                })?;
                let (k, v) = if frozen.is_empty() {
                    (ka, va)
                } else {
                    let xf = x.gather_rows(&frozen)?;
                    let (kf, vf) = flops::in_category(Category::DecoderKvRefresh, || -> Result<_> {
                        Ok((
                            self.linear(&xf, &layer.self_attn.key)?,
                            self.linear(&xf, &layer.self_attn.value)?,
                        ))
                    })?;
                    // key order is irrelevant to unmasked attention
                    (Tensor::concat_rows(&[ka, kf])?, Tensor::concat_rows(&[va, vf])?)
                };
                (q, k, v, h.gather_rows(rows)?)
            }
        };

        let (mem_k, mem_v) = &memory.layers[index];
        let updated = flops::in_category(Category::DecoderActive, || -> Result<Tensor> {
            let att = self.attend(&layer.self_attn, &q, &k, &v, mask)?;
            let mut y = residual.add(&dropout.apply(att, rate)?)?;
            let z = self.norm(&y, &layer.cross_norm)?;
            let cq = self.linear(&z, &layer.cross_attn.query)?;
            let cross = self.attend(&layer.cross_attn, &cq, mem_k, mem_v, None)?;
            y = y.add(&dropout.apply(cross, rate)?)?;
            let z = self.norm(&y, &layer.ff_norm)?;
            let f = self.linear(&self.linear(&z, &layer.ff_in)?.gelu(), &layer.ff_out)?;
            y.add(&dropout.apply(f, rate)?)
        })?;

        match active {
            None => Ok(updated),
            Some(rows) => h.scatter_rows(rows, &updated),
        }
    }

    /// Off-ramp logits of layer `layer` (1-based) for the given rows.
    pub fn off_ramp_logits(&self, h: &Tensor, layer: usize) -> Result<Tensor> {
        if layer == 0 || layer > self.layers() {
            return Err(Error::contract(format!("off-ramp layer {layer} outside [1, {}]", self.layers())));
        }
        let ramp = &self.ramps[layer - 1];
        flops::in_category(Category::OffRamp, || self.linear(&self.norm(h, &ramp.norm)?, &ramp.proj))
    }

    /// Output distribution of off-ramp `layer` for one hidden state.
    pub fn off_ramp_predict(&self, h: &[f64], layer: usize) -> Result<Vec<f64>> {
        let row = Tensor::new(h.to_vec(), &[1, h.len()])?;
        let probs = no_grad(|| self.off_ramp_logits(&row, layer)?.softmax(1))?;
        Ok(probs.data().to_vec())
    }

    /// Fuses each position's predicted-token embedding with its state.
    pub fn feedback(&self, h: &Tensor, predicted: &[usize]) -> Result<Tensor> {
        flops::in_category(Category::Feedback, || {
            let emb = self.p(self.tok_emb).gather_rows(predicted)?;
            let joined = Tensor::concat_cols(&[emb, h.clone()])?;
            self.linear(&joined, &self.feedback)
        })
    }

    /// Applies decoder layer `layer` (1-based) to the rows in `active`
    /// (all rows when `None`); other rows are copied through unchanged.
    pub fn decoder_step(
        &self,
        layer: usize,
        h: &Tensor,
        active: Option<&[usize]>,
        memory: &CrossMemory,
        dropout: &mut Dropout,
    ) -> Result<Tensor> {
        if layer == 0 || layer > self.layers() {
            return Err(Error::contract(format!("decoder layer {layer} outside [1, {}]", self.layers())));
        }
        let active = active.filter(|rows| rows.len() < h.rows());
        self.decoder_layer(layer - 1, h, active, memory, None, dropout)
    }

    /// All-position forward through every layer; returns `h¹ … hᴸ`.
    pub fn decode_full(&self, enc: &EncoderStates, t: usize, dropout: &mut Dropout) -> Result<Vec<Tensor>> {
        let memory = self.cross_memory(enc)?;
        let mut h = dropout.apply(self.nar_inputs(t)?, self.config.dropout)?;
        let mut states = Vec::with_capacity(self.layers());
        for i in 0..self.layers() {
            h = self.decoder_layer(i, &h, None, &memory, None, dropout)?;
            states.push(h.clone());
        }
        Ok(states)
    }

    /// Plain non-autoregressive logits from the last layer's off-ramp.
    pub fn nar_logits(&self, enc: &EncoderStates, t: usize, dropout: &mut Dropout) -> Result<Tensor> {
        let states = self.decode_full(enc, t, dropout)?;
        self.off_ramp_logits(states.last().expect("at least one layer"), self.layers())
    }

    /// Decoder forward where position `t` stops at layer `exits[t]`; its
    /// state is then copied unchanged to every upper layer, where it still
    /// serves as key/value for positions that continue.
    pub fn decode_with_exits(
        &self,
        enc: &EncoderStates,
        exits: &ExitAssignment,
        dropout: &mut Dropout,
    ) -> Result<DecoderTrace> {
        let t = exits.len();
        let l = self.layers();
        ExitAssignment::new(exits.exits().to_vec(), l)?;
        let memory = self.cross_memory(enc)?;
        let input = dropout.apply(self.nar_inputs(t)?, self.config.dropout)?;

        let mut h = input.clone();
        let mut layers = Vec::with_capacity(l);
        let mut attention_inputs = Vec::with_capacity(l);
        let mut copied = Vec::with_capacity(l);
        for layer in 1..=l {
            let active: Vec<usize> = (0..t).filter(|&p| exits.exits()[p] >= layer).collect();
            copied.push((0..t).map(|p| exits.exits()[p] < layer).collect());
            attention_inputs.push(h.clone());
            if !active.is_empty() {
                let subset = (active.len() < t).then_some(active.as_slice());
                h = self.decoder_layer(layer - 1, &h, subset, &memory, None, dropout)?;
            }
            layers.push(h.clone());
        }

        // hᴸ_t == h^{l_t}_t after copy-through, so each ramp reads the top rows
        let top = layers.last().expect("at least one layer");
        let mut groups = Vec::new();
        let mut order = Vec::with_capacity(t);
        for layer in 1..=l {
            let rows: Vec<usize> = (0..t).filter(|&p| exits.exits()[p] == layer).collect();
            if rows.is_empty() {
                continue;
            }
            groups.push(self.off_ramp_logits(&top.gather_rows(&rows)?, layer)?);
            order.extend(rows);
        }
        let stacked = if groups.len() == 1 { groups.pop().expect("one group") } else { Tensor::concat_rows(&groups)? };
        let mut inverse = vec![0; t];
        for (j, &p) in order.iter().enumerate() {
            inverse[p] = j;
        }
        let exit_logits = if order.iter().enumerate().all(|(j, &p)| j == p) {
            stacked
        } else {
            stacked.gather_rows(&inverse)?
        };

        Ok(DecoderTrace {
            input,
            layers,
            attention_inputs,
            exit_logits,
            copied,
        })
    }

    /// Soft-exit forward: after each layer below the top, the off-ramp's
    /// argmax token is embedded, concatenated with the state and projected
    /// back to width `d` before entering the next layer.
    pub fn soft_forward(&self, enc: &EncoderStates, t: usize, dropout: &mut Dropout) -> Result<SoftTrace> {
        let memory = self.cross_memory(enc)?;
        let mut h = dropout.apply(self.nar_inputs(t)?, self.config.dropout)?;
        let l = self.layers();
        let mut logits = Vec::with_capacity(l);
        let mut predictions = Vec::with_capacity(l);
        for layer in 1..=l {
            h = self.decoder_layer(layer - 1, &h, None, &memory, None, dropout)?;
            let lg = self.off_ramp_logits(&h, layer)?;
            let pred = lg.argmax_rows();
            if layer < l {
                h = self.feedback(&h, &pred)?;
            }
            logits.push(lg);
            predictions.push(pred);
        }
        Ok(SoftTrace { logits, predictions })
    }

    /// Left-to-right greedy decode with causal self-attention that re-runs
    /// the whole decoder prefix at every step (no key/value cache) and
    /// classifies only the newest position with the top off-ramp.
    pub fn decode_ar_reference(&self, enc: &EncoderStates, t: usize, stop_at_eos: bool) -> Result<ArOutput> {
        self.check_len(t)?;
        no_grad(|| {
            let (result, counts) = flops::measure(|| -> Result<(Vec<TokenId>, usize)> {
                let memory = self.cross_memory(enc)?;
                let mut dropout = Dropout::eval();
                let mut prefix: Vec<usize> = vec![BOS as usize];
                let mut out = Vec::with_capacity(t);
                let mut passes = 0;
                for step in 1..=t {
                    let mut h = self.embed(&prefix)?;
                    let mask = causal_mask(step);
                    for i in 0..self.layers() {
                        h = self.decoder_layer(i, &h, None, &memory, Some(&mask), &mut dropout)?;
                    }
                    passes += 1;
                    let last = h.gather_rows(&[step - 1])?;
                    let next = self.off_ramp_logits(&last, self.layers())?.argmax_rows()[0];
                    out.push(next as TokenId);
                    if stop_at_eos && next as TokenId == EOS {
                        break;
                    }
                    prefix.push(next);
                }
                Ok((out, passes))
            });
            let (ids, passes) = result?;
            Ok(ArOutput { ids, passes, flops: counts })
        })
    }
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = -1e9;
        }
    }
    Tensor::new(m, &[n, n]).expect("square mask")
}
