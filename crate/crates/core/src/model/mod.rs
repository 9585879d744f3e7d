//! Encoder plus non-autoregressive decoder with a classifier ("off-ramp")
//! after every decoder layer.
//!
//! Parameters live in a flat [`ParamStore`] so the optimizer and the
//! checkpoint writer can treat them uniformly; layer structs only hold
//! indices into it. When off-ramps are shared, every layer's ramp points at
//! the same entries.

mod forward;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub use forward::{ArOutput, CrossMemory, DecoderTrace, Dropout, EncoderStates, ExitAssignment, SoftTrace};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Layer count of both encoder and decoder.
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Maximum decoder length; also bounds the source length since the
    /// position table is shared by encoder and decoder.
    pub max_len: usize,
    pub vocab_size: usize,
    pub share_off_ramps: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 6,
            d_model: 768,
            heads: 12,
            d_ff: 3072,
            max_len: 64,
            vocab_size: 0,
            share_off_ramps: true,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be at least 1".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_len == 0 {
            return fail("max_len must be at least 1".into());
        }
        if self.vocab_size < crate::tokenizer::RESERVED.len() {
            return fail(format!("vocab_size {} below reserved block", self.vocab_size));
        }
        if self.d_ff == 0 {
            return fail("d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Flat key/value form used in checkpoint headers.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("layers".into(), self.layers.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_len".into(), self.max_len.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("share_off_ramps".into(), self.share_off_ramps.to_string()),
            // bit pattern keeps the round trip exact
            ("dropout".into(), format!("{:016x}", self.dropout.to_bits())),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<ModelConfig> {
        let get = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("missing key {key}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}")))
        };
        let dropout_bits = u64::from_str_radix(get("dropout")?, 16)
            .map_err(|_| Error::Config("bad value for dropout".into()))?;
        let cfg = ModelConfig {
            layers: num("layers")?,
            d_model: num("d_model")?,
            heads: num("heads")?,
            d_ff: num("d_ff")?,
            max_len: num("max_len")?,
            vocab_size: num("vocab_size")?,
            share_off_ramps: get("share_off_ramps")?
                .parse()
                .map_err(|_| Error::Config("bad value for share_off_ramps".into()))?,
            dropout: f64::from_bits(dropout_bits),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ParamId(usize);

/// Named trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    fn push(&mut self, name: String, tensor: Tensor) -> ParamId {
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub(crate) fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Linear {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Norm {
    pub(crate) gain: ParamId,
    pub(crate) bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Attention {
    pub(crate) query: Linear,
    pub(crate) key: Linear,
    pub(crate) value: Linear,
    pub(crate) output: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct EncoderLayer {
    pub(crate) attn_norm: Norm,
    pub(crate) attn: Attention,
    pub(crate) ff_norm: Norm,
    pub(crate) ff_in: Linear,
    pub(crate) ff_out: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DecoderLayer {
    pub(crate) self_norm: Norm,
    pub(crate) self_attn: Attention,
    pub(crate) cross_norm: Norm,
    pub(crate) cross_attn: Attention,
    pub(crate) ff_norm: Norm,
    pub(crate) ff_in: Linear,
    pub(crate) ff_out: Linear,
}

/// Per-layer token classifier: layer norm followed by a projection to the
/// vocabulary.
#[derive(Clone, Copy, Debug)]
pub(crate) struct OffRamp {
    pub(crate) norm: Norm,
    pub(crate) proj: Linear,
}

/// Full parameter set.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    pub(crate) tok_emb: ParamId,
    pub(crate) pos_emb: ParamId,
    pub(crate) encoder: Vec<EncoderLayer>,
    pub(crate) enc_norm: Norm,
    pub(crate) decoder: Vec<DecoderLayer>,
    pub(crate) ramps: Vec<OffRamp>,
    /// Soft-exit fusion `[Embed(ŷ); h] → h̃`, stored as `[2d × d]`.
    pub(crate) feedback: Linear,
}

struct Init {
    rng: ChaCha8Rng,
    store: ParamStore,
}

impl Init {
    fn normal(&mut self, name: String, shape: &[usize], std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(self.store.push(name, Tensor::param(data, shape)?))
    }

    fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        Ok(self.store.push(name, Tensor::param(vec![value; n], shape)?))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Result<Linear> {
        Ok(Linear {
            weight: self.normal(format!("{name}.weight"), &[fan_in, fan_out], std)?,
            bias: self.constant(format!("{name}.bias"), &[fan_out], 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.constant(format!("{name}.gain"), &[d], 1.0)?,
            bias: self.constant(format!("{name}.bias"), &[d], 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize, out_std: f64) -> Result<Attention> {
        let std = (1.0 / d as f64).sqrt();
        Ok(Attention {
            query: self.linear(&format!("{name}.query"), d, d, std)?,
            key: self.linear(&format!("{name}.key"), d, d, std)?,
            value: self.linear(&format!("{name}.value"), d, d, std)?,
            output: self.linear(&format!("{name}.output"), d, d, out_std)?,
        })
    }
}

impl Model {
    /// Random initialization, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let ModelConfig {
            layers: l,
            d_model: d,
            d_ff,
            ..
        } = config;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::default(),
        };
        let in_std = (1.0 / d as f64).sqrt();
        // residual branch outputs shrink with depth
        let out_std = in_std / (2.0 * l as f64).sqrt();
        let ff_out_std = (1.0 / d_ff as f64).sqrt() / (2.0 * l as f64).sqrt();

        let tok_emb = init.normal("embed.tokens".into(), &[config.vocab_size, d], 1.0)?;
        let pos_emb = init.normal("embed.positions".into(), &[config.max_len, d], 1.0)?;

        let mut encoder = Vec::with_capacity(l);
        for i in 0..l {
            let p = format!("encoder.{i}");
            encoder.push(EncoderLayer {
                attn_norm: init.norm(&format!("{p}.attn_norm"), d)?,
                attn: init.attention(&format!("{p}.attn"), d, out_std)?,
                ff_norm: init.norm(&format!("{p}.ff_norm"), d)?,
                ff_in: init.linear(&format!("{p}.ff_in"), d, d_ff, in_std)?,
                ff_out: init.linear(&format!("{p}.ff_out"), d_ff, d, ff_out_std)?,
            });
        }
        let enc_norm = init.norm("encoder.final_norm", d)?;

        let mut decoder = Vec::with_capacity(l);
        for i in 0..l {
            let p = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                self_norm: init.norm(&format!("{p}.self_norm"), d)?,
                self_attn: init.attention(&format!("{p}.self_attn"), d, out_std)?,
                cross_norm: init.norm(&format!("{p}.cross_norm"), d)?,
                cross_attn: init.attention(&format!("{p}.cross_attn"), d, out_std)?,
                ff_norm: init.norm(&format!("{p}.ff_norm"), d)?,
                ff_in: init.linear(&format!("{p}.ff_in"), d, d_ff, in_std)?,
                ff_out: init.linear(&format!("{p}.ff_out"), d_ff, d, ff_out_std)?,
            });
        }

        let mut ramps = Vec::with_capacity(l);
        if config.share_off_ramps {
            let ramp = OffRamp {
                norm: init.norm("off_ramp.norm", d)?,
                proj: init.linear("off_ramp.proj", d, config.vocab_size, in_std)?,
            };
            ramps.resize(l, ramp);
        } else {
            for i in 0..l {
                ramps.push(OffRamp {
                    norm: init.norm(&format!("off_ramp.{i}.norm"), d)?,
                    proj: init.linear(&format!("off_ramp.{i}.proj"), d, config.vocab_size, in_std)?,
                });
            }
        }

        // Feedback starts as (small noise on the embedding half, identity on
        // the hidden half) so the fused state initially passes h through.
        let emb_half = Normal::new(0.0, 0.1 * in_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut w = vec![0.0; 2 * d * d];
        for v in w.iter_mut().take(d * d) {
            *v = emb_half.sample(&mut init.rng);
        }
        for i in 0..d {
            w[(d + i) * d + i] = 1.0;
        }
        let feedback = Linear {
            weight: init.store.push("feedback.weight".into(), Tensor::param(w, &[2 * d, d])?),
            bias: init.constant("feedback.bias".into(), &[d], 0.0)?,
        };

        Ok(Model {
            config,
            params: init.store,
            tok_emb,
            pos_emb,
            encoder,
            enc_norm,
            decoder,
            ramps,
            feedback,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.params.tensors_mut()
    }

    pub(crate) fn p(&self, id: ParamId) -> &Tensor {
        self.params.get(id)
    }

    /// Replaces every parameter by the named tensor of the same shape.
    pub fn load_named(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                named.len()
            )));
        }
        let mut fresh = self.params.tensors.clone();
        for (name, tensor) in named {
            let i = self
                .params
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
            if fresh[i].shape() != tensor.shape() {
                return Err(Error::Dimension {
                    op: "load_named",
                    left: fresh[i].shape().to_vec(),
                    right: tensor.shape().to_vec(),
                });
            }
            fresh[i] = tensor.with_requires_grad(true);
        }
        self.params.tensors = fresh;
        Ok(())
    }

    /// True when every parameter of `self` equals `other` bit for bit.
    pub fn bitwise_eq(&self, other: &Model) -> bool {
        self.config == other.config
            && self.params.names == other.params.names
            && self
                .params
                .tensors
                .iter()
                .zip(&other.params.tensors)
                .all(|(a, b)| {
                    a.shape() == b.shape()
                        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }

    /// Whether layer `a` and layer `b` (1-based) use the same off-ramp tensors.
    pub fn off_ramps_shared(&self, a: usize, b: usize) -> bool {
        let (ra, rb) = (&self.ramps[a - 1], &self.ramps[b - 1]);
        self.p(ra.proj.weight).same_storage(self.p(rb.proj.weight))
    }
}
