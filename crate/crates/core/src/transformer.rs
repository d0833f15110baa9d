//! Small decoder-only transformer over log-key vocabularies.
//!
//! Input rows are token embeddings plus learned positional embeddings.
//! Each block is pre-norm: `H + Attn(LN(H))`, then `+ FFN(LN(·))` with a
//! ReLU feed-forward layer. Attention is causal and never attends to pad
//! positions. Each head owns its own `d × d_k` query/key/value matrices so
//! that low-rank adapters can be attached per head and projection.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::peft::{lora_forward, AdapterHead, LoraAdapter, LoraConfig};
use crate::rng::StreamRng;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    /// Includes the pad row.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub ffn_dim: usize,
    pub pad_id: usize,
}

impl TransformerConfig {
    /// Vocabulary of `template_count` keys plus a reserved pad id equal to `template_count`.
    pub fn for_templates(
        template_count: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            vocab_size: template_count + 1,
            d_model,
            n_heads,
            n_layers,
            max_seq_len,
            ffn_dim: 4 * d_model,
            pad_id: template_count,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.max_seq_len,
            self.ffn_dim,
        ];
        if positive.contains(&0) {
            return Err(Error::Argument(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Argument(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.pad_id >= self.vocab_size {
            return Err(Error::Argument(format!(
                "pad id {} outside vocabulary of {}",
                self.pad_id, self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Attention projection that can carry a low-rank adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "q_proj",
            Projection::Key => "k_proj",
            Projection::Value => "v_proj",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q_proj" => Ok(Projection::Query),
            "k_proj" => Ok(Projection::Key),
            "v_proj" => Ok(Projection::Value),
            other => Err(Error::UnknownTarget(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// Indexed by [`Projection`]: query, key, value weights of shape `d × d_k`.
    pub proj: [ParamId; 3],
    pub lora: [Option<LoraAdapter>; 3],
}

impl HeadParams {
    pub fn weight(&self, p: Projection) -> ParamId {
        self.proj[p.slot()]
    }

    pub fn adapter(&self, p: Projection) -> Option<&LoraAdapter> {
        self.lora[p.slot()].as_ref()
    }

    pub(crate) fn set_adapter(&mut self, p: Projection, adapter: Option<LoraAdapter>) {
        self.lora[p.slot()] = adapter;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub heads: Vec<HeadParams>,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: TransformerConfig,
    pub(crate) params: ParamStore,
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerParams>,
    pub cls_weight: ParamId,
    pub cls_bias: ParamId,
    pub(crate) lora: Option<LoraConfig>,
    pub(crate) adapter: Option<AdapterHead>,
}

impl TransformerModel {
    /// A randomly initialized backbone: weights and embeddings ~ N(0, 0.02²),
    /// biases 0, norm gains 1. Backbone parameters start frozen; the
    /// two-class head starts trainable.
    pub fn new(config: TransformerConfig, rng: &mut StreamRng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let dk = config.head_dim();
        let mut params = ParamStore::default();
        let mut randn = |params: &mut ParamStore, name: String, shape: Vec<usize>| {
            params.add(name, Tensor::randn(shape, INIT_STD, rng), false)
        };
        let token_embed = randn(&mut params, "embed.tokens".into(), vec![config.vocab_size, d]);
        let pos_embed = randn(&mut params, "embed.positions".into(), vec![config.max_seq_len, d]);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            let ln1_gain = params.add(format!("{p}.ln1.gain"), Tensor::ones(vec![d]), false);
            let ln1_bias = params.add(format!("{p}.ln1.bias"), Tensor::zeros(vec![d]), false);
            let heads = (0..config.n_heads)
                .map(|h| HeadParams {
                    proj: Projection::ALL
                        .map(|proj| randn(&mut params, format!("{p}.attn.head{h}.{proj}.weight"), vec![d, dk])),
                    lora: [None, None, None],
                })
                .collect();
            let out_weight = randn(&mut params, format!("{p}.attn.out.weight"), vec![d, d]);
            let out_bias = params.add(format!("{p}.attn.out.bias"), Tensor::zeros(vec![d]), false);
            let ln2_gain = params.add(format!("{p}.ln2.gain"), Tensor::ones(vec![d]), false);
            let ln2_bias = params.add(format!("{p}.ln2.bias"), Tensor::zeros(vec![d]), false);
            let ffn_w1 = randn(&mut params, format!("{p}.ffn.w1"), vec![d, config.ffn_dim]);
            let ffn_b1 = params.add(format!("{p}.ffn.b1"), Tensor::zeros(vec![config.ffn_dim]), false);
            let ffn_w2 = randn(&mut params, format!("{p}.ffn.w2"), vec![config.ffn_dim, d]);
            let ffn_b2 = params.add(format!("{p}.ffn.b2"), Tensor::zeros(vec![d]), false);
            layers.push(LayerParams {
                ln1_gain,
                ln1_bias,
                heads,
                out_weight,
                out_bias,
                ln2_gain,
                ln2_bias,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
            });
        }
        let cls_weight = params.add("classifier.weight", Tensor::randn(vec![2, d], INIT_STD, rng), true);
        let cls_bias = params.add("classifier.bias", Tensor::zeros(vec![2]), true);
        Ok(Self {
            config,
            params,
            token_embed,
            pos_embed,
            layers,
            cls_weight,
            cls_bias,
            lora: None,
            adapter: None,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn adapter_head(&self) -> Option<&AdapterHead> {
        self.adapter.as_ref()
    }

    /// Parameters belonging to the pretrained backbone (everything except
    /// LoRA factors and the adapter head).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        let mut extra: Vec<ParamId> = self
            .layers
            .iter()
            .flat_map(|l| &l.heads)
            .flat_map(|h| h.lora.iter().flatten())
            .flat_map(|a| [a.a, a.b])
            .collect();
        if let Some(head) = &self.adapter {
            extra.extend(head.ids());
        }
        self.params.ids().filter(|id| !extra.contains(id)).collect()
    }

    /// Removes parameters that no longer belong to any component.
    pub(crate) fn drop_params(&mut self, ids: &[ParamId]) {
        let map = self.params.remove(ids);
        let m = |id: &mut ParamId| *id = map[id.index()].expect("live parameter was removed");
        m(&mut self.token_embed);
        m(&mut self.pos_embed);
        m(&mut self.cls_weight);
        m(&mut self.cls_bias);
        for layer in &mut self.layers {
            for id in [
                &mut layer.ln1_gain,
                &mut layer.ln1_bias,
                &mut layer.out_weight,
                &mut layer.out_bias,
                &mut layer.ln2_gain,
                &mut layer.ln2_bias,
                &mut layer.ffn_w1,
                &mut layer.ffn_b1,
                &mut layer.ffn_w2,
                &mut layer.ffn_b2,
            ] {
                m(id);
            }
            for head in &mut layer.heads {
                head.proj.iter_mut().for_each(m);
                for adapter in head.lora.iter_mut().flatten() {
                    m(&mut adapter.a);
                    m(&mut adapter.b);
                    m(&mut adapter.base);
                }
            }
        }
        if let Some(head) = &mut self.adapter {
            for id in [
                &mut head.w1,
                &mut head.b1,
                &mut head.w2,
                &mut head.b2,
                &mut head.w_cls,
                &mut head.b_cls,
            ] {
                m(id);
            }
        }
    }

    pub fn lora_adapters(&self) -> impl Iterator<Item = (usize, usize, Projection, &LoraAdapter)> {
        self.layers.iter().enumerate().flat_map(|(l, layer)| {
            layer.heads.iter().enumerate().flat_map(move |(h, head)| {
                Projection::ALL
                    .into_iter()
                    .filter_map(move |p| head.adapter(p).map(|a| (l, h, p, a)))
            })
        })
    }

    /// Row `t` is `E[ids[t]] + P[t]`.
    pub fn encode_tokens(&self, tape: &mut Tape, bound: &BoundParams, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::IdOutOfRange {
                id: bad,
                vocab: self.config.vocab_size,
            });
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tokens = tape.gather_rows(bound.var(self.token_embed), ids)?;
        let pos = tape.gather_rows(bound.var(self.pos_embed), &positions)?;
        tape.add(tokens, pos)
    }

    fn project(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        head: &HeadParams,
        which: Projection,
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let base = bound.var(head.weight(which));
        match (head.adapter(which), &self.lora) {
            (Some(adapter), Some(cfg)) => {
                let a = bound.var(adapter.a);
                let b = bound.var(adapter.b);
                lora_forward(tape, x, base, a, b, cfg.effective_scale(), cfg.dropout, dropout_rng)
            }
            _ => tape.matmul(x, base),
        }
    }

    /// Multi-head attention of one layer over `x` (already normalized).
    /// Returns the output-projected `T × d` result.
    #[allow(clippy::too_many_arguments)]
    pub fn self_attention(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        layer: usize,
        x: Var,
        pad_mask: &[bool],
        causal: bool,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let lp = &self.layers[layer];
        let t = tape.value(x).rows();
        if tape.value(x).cols() != self.config.d_model || pad_mask.len() != t {
            return Err(shape_err(
                "self_attention",
                format!("input {:?} with mask of {}", tape.value(x).shape(), pad_mask.len()),
            ));
        }
        let allowed = attention_mask(pad_mask, causal);
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut outputs = Vec::with_capacity(lp.heads.len());
        for head in &lp.heads {
            let q = self.project(tape, bound, x, head, Projection::Query, dropout_rng.as_deref_mut())?;
            let k = self.project(tape, bound, x, head, Projection::Key, dropout_rng.as_deref_mut())?;
            let v = self.project(tape, bound, x, head, Projection::Value, dropout_rng.as_deref_mut())?;
            let probs = attention_probs(tape, q, k, scale, &allowed)?;
            outputs.push(tape.matmul(probs, v)?);
        }
        let concat = tape.concat_cols(&outputs)?;
        let projected = tape.matmul(concat, bound.var(lp.out_weight))?;
        tape.add_row(projected, bound.var(lp.out_bias))
    }

    pub fn decoder_block(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        layer: usize,
        h: Var,
        pad_mask: &[bool],
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let lp = &self.layers[layer];
        let n1 = tape.layer_norm(h, bound.var(lp.ln1_gain), bound.var(lp.ln1_bias), LAYER_NORM_EPS)?;
        let attn = self.self_attention(tape, bound, layer, n1, pad_mask, true, dropout_rng)?;
        let h = tape.add(h, attn)?;
        let n2 = tape.layer_norm(h, bound.var(lp.ln2_gain), bound.var(lp.ln2_bias), LAYER_NORM_EPS)?;
        let z = tape.matmul(n2, bound.var(lp.ffn_w1))?;
        let z = tape.add_row(z, bound.var(lp.ffn_b1))?;
        let z = tape.relu(z);
        let z = tape.matmul(z, bound.var(lp.ffn_w2))?;
        let z = tape.add_row(z, bound.var(lp.ffn_b2))?;
        tape.add(h, z)
    }

    /// Final-layer hidden states `T × d`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        ids: &[usize],
        mask: &[bool],
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        if ids.len() != mask.len() {
            return Err(Error::LengthMismatch(ids.len(), mask.len()));
        }
        let mut h = self.encode_tokens(tape, bound, ids)?;
        for layer in 0..self.layers.len() {
            h = self.decoder_block(tape, bound, layer, h, mask, dropout_rng.as_deref_mut())?;
        }
        Ok(h)
    }

    /// Masked mean pool followed by the two-class affine head; shape `1 × 2`.
    pub fn classify(&self, tape: &mut Tape, bound: &BoundParams, hidden: Var, mask: &[bool]) -> Result<Var> {
        let pooled = tape.masked_mean_pool(hidden, mask)?;
        let d = tape.value(pooled).len();
        let row = tape.reshape(pooled, vec![1, d])?;
        let wt = tape.transpose(bound.var(self.cls_weight))?;
        let logits = tape.matmul(row, wt)?;
        tape.add_row(logits, bound.var(self.cls_bias))
    }

    /// Logits for one window through whichever head the model carries.
    pub fn window_logits(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        ids: &[usize],
        mask: &[bool],
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let hidden = self.forward(tape, bound, ids, mask, dropout_rng)?;
        match &self.adapter {
            Some(head) => {
                let pooled = tape.masked_mean_pool(hidden, mask)?;
                head.forward(tape, bound, pooled)
            }
            None => self.classify(tape, bound, hidden, mask),
        }
    }

    /// Inference-mode hidden states.
    pub fn hidden_states(&self, ids: &[usize], mask: &[bool]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let h = self.forward(&mut tape, &bound, ids, mask, None)?;
        Ok(tape.value(h).clone())
    }

    /// Inference-mode logits.
    pub fn logits(&self, ids: &[usize], mask: &[bool]) -> Result<[f64; 2]> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let out = self.window_logits(&mut tape, &bound, ids, mask, None)?;
        let v = tape.value(out).data();
        Ok([v[0], v[1]])
    }
}

/// Flattened `T × T` table of which (query, key) pairs may attend.
pub fn attention_mask(pad_mask: &[bool], causal: bool) -> Vec<bool> {
    let t = pad_mask.len();
    let mut allowed = vec![false; t * t];
    for i in 0..t {
        for j in 0..t {
            allowed[i * t + j] = pad_mask[j] && (!causal || j <= i);
        }
    }
    allowed
}

/// `softmax(Q·Kᵀ · scale)` with disallowed pairs at −∞.
pub fn attention_probs(tape: &mut Tape, q: Var, k: Var, scale: f64, allowed: &[bool]) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, scale);
    tape.masked_softmax_rows(scores, Some(allowed))
}
