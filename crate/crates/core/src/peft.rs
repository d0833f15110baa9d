//! Parameter-efficient adaptation of a frozen backbone.
//!
//! Two mechanisms are provided:
//!
//! * low-rank adapters on attention projections: a frozen `W` (`d_in × d_out`)
//!   gains trainable factors `A` (`r × d_in`) and `B` (`d_out × r`), and the
//!   projection computes `x·W + s·(x·Aᵀ)·Bᵀ`, i.e. `x·(W + s·(B·A)ᵀ)`.
//!   `B` starts at zero so injection leaves the model unchanged;
//! * an adapter head: two square ReLU layers and a two-class layer stacked
//!   on the mean-pooled output of the untouched backbone.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{BoundParams, ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::transformer::{Projection, TransformerModel, INIT_STD};

/// How the low-rank product is scaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LoraScaling {
    /// `W + α·B·A`.
    #[default]
    Alpha,
    /// `W + (α/r)·B·A`.
    AlphaOverRank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub init_std: f64,
    pub targets: Vec<Projection>,
    /// 1-based layer numbers; `None` targets every layer.
    pub layers: Option<Vec<usize>>,
    pub scaling: LoraScaling,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            alpha: 16.0,
            dropout: 0.05,
            init_std: 0.02,
            targets: vec![Projection::Key],
            layers: None,
            scaling: LoraScaling::Alpha,
        }
    }
}

impl LoraConfig {
    pub fn effective_scale(&self) -> f64 {
        match self.scaling {
            LoraScaling::Alpha => self.alpha,
            LoraScaling::AlphaOverRank => self.alpha / self.rank as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Argument("LoRA rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Argument(format!(
                "LoRA dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.init_std.is_nan() || self.init_std <= 0.0 {
            return Err(Error::Argument("LoRA init std must be positive".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Argument("at least one LoRA target module is required".into()));
        }
        Ok(())
    }
}

/// Parses a comma-separated target list such as `q_proj,k_proj`.
pub fn parse_targets(list: &str) -> Result<Vec<Projection>> {
    let mut targets: Vec<Projection> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    targets.sort();
    targets.dedup();
    if targets.is_empty() {
        return Err(Error::Argument("empty LoRA target list".into()));
    }
    Ok(targets)
}

pub fn format_targets(targets: &[Projection]) -> String {
    targets.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
}

/// Handles of one adapter inside a model's parameter store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub base: ParamId,
}

/// Freshly initialized low-rank factors.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `r × d_in`, entries ~ N(0, σ²).
    pub a: Tensor,
    /// `d_out × r`, all zeros.
    pub b: Tensor,
}

pub fn lora_init(d_in: usize, d_out: usize, config: &LoraConfig, rng: &mut StreamRng) -> Result<LoraFactors> {
    if d_in == 0 || d_out == 0 {
        return Err(Error::Argument("LoRA dimensions must be positive".into()));
    }
    if config.rank > d_in.min(d_out) {
        return Err(Error::Argument(format!(
            "LoRA rank {} exceeds min({d_in}, {d_out})",
            config.rank
        )));
    }
    Ok(LoraFactors {
        a: Tensor::randn(vec![config.rank, d_in], config.init_std, rng),
        b: Tensor::zeros(vec![d_out, config.rank]),
    })
}

/// `x·W + scale·(dropout(x)·Aᵀ)·Bᵀ`. Dropout runs only when an RNG is supplied.
#[allow(clippy::too_many_arguments)]
pub fn lora_forward(
    tape: &mut Tape,
    x: Var,
    base: Var,
    a: Var,
    b: Var,
    scale: f64,
    dropout: f64,
    dropout_rng: Option<&mut StreamRng>,
) -> Result<Var> {
    let (d_in, d_out) = (tape.value(base).rows(), tape.value(base).cols());
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.cols() != d_in || tb.rows() != d_out || ta.rows() != tb.cols() {
        return Err(shape_err(
            "lora_forward",
            format!(
                "W {:?}, A {:?}, B {:?}",
                tape.value(base).shape(),
                ta.shape(),
                tb.shape()
            ),
        ));
    }
    let base_out = tape.matmul(x, base)?;
    let low_in = match dropout_rng {
        Some(rng) if dropout > 0.0 => {
            let shape = tape.value(x).shape().to_vec();
            let keep = 1.0 / (1.0 - dropout);
            let mut mask = Tensor::zeros(shape);
            for m in mask.data_mut() {
                if rng.random::<f64>() >= dropout {
                    *m = keep;
                }
            }
            let mask = tape.constant(mask);
            tape.mul(x, mask)?
        }
        _ => x,
    };
    let at = tape.transpose(a)?;
    let bt = tape.transpose(b)?;
    let down = tape.matmul(low_in, at)?;
    let up = tape.matmul(down, bt)?;
    let up = tape.scale(up, scale);
    tape.add(base_out, up)
}

/// Freezes the backbone and wraps every targeted per-head projection of
/// every targeted layer with a fresh adapter. The two-class head stays trainable.
pub fn inject_lora(model: &TransformerModel, config: &LoraConfig, rng: &mut StreamRng) -> Result<TransformerModel> {
    config.validate()?;
    if model.lora.is_some() || model.adapter.is_some() {
        return Err(Error::Argument("model already carries adapters".into()));
    }
    let n_layers = model.layers.len();
    let layers: Vec<usize> = match &config.layers {
        Some(ls) => {
            if let Some(bad) = ls.iter().find(|&&l| l == 0 || l > n_layers) {
                return Err(Error::Argument(format!("target layer {bad} outside 1..={n_layers}")));
            }
            ls.iter().map(|l| l - 1).collect()
        }
        None => (0..n_layers).collect(),
    };
    let mut out = model.clone();
    for id in model.params.ids() {
        if id != model.cls_weight && id != model.cls_bias {
            out.params.get_mut(id).trainable = false;
        }
    }
    let d_in = model.config().d_model;
    let d_out = model.config().head_dim();
    for l in 0..n_layers {
        if !layers.contains(&l) {
            continue;
        }
        for h in 0..out.layers[l].heads.len() {
            for &target in &config.targets {
                let base = out.layers[l].heads[h].weight(target);
                let factors = lora_init(d_in, d_out, config, rng)?;
                let stem = out.params.get(base).name.trim_end_matches(".weight").to_string();
                let a = out.params.add(format!("{stem}.lora_a"), factors.a, true);
                let b = out.params.add(format!("{stem}.lora_b"), factors.b, true);
                out.layers[l].heads[h].set_adapter(target, Some(LoraAdapter { a, b, base }));
            }
        }
    }
    out.lora = Some(config.clone());
    Ok(out)
}

/// Folds every adapter into its base weight (`W + s·(B·A)ᵀ`) and drops the factors.
pub fn merge_lora(model: &TransformerModel) -> TransformerModel {
    let Some(cfg) = &model.lora else {
        return model.clone();
    };
    let scale = cfg.effective_scale();
    let mut merged = model.clone();
    let mut dropped = Vec::new();
    for (_, _, _, adapter) in model.lora_adapters() {
        let a = model.params.value(adapter.a);
        let b = model.params.value(adapter.b);
        let delta = a
            .transpose()
            .matmul(&b.transpose())
            .expect("adapter factors match their base")
            .scaled(scale);
        let base = merged.params.get_mut(adapter.base);
        base.value = base.value.add(&delta).expect("delta matches base shape");
        dropped.extend([adapter.a, adapter.b]);
    }
    for layer in &mut merged.layers {
        for head in &mut layer.heads {
            for p in Projection::ALL {
                head.set_adapter(p, None);
            }
        }
    }
    merged.lora = None;
    merged.drop_params(&dropped);
    merged
}

/// Trainable MLP head over the pooled output of a frozen backbone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdapterHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w_cls: ParamId,
    pub b_cls: ParamId,
}

impl AdapterHead {
    pub fn ids(&self) -> [ParamId; 6] {
        [self.w1, self.b1, self.w2, self.b2, self.w_cls, self.b_cls]
    }

    fn register(params: &mut ParamStore, d: usize, rng: &mut StreamRng) -> Self {
        let mut w = |params: &mut ParamStore, name: &str, rows: usize| {
            params.add(name, Tensor::randn(vec![rows, d], INIT_STD, rng), true)
        };
        let w1 = w(params, "adapter.w1", d);
        let w2 = w(params, "adapter.w2", d);
        let w_cls = w(params, "adapter.cls.weight", 2);
        Self {
            w1,
            b1: params.add("adapter.b1", Tensor::zeros(vec![d]), true),
            w2,
            b2: params.add("adapter.b2", Tensor::zeros(vec![d]), true),
            w_cls,
            b_cls: params.add("adapter.cls.bias", Tensor::zeros(vec![2]), true),
        }
    }

    /// `z¹ = ReLU(W₁s + b₁)`, `z² = ReLU(W₂z¹ + b₂)`, logits `= W_cls z² + b_cls` (shape `1 × 2`).
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, pooled: Var) -> Result<Var> {
        let d = tape.value(bound.var(self.w1)).cols();
        if tape.value(pooled).len() != d {
            return Err(shape_err(
                "adapter_head",
                format!("pooled {:?} for hidden width {d}", tape.value(pooled).shape()),
            ));
        }
        let mut z = tape.reshape(pooled, vec![1, d])?;
        for (w, b, relu) in [
            (self.w1, self.b1, true),
            (self.w2, self.b2, true),
            (self.w_cls, self.b_cls, false),
        ] {
            let wt = tape.transpose(bound.var(w))?;
            z = tape.matmul(z, wt)?;
            z = tape.add_row(z, bound.var(b))?;
            if relu {
                z = tape.relu(z);
            }
        }
        Ok(z)
    }
}

/// Freezes the whole backbone, including its own two-class head, and stacks
/// a trainable adapter head of width `d_model` on top.
pub fn attach_adapter_head(model: &TransformerModel, rng: &mut StreamRng) -> Result<TransformerModel> {
    if model.lora.is_some() || model.adapter.is_some() {
        return Err(Error::Argument("model already carries adapters".into()));
    }
    let mut out = model.clone();
    let ids: Vec<ParamId> = out.params.ids().collect();
    for id in ids {
        out.params.get_mut(id).trainable = false;
    }
    let d = out.config().d_model;
    out.adapter = Some(AdapterHead::register(&mut out.params, d, rng));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentCount {
    pub component: &'static str,
    pub trainable: usize,
    pub frozen: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterReport {
    pub trainable: usize,
    pub frozen: usize,
    pub adapters: usize,
    pub components: Vec<ComponentCount>,
}

impl ParameterReport {
    pub fn total(&self) -> usize {
        self.trainable + self.frozen
    }

    pub fn trainable_ratio(&self) -> f64 {
        self.trainable as f64 / self.total() as f64
    }
}

pub fn trainable_parameter_report(model: &TransformerModel) -> ParameterReport {
    let lora_ids: Vec<ParamId> = model.lora_adapters().flat_map(|(_, _, _, a)| [a.a, a.b]).collect();
    let head_ids: Vec<ParamId> = model.adapter.iter().flat_map(|h| h.ids()).collect();
    let classifier = [model.cls_weight, model.cls_bias];
    let mut components = ["backbone", "classifier", "lora", "adapter_head"].map(|component| ComponentCount {
        component,
        trainable: 0,
        frozen: 0,
    });
    for (id, p) in model.params.iter() {
        let slot = if classifier.contains(&id) {
            1
        } else if lora_ids.contains(&id) {
            2
        } else if head_ids.contains(&id) {
            3
        } else {
            0
        };
        if p.trainable {
            components[slot].trainable += p.value.len();
        } else {
            components[slot].frozen += p.value.len();
        }
    }
    let (trainable, frozen) = model.params.counts();
    ParameterReport {
        trainable,
        frozen,
        adapters: lora_ids.len() / 2,
        components: components.to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedSplitter;
    use crate::transformer::TransformerConfig;

    fn rng(name: &str) -> StreamRng {
        SeedSplitter::new(11).stream(name)
    }

    fn model(d: usize, heads: usize, layers: usize) -> TransformerModel {
        let cfg = TransformerConfig {
            vocab_size: 12,
            d_model: d,
            n_heads: heads,
            n_layers: layers,
            max_seq_len: 8,
            ffn_dim: 4 * d,
            pad_id: 11,
        };
        TransformerModel::new(cfg, &mut rng("init")).unwrap()
    }

    #[test]
    fn init_has_zero_b_and_seeded_a() {
        let cfg = LoraConfig::default();
        let f = lora_init(16, 4, &cfg, &mut rng("a")).unwrap();
        assert_eq!(f.b.max_abs(), 0.0);
        assert_eq!(f.a.shape(), &[2, 16]);
        assert_eq!(f.b.shape(), &[4, 2]);
        assert_eq!(f, lora_init(16, 4, &cfg, &mut rng("a")).unwrap());
        assert!(lora_init(16, 1, &cfg, &mut rng("a")).is_err());
    }

    #[test]
    fn init_spread_matches_sigma() {
        let cfg = LoraConfig {
            rank: 4,
            ..Default::default()
        };
        let f = lora_init(4096, 8, &cfg, &mut rng("spread")).unwrap();
        let n = f.a.len() as f64;
        let mean = f.a.data().iter().sum::<f64>() / n;
        let var = f.a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() / cfg.init_std - 1.0).abs() < 0.1);
    }

    #[test]
    fn forward_hand_example() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let w = tape.constant(Tensor::identity(2));
        let a = tape.constant(Tensor::from_rows(&[&[0.0, 1.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[&[1.0], &[0.0]]).unwrap());
        let y = lora_forward(&mut tape, x, w, a, b, 16.0, 0.0, None).unwrap();
        assert_eq!(tape.value(y).data(), &[33.0, 2.0]);

        let zb = tape.constant(Tensor::zeros(vec![2, 1]));
        let y0 = lora_forward(&mut tape, x, w, a, zb, 16.0, 0.05, None).unwrap();
        assert_eq!(tape.value(y0).data(), &[1.0, 2.0]);

        assert!(lora_forward(&mut tape, x, w, b, a, 16.0, 0.0, None).is_err());
    }

    #[test]
    fn dropout_only_in_training() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(vec![4, 6]));
        let w = tape.constant(Tensor::zeros(vec![6, 3]));
        let a = tape.constant(Tensor::ones(vec![2, 6]));
        let b = tape.constant(Tensor::ones(vec![3, 2]));
        let eval1 = lora_forward(&mut tape, x, w, a, b, 1.0, 0.5, None).unwrap();
        let eval2 = lora_forward(&mut tape, x, w, a, b, 1.0, 0.5, None).unwrap();
        assert_eq!(tape.value(eval1), tape.value(eval2));
        let mut r = rng("drop");
        let train = lora_forward(&mut tape, x, w, a, b, 1.0, 0.5, Some(&mut r)).unwrap();
        assert_ne!(tape.value(train), tape.value(eval1));
    }

    #[test]
    fn adapter_counts() {
        let m = model(8, 1, 3);
        let one = LoraConfig::default();
        let injected = inject_lora(&m, &one, &mut rng("lora")).unwrap();
        assert_eq!(trainable_parameter_report(&injected).adapters, 3);

        let all = LoraConfig {
            targets: Projection::ALL.to_vec(),
            ..Default::default()
        };
        let injected = inject_lora(&m, &all, &mut rng("lora")).unwrap();
        assert_eq!(trainable_parameter_report(&injected).adapters, 9);

        let m2 = model(8, 2, 3);
        let injected = inject_lora(&m2, &one, &mut rng("lora")).unwrap();
        assert_eq!(trainable_parameter_report(&injected).adapters, 6);

        let some_layers = LoraConfig {
            layers: Some(vec![2]),
            ..Default::default()
        };
        let injected = inject_lora(&m, &some_layers, &mut rng("lora")).unwrap();
        assert_eq!(trainable_parameter_report(&injected).adapters, 1);
        let bad_layer = LoraConfig {
            layers: Some(vec![4]),
            ..Default::default()
        };
        assert!(inject_lora(&m, &bad_layer, &mut rng("lora")).is_err());
    }

    #[test]
    fn target_parsing() {
        assert_eq!(
            parse_targets("v_proj,q_proj,q_proj").unwrap(),
            vec![Projection::Query, Projection::Value]
        );
        assert_eq!(
            parse_targets("x_proj").unwrap_err(),
            Error::UnknownTarget("x_proj".into())
        );
        assert_eq!(
            format_targets(&parse_targets("k_proj,q_proj").unwrap()),
            "q_proj,k_proj"
        );
    }

    #[test]
    fn injection_is_transparent_and_merge_exact_at_init() {
        let m = model(8, 2, 2);
        let cfg = LoraConfig {
            targets: Projection::ALL.to_vec(),
            ..Default::default()
        };
        let injected = inject_lora(&m, &cfg, &mut rng("lora")).unwrap();
        let ids = [1, 2, 3, 11];
        let mask = [true, true, true, false];
        assert_eq!(m.logits(&ids, &mask).unwrap(), injected.logits(&ids, &mask).unwrap());

        let merged = merge_lora(&injected);
        for (id, p) in merged.params().iter() {
            assert_eq!(&p.value, m.params().value(id), "{}", p.name);
        }
        assert_eq!(merge_lora(&merged), merged);
    }

    #[test]
    fn parameter_formulas() {
        // single head of width d_k = d
        let m = model(64, 1, 1);
        let injected = inject_lora(&m, &LoraConfig::default(), &mut rng("lora")).unwrap();
        let r = trainable_parameter_report(&injected);
        let lora = r.components.iter().find(|c| c.component == "lora").unwrap();
        assert_eq!(lora.trainable, 2 * (64 + 64));
        assert_eq!(r.frozen, trainable_parameter_report(&m).frozen);

        let d = 16;
        let m = model(d, 2, 2);
        let head = attach_adapter_head(&m, &mut rng("head")).unwrap();
        let r = trainable_parameter_report(&head);
        assert_eq!(r.trainable, 2 * (d * d + d) + 2 * d + 2);
        assert_eq!(r.total(), trainable_parameter_report(&m).total() + r.trainable);
    }

    #[test]
    fn adapter_head_examples() {
        let d = 3;
        let m = model(d, 1, 1);
        let mut head_model = attach_adapter_head(&m, &mut rng("head")).unwrap();
        let head = head_model.adapter_head().unwrap().clone();
        for id in head.ids() {
            let p = head_model.params_mut().get_mut(id);
            p.value = Tensor::zeros(p.value.shape().to_vec());
        }
        let mut tape = Tape::new();
        let bound = head_model.params().bind(&mut tape, false);
        let s = tape.constant(Tensor::vector(vec![0.5, 1.0, 2.0]).unwrap());
        let z = head.forward(&mut tape, &bound, s).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0, 0.0]);

        let params = head_model.params_mut();
        params.get_mut(head.w1).value = Tensor::identity(d);
        params.get_mut(head.w2).value = Tensor::identity(d);
        params.get_mut(head.w_cls).value = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 1.0]]).unwrap();
        params.get_mut(head.b_cls).value = Tensor::vector(vec![0.5, -0.5]).unwrap();
        let mut tape = Tape::new();
        let bound = head_model.params().bind(&mut tape, false);
        let s = tape.constant(Tensor::vector(vec![0.5, 1.0, 2.0]).unwrap());
        let z = head.forward(&mut tape, &bound, s).unwrap();
        assert_eq!(tape.value(z).data(), &[0.5 + 0.5 + 2.0 + 6.0, -0.5 - 0.5 + 2.0]);

        let bad = tape.constant(Tensor::vector(vec![1.0; 4]).unwrap());
        assert!(head.forward(&mut tape, &bound, bad).is_err());
    }

    #[test]
    fn cannot_stack_mechanisms() {
        let m = model(8, 2, 1);
        let lora = inject_lora(&m, &LoraConfig::default(), &mut rng("lora")).unwrap();
        assert!(attach_adapter_head(&lora, &mut rng("head")).is_err());
        assert!(inject_lora(&lora, &LoraConfig::default(), &mut rng("lora")).is_err());
    }
}
