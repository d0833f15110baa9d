//! Weighted cross-entropy training of the trainable parameters with AdamW.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::params::{ParamId, ParamStore};
use crate::rng::SeedSplitter;
use crate::sequencer::LogWindow;
use crate::transformer::TransformerModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Low-rank adapters on attention projections plus the two-class head.
    Lora,
    /// Adapter head over the frozen backbone.
    Adapter,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "lora",
            Method::Adapter => "adapter",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(Method::Lora),
            "adapter" => Ok(Method::Adapter),
            other => Err(Error::Argument(format!(
                "unknown method `{other}` (expected lora or adapter)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// `None` derives inverse-frequency weights `N / (2·N_c)` from the training set.
    pub class_weights: Option<[f64; 2]>,
    pub adamw: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Lora,
            epochs: 3,
            batch_size: 2,
            lr: 5e-5,
            class_weights: None,
            adamw: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_metrics: MetricsReport,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub class_weights: [f64; 2],
    pub steps: usize,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_loss\taccuracy\tprecision\trecall\tf1\tf1_weighted\n");
        for e in &self.epochs {
            let m = &e.val_metrics;
            out.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                e.epoch, e.train_loss, e.val_loss, m.accuracy, m.precision, m.recall, m.f1, m.f1_w
            ));
        }
        out
    }
}

/// Softmax over two logits.
pub fn class_probabilities(logits: [f64; 2]) -> [f64; 2] {
    let max = logits[0].max(logits[1]);
    let e = [(logits[0] - max).exp(), (logits[1] - max).exp()];
    let total = e[0] + e[1];
    [e[0] / total, e[1] / total]
}

/// `−(1/N)·Σᵢ w[yᵢ]·log P(yᵢ)` over an `N × 2` logit matrix.
pub fn wce_loss(tape: &mut Tape, logits: Var, labels: &[u8], weights: [f64; 2]) -> Result<Var> {
    let targets: Vec<usize> = labels.iter().map(|&l| usize::from(l != 0)).collect();
    tape.cross_entropy(logits, &targets, &weights)
}

/// Inverse-frequency weights `N / (2·N_c)`; a class that never occurs gets weight 1.
pub fn inverse_frequency_weights(windows: &[LogWindow]) -> [f64; 2] {
    let n = windows.len() as f64;
    let positives = windows.iter().filter(|w| w.label == 1).count() as f64;
    let w = |count: f64| if count == 0.0 { 1.0 } else { n / (2.0 * count) };
    [w(n - positives), w(positives)]
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update at step `t ≥ 1`:
/// `θ ← θ − η·m̂/(√v̂ + eps) − η·λ·θ` with bias-corrected moments.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut Moments,
    lr: f64,
    cfg: &AdamWConfig,
    t: u64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::ShapeMismatch {
            op: "adamw_step",
            detail: format!("param {}, grad {}, state {}", param.len(), grad.len(), state.m.len()),
        });
    }
    assert!(t >= 1, "AdamW steps are numbered from 1");
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let theta = param[i];
        param[i] = theta - lr * (m_hat / (v_hat.sqrt() + cfg.eps)) - lr * cfg.weight_decay * theta;
    }
    Ok(())
}

/// AdamW over the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    lr: f64,
    t: u64,
    state: Vec<(ParamId, Moments)>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, cfg: AdamWConfig) -> Self {
        let state = store
            .trainable_ids()
            .into_iter()
            .map(|id| (id, Moments::zeros(store.value(id).len())))
            .collect();
        Self { cfg, lr, t: 0, state }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update; `grads` must hold one entry per trainable parameter in store order.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, crate::autodiff::Tensor)]) -> Result<()> {
        self.t += 1;
        for ((id, moments), (gid, grad)) in self.state.iter_mut().zip(grads) {
            if id != gid {
                return Err(Error::Argument(format!(
                    "gradient for {gid:?} where {id:?} was expected"
                )));
            }
            let param = store.get_mut(*id);
            if !param.trainable {
                return Err(Error::Argument(format!(
                    "refusing to update frozen parameter {}",
                    param.name
                )));
            }
            adamw_step(param.value.data_mut(), grad.data(), moments, self.lr, &self.cfg, self.t)?;
        }
        Ok(())
    }
}

/// Loss and metrics of a model over a labeled set.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    pub predictions: Vec<u8>,
}

/// Inference-mode pass; predictions are the argmax of the two logits
/// (ties go to the normal class).
pub fn evaluate(model: &TransformerModel, windows: &[LogWindow], weights: [f64; 2]) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut confusion = ConfusionMatrix::default();
    let mut predictions = Vec::with_capacity(windows.len());
    let mut loss = 0.0;
    for w in windows {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, false);
        let logits = model.window_logits(&mut tape, &bound, &w.key_ids, &w.mask_bools(), None)?;
        let z = tape.value(logits).data();
        let pred = u8::from(z[1] > z[0]);
        let l = wce_loss(&mut tape, logits, &[w.label], weights)?;
        loss += tape.value(l).data()[0];
        confusion.record(pred, w.label);
        predictions.push(pred);
    }
    Ok(Evaluation {
        loss: loss / windows.len() as f64,
        confusion,
        report: MetricsReport::from_confusion(&confusion),
        predictions,
    })
}

fn check_method(model: &TransformerModel, method: Method) -> Result<()> {
    let ok = match method {
        Method::Lora => model.lora_config().is_some() && model.adapter_head().is_none(),
        Method::Adapter => model.adapter_head().is_some(),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Argument(format!("model is not prepared for {method} training")))
    }
}

/// Mini-batch training. Batches follow a seeded shuffle each epoch, the
/// last partial batch is kept, and only parameters flagged trainable are
/// ever written.
pub fn train(
    mut model: TransformerModel,
    train_set: &[LogWindow],
    val_set: &[LogWindow],
    cfg: &TrainConfig,
) -> Result<(TransformerModel, TrainHistory)> {
    check_method(&model, cfg.method)?;
    if model.params().trainable_ids().is_empty() {
        return Err(Error::NoTrainableParams);
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be positive".into()));
    }
    let weights = cfg
        .class_weights
        .unwrap_or_else(|| inverse_frequency_weights(train_set));
    if weights.iter().any(|w| w.is_nan() || *w <= 0.0) {
        return Err(Error::Argument(format!(
            "class weights must be positive, got {weights:?}"
        )));
    }
    let streams = SeedSplitter::new(cfg.seed);
    let mut shuffle_rng = streams.stream("shuffle");
    let mut dropout_rng = streams.stream("dropout");
    let mut optimizer = AdamW::new(model.params(), cfg.lr, cfg.adamw);
    let mut history = TrainHistory {
        class_weights: weights,
        ..Default::default()
    };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, true);
            let mut rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let w = &train_set[i];
                rows.push(model.window_logits(
                    &mut tape,
                    &bound,
                    &w.key_ids,
                    &w.mask_bools(),
                    Some(&mut dropout_rng),
                )?);
                labels.push(w.label);
            }
            let logits = tape.concat_rows(&rows)?;
            let loss = wce_loss(&mut tape, logits, &labels, weights)?;
            total += tape.value(loss).data()[0] * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads = bound.collect_grads(model.params(), &mut grads);
            optimizer.step(model.params_mut(), &grads)?;
        }
        let val = evaluate(&model, val_set, weights)?;
        history.epochs.push(EpochStats {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss: val.loss,
            val_metrics: val.report,
        });
    }
    history.steps = optimizer.steps() as usize;
    Ok((model, history))
}
