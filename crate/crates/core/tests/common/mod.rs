#![allow(dead_code)]

use logpeft::peft::{attach_adapter_head, inject_lora, LoraConfig};
use logpeft::rng::SeedSplitter;
use logpeft::sequencer::LogWindow;
use logpeft::transformer::{TransformerConfig, TransformerModel};
use rand::Rng;

pub fn config(vocab: usize, d: usize, h: usize, layers: usize, t: usize) -> TransformerConfig {
    TransformerConfig::for_templates(vocab - 1, d, h, layers, t)
}

pub fn backbone(cfg: TransformerConfig, seed: u64) -> TransformerModel {
    TransformerModel::new(cfg, &mut SeedSplitter::new(seed).stream("init")).unwrap()
}

pub fn lora(model: &TransformerModel, cfg: &LoraConfig, seed: u64) -> TransformerModel {
    inject_lora(model, cfg, &mut SeedSplitter::new(seed).stream("lora")).unwrap()
}

pub fn adapter(model: &TransformerModel, seed: u64) -> TransformerModel {
    attach_adapter_head(model, &mut SeedSplitter::new(seed).stream("adapter")).unwrap()
}

/// Random ids below the pad id with a non-empty pad suffix mask.
pub fn random_input<R: Rng>(rng: &mut R, cfg: &TransformerConfig) -> (Vec<usize>, Vec<bool>) {
    let t = cfg.max_seq_len;
    let real = rng.random_range(1..=t);
    let ids = (0..t)
        .map(|i| {
            if i < real {
                rng.random_range(0..cfg.pad_id)
            } else {
                cfg.pad_id
            }
        })
        .collect();
    let mask = (0..t).map(|i| i < real).collect();
    (ids, mask)
}

/// Windows whose label is decided by whether key 0 appears.
pub fn separable_windows<R: Rng>(rng: &mut R, n: usize, len: usize, vocab: usize) -> Vec<LogWindow> {
    (0..n)
        .map(|i| {
            let anomalous = i % 2 == 1;
            let keys = (0..len)
                .map(|_| if anomalous { 0 } else { rng.random_range(1..vocab) })
                .collect();
            LogWindow::new(keys, u8::from(anomalous), (0, i))
        })
        .collect()
}
