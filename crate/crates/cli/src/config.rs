//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;

use logpeft::drain::DrainConfig;
use logpeft::peft::{format_targets, parse_targets, LoraConfig, LoraScaling};
use logpeft::sequencer::SynthSpec;
use logpeft::trainer::{AdamWConfig, Method, TrainConfig};
use logpeft::transformer::{Projection, TransformerConfig};

use crate::CliError;

/// Input layout accepted by `parse`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogFormat {
    /// First column is `-` for normal lines or an alert tag otherwise.
    Thunderbird,
    /// Unlabeled lines, all treated as normal.
    Plain,
}

trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(usize, u64, f64, Method);

impl ConfigValue for LogFormat {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "thunderbird" => Ok(LogFormat::Thunderbird),
            "plain" => Ok(LogFormat::Plain),
            other => Err(format!("unknown log format `{other}` (expected thunderbird or plain)")),
        }
    }
    fn format_value(&self) -> String {
        match self {
            LogFormat::Thunderbird => "thunderbird".into(),
            LogFormat::Plain => "plain".into(),
        }
    }
}

impl ConfigValue for LoraScaling {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "alpha" => Ok(LoraScaling::Alpha),
            "alpha_over_rank" => Ok(LoraScaling::AlphaOverRank),
            other => Err(format!(
                "unknown LoRA scaling `{other}` (expected alpha or alpha_over_rank)"
            )),
        }
    }
    fn format_value(&self) -> String {
        match self {
            LoraScaling::Alpha => "alpha".into(),
            LoraScaling::AlphaOverRank => "alpha_over_rank".into(),
        }
    }
}

impl ConfigValue for Vec<Projection> {
    fn parse_value(s: &str) -> Result<Self, String> {
        parse_targets(s).map_err(|e| e.to_string())
    }
    fn format_value(&self) -> String {
        format_targets(self)
    }
}

impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn format_value(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(None),
            _ => s.parse().map(Some).map_err(|e| format!("{e}")),
        }
    }
    fn format_value(&self) -> String {
        self.map(|v| v.to_string()).unwrap_or_else(|| "auto".into())
    }
}

impl ConfigValue for Option<Vec<usize>> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(None);
        }
        let layers: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>().map_err(|e| format!("{e}")))
            .collect::<Result<_, _>>()?;
        if layers.contains(&0) {
            return Err("layer numbers start at 1".into());
        }
        Ok(Some(layers))
    }
    fn format_value(&self) -> String {
        match self {
            None => "all".into(),
            Some(v) => v.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        }
    }
}

impl ConfigValue for Option<[f64; 2]> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(None);
        }
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [a, b] => Ok(Some([
                a.parse().map_err(|e| format!("{e}"))?,
                b.parse().map_err(|e| format!("{e}"))?,
            ])),
            _ => Err(format!("expected `auto` or two comma-separated weights, got `{s}`")),
        }
    }
    fn format_value(&self) -> String {
        match self {
            None => "auto".into(),
            Some([a, b]) => format!("{a},{b}"),
        }
    }
}

macro_rules! run_config {
    (
        settings { $($key:ident : $ty:ty = $default:expr,)* }
        paths { $($path:ident,)* }
    ) => {
        /// Every setting of every subcommand. Keys in files and in
        /// [`RunConfig::set`] are the field names.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $key: $ty,)*
            $(pub $path: Option<PathBuf>,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self {
                    $($key: $default,)*
                    $($path: None,)*
                }
            }
        }

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                let bad = |e: String| CliError::Usage(format!("invalid value for `{key}`: {e}"));
                match key {
                    $(stringify!($key) => self.$key = ConfigValue::parse_value(value).map_err(bad)?,)*
                    $(stringify!($path) => self.$path = ConfigValue::parse_value(value).map_err(bad)?,)*
                    _ => return Err(CliError::Usage(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order; paths come last
            /// and are left out when `with_paths` is false.
            pub fn entries(&self, with_paths: bool) -> Vec<(&'static str, String)> {
                let mut out = vec![$((stringify!($key), self.$key.format_value()),)*];
                if with_paths {
                    $(out.push((stringify!($path), self.$path.format_value()));)*
                }
                out
            }
        }
    };
}

run_config! {
    settings {
        depth: usize = 4,
        sim_threshold: f64 = 0.5,
        max_children: usize = 100,
        format: LogFormat = LogFormat::Thunderbird,
        window_size: usize = 64,
        stride: usize = 64,
        vocab: Option<usize> = None,
        synth_vocab: usize = 64,
        synth_rate: f64 = 0.1,
        synth_lines: usize = 200_000,
        normal_patterns: usize = 20,
        anomaly_patterns: usize = 5,
        min_segment: usize = SynthSpec::default().min_segment,
        max_segment: usize = SynthSpec::default().max_segment,
        rare_keys: usize = SynthSpec::default().rare_keys,
        rare_share: f64 = SynthSpec::default().rare_share,
        normal_pattern_min: usize = SynthSpec::default().normal_pattern_min,
        normal_pattern_max: usize = SynthSpec::default().normal_pattern_max,
        anomaly_pattern_len: usize = SynthSpec::default().anomaly_pattern_len,
        d_model: usize = 64,
        n_heads: usize = 4,
        n_layers: usize = 2,
        max_seq_len: usize = 128,
        method: Method = Method::Lora,
        targets: Vec<Projection> = vec![Projection::Key],
        rank: usize = 2,
        alpha: f64 = 16.0,
        lora_dropout: f64 = 0.05,
        lora_init_std: f64 = 0.02,
        lora_layers: Option<Vec<usize>> = None,
        lora_scaling: LoraScaling = LoraScaling::Alpha,
        lr: f64 = 5e-5,
        batch: usize = 2,
        epochs: usize = 3,
        beta1: f64 = 0.9,
        beta2: f64 = 0.999,
        adam_eps: f64 = 1e-8,
        weight_decay: f64 = 0.01,
        class_weights: Option<[f64; 2]> = None,
        train_frac: f64 = 0.8,
        val_frac: f64 = 0.1,
        seed: u64 = 0,
    }
    paths {
        logs,
        templates_out,
        keys_out,
        labels_out,
        keys,
        labels,
        templates,
        out,
        data,
        checkpoint,
        checkpoint_out,
        report_out,
        history_out,
        test_out,
    }
}

pub fn default_config() -> RunConfig {
    RunConfig::default()
}

impl RunConfig {
    /// Applies a `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self, with_paths: bool) -> String {
        let mut out = String::new();
        for (k, v) in self.entries(with_paths) {
            writeln!(out, "{k} = {v}").expect("write to string");
        }
        out
    }

    pub fn drain(&self) -> DrainConfig {
        DrainConfig {
            depth: self.depth,
            sim_threshold: self.sim_threshold,
            max_children: self.max_children,
        }
    }

    pub fn synth(&self) -> SynthSpec {
        SynthSpec {
            vocab: self.synth_vocab,
            normal_patterns: self.normal_patterns,
            anomaly_patterns: self.anomaly_patterns,
            anomaly_rate: self.synth_rate,
            lines: self.synth_lines,
            min_segment: self.min_segment,
            max_segment: self.max_segment,
            rare_keys: self.rare_keys,
            rare_share: self.rare_share,
            normal_pattern_min: self.normal_pattern_min,
            normal_pattern_max: self.normal_pattern_max,
            anomaly_pattern_len: self.anomaly_pattern_len,
        }
    }

    pub fn transformer(&self, template_count: usize) -> TransformerConfig {
        TransformerConfig::for_templates(
            template_count,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.max_seq_len,
        )
    }

    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            dropout: self.lora_dropout,
            init_std: self.lora_init_std,
            targets: self.targets.clone(),
            layers: self.lora_layers.clone(),
            scaling: self.lora_scaling,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            method: self.method,
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            class_weights: self.class_weights,
            adamw: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            seed: self.seed,
        }
    }
}
