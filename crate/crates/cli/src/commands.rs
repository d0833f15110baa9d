use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};

use logpeft::drain::{read_templates, write_templates, DrainTree};
use logpeft::peft::trainable_parameter_report;
use logpeft::rng::SeedSplitter;
use logpeft::sequencer::{
    build_windows, generate_synthetic, read_flags, read_keys, read_labeled_line, read_windows, render_log_line,
    split_dataset, write_windows, LogWindow, WindowFile,
};
use logpeft::trainer::{evaluate, inverse_frequency_weights, train, Evaluation};

use crate::checkpoint::{load_checkpoint, save_checkpoint, skeleton, Checkpoint};
use crate::config::{LogFormat, RunConfig};
use crate::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "logpeft",
    about = "Log anomaly detection with low-rank adapters on a toy transformer"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mine templates from raw logs and emit one key per line.
    Parse(ParseArgs),
    /// Cut a key stream into labeled windows.
    Windows(WindowsArgs),
    /// Generate a synthetic labeled log.
    Synth(SynthArgs),
    /// Fine-tune a classifier on a window file.
    Train(TrainArgs),
    /// Score a checkpoint on a window file.
    Eval(EvalArgs),
}

/// Flags shared by every subcommand.
#[derive(Args, Debug)]
struct Common {
    /// `key = value` settings file applied before the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ParseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    logs: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    sim_threshold: Option<String>,
    #[arg(long)]
    max_children: Option<String>,
    /// `thunderbird` (leading label column) or `plain`.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    templates_out: Option<String>,
    #[arg(long)]
    keys_out: Option<String>,
    #[arg(long)]
    labels_out: Option<String>,
}

#[derive(Args, Debug)]
struct WindowsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    keys: Option<String>,
    #[arg(long)]
    labels: Option<String>,
    /// Template file whose size fixes the vocabulary.
    #[arg(long)]
    templates: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    rate: Option<String>,
    #[arg(long)]
    lines: Option<String>,
    #[arg(long)]
    normal_patterns: Option<String>,
    #[arg(long)]
    anomaly_patterns: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// `lora` or `adapter`.
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated subset of q_proj, k_proj, v_proj.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    checkpoint_out: Option<String>,
    #[arg(long)]
    report_out: Option<String>,
    /// Per-epoch losses and validation metrics as TSV.
    #[arg(long)]
    history_out: Option<String>,
    /// Held-out test windows, for a later `eval`.
    #[arg(long)]
    test_out: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    report_out: Option<String>,
}

pub fn usage() -> String {
    Cli::command().render_help().to_string()
}

fn resolve(common: &Common, flags: &[(&str, &Option<String>)]) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Parse(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    ("logs", &a.logs),
                    ("depth", &a.depth),
                    ("sim_threshold", &a.sim_threshold),
                    ("max_children", &a.max_children),
                    ("format", &a.format),
                    ("templates_out", &a.templates_out),
                    ("keys_out", &a.keys_out),
                    ("labels_out", &a.labels_out),
                ],
            )?;
            parse(&cfg)
        }
        Command::Windows(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    ("keys", &a.keys),
                    ("labels", &a.labels),
                    ("templates", &a.templates),
                    ("vocab", &a.vocab),
                    ("window_size", &a.size),
                    ("stride", &a.stride),
                    ("out", &a.out),
                ],
            )?;
            windows(&cfg)
        }
        Command::Synth(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    ("synth_vocab", &a.vocab),
                    ("synth_rate", &a.rate),
                    ("synth_lines", &a.lines),
                    ("normal_patterns", &a.normal_patterns),
                    ("anomaly_patterns", &a.anomaly_patterns),
                    ("seed", &a.seed),
                    ("out", &a.out),
                ],
            )?;
            synth(&cfg)
        }
        Command::Train(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    ("method", &a.method),
                    ("targets", &a.targets),
                    ("rank", &a.rank),
                    ("alpha", &a.alpha),
                    ("lora_dropout", &a.dropout),
                    ("lr", &a.lr),
                    ("batch", &a.batch),
                    ("epochs", &a.epochs),
                    ("seed", &a.seed),
                    ("data", &a.data),
                    ("checkpoint_out", &a.checkpoint_out),
                    ("report_out", &a.report_out),
                    ("history_out", &a.history_out),
                    ("test_out", &a.test_out),
                ],
            )?;
            train_cmd(cfg)
        }
        Command::Eval(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    ("checkpoint", &a.checkpoint),
                    ("data", &a.data),
                    ("report_out", &a.report_out),
                ],
            )?;
            eval_cmd(&cfg)
        }
    }
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| {
        CliError::Usage(format!(
            "missing required setting `{key}` (flag --{})",
            key.replace('_', "-")
        ))
    })
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(|f| BufReader::with_capacity(1 << 16, f))
        .map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(|f| BufWriter::with_capacity(1 << 16, f))
        .map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Writes `<output>.conf` and echoes it to standard error.
fn record_config(cfg: &RunConfig, output: &Path) -> Result<(), CliError> {
    let text = cfg.to_text(true);
    let mut path = output.as_os_str().to_owned();
    path.push(".conf");
    write_file(Path::new(&path), &text)?;
    eprint!("# effective configuration\n{text}");
    Ok(())
}

fn parse(cfg: &RunConfig) -> Result<(), CliError> {
    let logs = require(&cfg.logs, "logs")?;
    let templates_out = require(&cfg.templates_out, "templates_out")?;
    let keys_out = require(&cfg.keys_out, "keys_out")?;
    let mut tree = DrainTree::new(cfg.drain())?;
    let mut input = open(logs)?;
    let mut keys = create(keys_out)?;
    let mut labels = cfg.labels_out.as_deref().map(create).transpose()?;

    let mut buf = Vec::with_capacity(1024);
    let (mut parsed, mut skipped) = (0u64, 0u64);
    loop {
        buf.clear();
        if input.read_until(b'\n', &mut buf).map_err(|e| io_err(logs, e))? == 0 {
            break;
        }
        let line = String::from_utf8_lossy(&buf);
        let line = line.trim_end_matches(['\n', '\r']);
        let (anomalous, message) = match cfg.format {
            LogFormat::Thunderbird => match read_labeled_line(line) {
                Ok(l) => (l.is_anomalous, l.message),
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            },
            LogFormat::Plain => (false, line.to_string()),
        };
        let id = match tree.parse_line(&message) {
            Ok((id, _)) => id,
            Err(logpeft::Error::EmptyLine) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(keys, "{id}").map_err(|e| io_err(keys_out, e))?;
        if let (Some(w), Some(path)) = (labels.as_mut(), cfg.labels_out.as_deref()) {
            writeln!(w, "{}", u8::from(anomalous)).map_err(|e| io_err(path, e))?;
        }
        parsed += 1;
    }
    keys.flush().map_err(|e| io_err(keys_out, e))?;
    if let (Some(mut w), Some(path)) = (labels, cfg.labels_out.as_deref()) {
        w.flush().map_err(|e| io_err(path, e))?;
    }
    let mut out = create(templates_out)?;
    write_templates(tree.templates(), &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| io_err(templates_out, e))?;
    record_config(cfg, templates_out)?;
    eprintln!(
        "parsed {parsed} lines into {} templates ({skipped} skipped)",
        tree.template_count()
    );
    Ok(())
}

fn windows(cfg: &RunConfig) -> Result<(), CliError> {
    let keys_path = require(&cfg.keys, "keys")?;
    let out_path = require(&cfg.out, "out")?;
    let keys = read_keys(open(keys_path)?).map_err(|e| io_err(keys_path, e))?;
    let flags = match cfg.labels.as_deref() {
        Some(p) => read_flags(open(p)?).map_err(|e| io_err(p, e))?,
        None => vec![false; keys.len()],
    };
    let vocab = match (cfg.vocab, cfg.templates.as_deref()) {
        (Some(v), _) => v,
        (None, Some(p)) => read_templates(open(p)?).map_err(|e| io_err(p, e))?.len(),
        (None, None) => keys.iter().max().map_or(0, |m| m + 1),
    };
    if let Some(k) = keys.iter().find(|&&k| k >= vocab) {
        return Err(CliError::Data(format!(
            "key {k} is outside the vocabulary of {vocab} templates"
        )));
    }
    let windows = build_windows(&keys, &flags, cfg.window_size, cfg.stride)?;
    let mut out = create(out_path)?;
    write_windows(&windows, Some(vocab), &mut out)
        .and_then(|_| out.flush())
        .map_err(|e| io_err(out_path, e))?;
    record_config(cfg, out_path)?;
    let positives = windows.iter().filter(|w| w.label == 1).count();
    eprintln!(
        "wrote {} windows ({positives} anomalous) over {vocab} keys",
        windows.len()
    );
    Ok(())
}

fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let out_path = require(&cfg.out, "out")?;
    let (keys, flags) = generate_synthetic(&cfg.synth(), cfg.seed)?;
    let mut rng = SeedSplitter::new(cfg.seed).stream("render");
    let mut out = create(out_path)?;
    for (i, (&k, &f)) in keys.iter().zip(&flags).enumerate() {
        writeln!(out, "{}", render_log_line(k, f, i, &mut rng)).map_err(|e| io_err(out_path, e))?;
    }
    out.flush().map_err(|e| io_err(out_path, e))?;
    record_config(cfg, out_path)?;
    eprintln!("wrote {} lines", keys.len());
    Ok(())
}

fn load_windows(path: &Path) -> Result<(usize, Vec<LogWindow>), CliError> {
    let WindowFile { vocab, windows } = read_windows(open(path)?).map_err(|e| io_err(path, e))?;
    let max_key = windows.iter().flat_map(|w| &w.key_ids).max().map_or(0, |m| m + 1);
    let vocab = vocab.unwrap_or(max_key);
    if max_key > vocab {
        return Err(CliError::Data(format!(
            "{}: key {} is outside the declared vocabulary of {vocab}",
            path.display(),
            max_key - 1
        )));
    }
    Ok((vocab, windows))
}

fn report_text(lines: &[(&str, String)], metrics: &Evaluation) -> String {
    let mut out: String = lines.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    out.push_str(&format!("loss = {:.6}\n", metrics.loss));
    let cm = &metrics.confusion;
    out.push_str(&format!(
        "tp = {}\nfp = {}\ntn = {}\nfn = {}\n",
        cm.tp, cm.fp, cm.tn, cm.fn_
    ));
    out.push_str(&metrics.report.to_key_values());
    out
}

fn train_cmd(mut cfg: RunConfig) -> Result<(), CliError> {
    let data = require(&cfg.data, "data")?.to_path_buf();
    let checkpoint_out = require(&cfg.checkpoint_out, "checkpoint_out")?.to_path_buf();
    let report_out = require(&cfg.report_out, "report_out")?.to_path_buf();
    let (vocab, windows) = load_windows(&data)?;
    let split = split_dataset(&windows, cfg.train_frac, cfg.val_frac, cfg.seed)?;
    if split.test.is_empty() {
        return Err(CliError::Data(format!("{} windows leave no test split", windows.len())));
    }
    let model = skeleton(&cfg, vocab)?;
    let (model, history) = train(model, &split.train, &split.val, &cfg.train())?;
    cfg.class_weights = Some(history.class_weights);
    let test = evaluate(&model, &split.test, history.class_weights)?;

    let params = trainable_parameter_report(&model);
    let summary = [
        ("method", cfg.method.to_string()),
        ("windows_train", split.train.len().to_string()),
        ("windows_val", split.val.len().to_string()),
        ("windows_test", split.test.len().to_string()),
        ("trainable_params", params.trainable.to_string()),
        ("frozen_params", params.frozen.to_string()),
        ("trainable_ratio", format!("{:.6}", params.trainable_ratio())),
        ("steps", history.steps.to_string()),
    ];
    let report = report_text(&summary, &test);
    let ckpt = Checkpoint {
        config: cfg.clone(),
        template_count: vocab,
        model,
    };
    save_checkpoint(&ckpt, &checkpoint_out)?;
    write_file(&report_out, &report)?;
    if let Some(p) = cfg.history_out.as_deref() {
        write_file(p, &history.to_tsv())?;
    }
    if let Some(p) = cfg.test_out.as_deref() {
        let mut out = create(p)?;
        write_windows(&split.test, Some(vocab), &mut out)
            .and_then(|_| out.flush())
            .map_err(|e| io_err(p, e))?;
    }
    record_config(&cfg, &checkpoint_out)?;
    print!("{report}");
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<(), CliError> {
    let ckpt_path = require(&cfg.checkpoint, "checkpoint")?;
    let data = require(&cfg.data, "data")?;
    let report_out = require(&cfg.report_out, "report_out")?;
    let ckpt = load_checkpoint(ckpt_path)?;
    let (vocab, windows) = load_windows(data)?;
    if vocab != ckpt.template_count {
        return Err(CliError::Data(format!(
            "vocabulary mismatch: checkpoint is bound to {} templates, {} declares {vocab}",
            ckpt.template_count,
            data.display()
        )));
    }
    if windows.is_empty() {
        return Err(CliError::Data(format!("{} holds no windows", data.display())));
    }
    let weights = ckpt
        .config
        .class_weights
        .unwrap_or_else(|| inverse_frequency_weights(&windows));
    let result = evaluate(&ckpt.model, &windows, weights)?;
    let report = report_text(
        &[
            ("method", ckpt.config.method.to_string()),
            ("windows", windows.len().to_string()),
        ],
        &result,
    );
    write_file(report_out, &report)?;
    let mut effective = ckpt.config.clone();
    effective.checkpoint = cfg.checkpoint.clone();
    effective.data = cfg.data.clone();
    effective.report_out = cfg.report_out.clone();
    record_config(&effective, report_out)?;
    print!("{report}");
    Ok(())
}
