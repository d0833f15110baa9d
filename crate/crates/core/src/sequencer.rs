//! Labeled lines, fixed-length key windows and a synthetic key-stream generator.

use std::io::{self, BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{SeedSplitter, StreamRng};

/// A raw log line with its label column removed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledLine {
    pub is_anomalous: bool,
    pub message: String,
}

/// Splits off the leading label column: `-` marks a normal line, anything
/// else is the alert tag of an anomalous one.
pub fn read_labeled_line(raw: &str) -> Result<LabeledLine> {
    let trimmed = raw.trim_start();
    let (tag, rest) = match trimmed.find(char::is_whitespace) {
        Some(i) => (&trimmed[..i], &trimmed[i..]),
        None => (trimmed, ""),
    };
    let message = rest.trim_start().trim_end_matches(['\r', '\n']);
    if tag.is_empty() || message.is_empty() {
        return Err(Error::EmptyLine);
    }
    Ok(LabeledLine {
        is_anomalous: tag != "-",
        message: message.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogWindow {
    pub key_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub label: u8,
    /// (source id, start offset in the key stream)
    pub origin: (u32, usize),
}

impl LogWindow {
    pub fn new(key_ids: Vec<usize>, label: u8, origin: (u32, usize)) -> Self {
        let attention_mask = vec![1; key_ids.len()];
        Self {
            key_ids,
            attention_mask,
            label,
            origin,
        }
    }

    /// Number of non-pad positions.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn mask_bools(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }
}

/// Slides a `window_size` window over the stream with the given stride.
/// A window is anomalous when any of its lines is.
pub fn build_windows(keys: &[usize], flags: &[bool], window_size: usize, stride: usize) -> Result<Vec<LogWindow>> {
    if window_size == 0 || stride == 0 {
        return Err(Error::Argument("window size and stride must be positive".into()));
    }
    if keys.len() != flags.len() {
        return Err(Error::LengthMismatch(keys.len(), flags.len()));
    }
    if keys.len() < window_size {
        return Ok(Vec::new());
    }
    let count = (keys.len() - window_size) / stride + 1;
    Ok((0..count)
        .map(|w| {
            let start = w * stride;
            let range = start..start + window_size;
            let label = u8::from(flags[range.clone()].iter().any(|&f| f));
            LogWindow::new(keys[range].to_vec(), label, (0, start))
        })
        .collect())
}

/// Right-pads with `pad_id` up to `max_len`; the mask marks the original positions.
pub fn pad_and_mask(window: &LogWindow, max_len: usize, pad_id: usize) -> Result<LogWindow> {
    let real = window.real_len();
    if real > max_len {
        return Err(Error::TooLong { len: real, max_len });
    }
    let mut key_ids = window.key_ids[..real].to_vec();
    key_ids.resize(max_len, pad_id);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    Ok(LogWindow {
        key_ids,
        attention_mask,
        label: window.label,
        origin: window.origin,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LogWindow>,
    pub val: Vec<LogWindow>,
    pub test: Vec<LogWindow>,
}

/// Seeded shuffle, then `floor(n·train_frac)` train and `floor(n·val_frac)` validation
/// windows; the remainder is the test set.
pub fn split_dataset(windows: &[LogWindow], train_frac: f64, val_frac: f64, seed: u64) -> Result<DatasetSplit> {
    let valid = train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac <= 1.0;
    if !valid {
        return Err(Error::Argument(format!(
            "split fractions must be positive with sum at most 1, got {train_frac} and {val_frac}"
        )));
    }
    let n = windows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut SeedSplitter::new(seed).stream("split"));
    let n_train = (n as f64 * train_frac).floor() as usize;
    let n_val = ((n as f64 * val_frac).floor() as usize).min(n - n_train);
    let pick = |idx: &[usize]| idx.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

/// Parameters of the synthetic key-stream generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub vocab: usize,
    pub normal_patterns: usize,
    pub anomaly_patterns: usize,
    /// Target fraction of anomalous lines.
    pub anomaly_rate: f64,
    pub lines: usize,
    pub min_segment: usize,
    pub max_segment: usize,
    /// Size of the key pool reserved for anomalous segments.
    pub rare_keys: usize,
    /// Share of anomaly-pattern positions drawn from the rare pool.
    pub rare_share: f64,
    /// Normal patterns have between `normal_pattern_min` and `normal_pattern_max` keys.
    pub normal_pattern_min: usize,
    pub normal_pattern_max: usize,
    /// Anomaly patterns have between 1 and this many keys.
    pub anomaly_pattern_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            normal_patterns: 20,
            anomaly_patterns: 5,
            anomaly_rate: 0.1,
            lines: 200_000,
            min_segment: 512,
            max_segment: 2048,
            rare_keys: 2,
            rare_share: 1.0,
            normal_pattern_min: 8,
            normal_pattern_max: 16,
            anomaly_pattern_len: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anomaly_rate) {
            return Err(Error::Argument(format!(
                "anomaly rate must lie in [0, 1], got {}",
                self.anomaly_rate
            )));
        }
        if self.vocab < 2 {
            return Err(Error::Argument(format!(
                "vocabulary must have at least 2 keys, got {}",
                self.vocab
            )));
        }
        if self.rare_keys == 0 || self.rare_keys >= self.vocab {
            return Err(Error::Argument(format!(
                "rare key pool must leave room for normal keys, got {} of {}",
                self.rare_keys, self.vocab
            )));
        }
        if !(0.0..=1.0).contains(&self.rare_share) {
            return Err(Error::Argument(format!(
                "rare share must lie in [0, 1], got {}",
                self.rare_share
            )));
        }
        if self.normal_pattern_min == 0 || self.normal_pattern_min > self.normal_pattern_max {
            return Err(Error::Argument(format!(
                "normal pattern length range {}..={} is empty",
                self.normal_pattern_min, self.normal_pattern_max
            )));
        }
        if self.anomaly_pattern_len == 0 {
            return Err(Error::Argument("anomaly pattern length must be positive".into()));
        }
        if self.normal_patterns == 0 || self.anomaly_patterns == 0 {
            return Err(Error::Argument("pattern counts must be positive".into()));
        }
        if self.min_segment == 0 || self.min_segment > self.max_segment {
            return Err(Error::Argument(format!(
                "segment length range {}..={} is empty",
                self.min_segment, self.max_segment
            )));
        }
        Ok(())
    }

    /// Keys at or above this id appear only in anomalous segments.
    pub fn rare_start(&self) -> usize {
        self.vocab - self.rare_keys
    }
}

/// Emits a stream of segments. Normal segments cycle through one of the
/// seeded normal patterns; anomalous segments repeat a short burst pattern
/// drawn from a small pool of rare keys, which also breaks the normal
/// transitions. Every line of an anomalous segment is flagged.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<(Vec<usize>, Vec<bool>)> {
    spec.validate()?;
    let mut rng = SeedSplitter::new(seed).stream("synth");
    let rare_start = spec.rare_start();
    let pattern = |rng: &mut StreamRng, len: usize, rare_share: f64| -> Vec<usize> {
        (0..len)
            .map(|i| {
                if rare_share > 0.0 && (i == 0 || rng.random_bool(rare_share)) {
                    rng.random_range(rare_start..spec.vocab)
                } else {
                    rng.random_range(0..rare_start)
                }
            })
            .collect()
    };
    let normal: Vec<Vec<usize>> = (0..spec.normal_patterns)
        .map(|_| {
            let len = rng.random_range(spec.normal_pattern_min..=spec.normal_pattern_max);
            pattern(&mut rng, len, 0.0)
        })
        .collect();
    let anomalous: Vec<Vec<usize>> = (0..spec.anomaly_patterns)
        .map(|_| {
            let len = rng.random_range(1..=spec.anomaly_pattern_len);
            pattern(&mut rng, len, spec.rare_share)
        })
        .collect();

    let mean_segment = (spec.min_segment + spec.max_segment) as f64 / 2.0;
    let rho = spec.anomaly_rate;
    let mut keys = Vec::with_capacity(spec.lines);
    let mut flags = Vec::with_capacity(spec.lines);
    let mut flagged = 0usize;
    while keys.len() < spec.lines {
        let len = rng
            .random_range(spec.min_segment..=spec.max_segment)
            .min(spec.lines - keys.len());
        // steer the running anomalous share back toward the target rate
        let deficit = rho * keys.len() as f64 - flagged as f64;
        let p = (rho + 0.5 * deficit / mean_segment).clamp(0.0, 1.0);
        let is_anomalous = rng.random::<f64>() < p;
        let patterns = if is_anomalous { &anomalous } else { &normal };
        let pat = &patterns[rng.random_range(0..patterns.len())];
        let offset = rng.random_range(0..pat.len());
        for i in 0..len {
            keys.push(pat[(offset + i) % pat.len()]);
            flags.push(is_anomalous);
        }
        if is_anomalous {
            flagged += len;
        }
    }
    Ok((keys, flags))
}

const ALERT_TAGS: [&str; 4] = ["KERNDTLB", "VAPI", "ECC", "CPU"];
const SLOT_PREFIX: [&str; 4] = ["svc", "op", "obj", "st"];

fn letters(mut k: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'a' + (k % 26) as u8);
        k /= 26;
        if k == 0 {
            break;
        }
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

/// Renders one synthetic line in Thunderbird layout: label column, numeric
/// header, then a message whose words are unique to `key`.
pub fn render_log_line<R: Rng + ?Sized>(key: usize, anomalous: bool, line_no: usize, rng: &mut R) -> String {
    let tag = if anomalous {
        ALERT_TAGS[key % ALERT_TAGS.len()]
    } else {
        "-"
    };
    let word = |slot: usize| format!("{}{}", SLOT_PREFIX[slot], letters(key));
    let epoch = 1_131_566_461 + line_no / 16;
    let node = rng.random_range(1..512);
    let pid = rng.random_range(100..65_536);
    let mut line = format!(
        "{tag} {epoch} 2005.11.09 tn{node} {} {}: {} pid={pid}",
        word(0),
        word(1),
        word(2)
    );
    for _ in 0..key % 3 {
        line.push(' ');
        line.push_str(&word(3));
    }
    line
}

pub fn write_keys<W: Write>(keys: &[usize], mut out: W) -> io::Result<()> {
    for k in keys {
        writeln!(out, "{k}")?;
    }
    Ok(())
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

pub fn read_keys<R: BufRead>(input: R) -> io::Result<Vec<usize>> {
    let mut keys = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        keys.push(
            line.parse()
                .map_err(|_| invalid(format!("bad key id on line {}", n + 1)))?,
        );
    }
    Ok(keys)
}

/// One `0`/`1` per line.
pub fn read_flags<R: BufRead>(input: R) -> io::Result<Vec<bool>> {
    let mut flags = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        match line.trim() {
            "" => {}
            "0" => flags.push(false),
            "1" => flags.push(true),
            _ => return Err(invalid(format!("bad label on line {}", n + 1))),
        }
    }
    Ok(flags)
}

/// `label<TAB>space-separated ids` per window, with an optional `# vocab=N` header.
pub fn write_windows<W: Write>(windows: &[LogWindow], vocab: Option<usize>, mut out: W) -> io::Result<()> {
    if let Some(v) = vocab {
        writeln!(out, "# vocab={v}")?;
    }
    let mut line = String::new();
    for w in windows {
        line.clear();
        line.push_str(if w.label == 1 { "1\t" } else { "0\t" });
        let ids = &w.key_ids[..w.real_len()];
        for (i, id) in ids.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&id.to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowFile {
    pub vocab: Option<usize>,
    pub windows: Vec<LogWindow>,
}

pub fn read_windows<R: BufRead>(input: R) -> io::Result<WindowFile> {
    let mut vocab = None;
    let mut windows = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(v) = rest.trim().strip_prefix("vocab=") {
                vocab = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| invalid(format!("bad vocab header on line {}", n + 1)))?,
                );
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let bad = || invalid(format!("bad window on line {}", n + 1));
        let (label, ids) = line.split_once('\t').ok_or_else(bad)?;
        let label = match label {
            "0" => 0,
            "1" => 1,
            _ => return Err(bad()),
        };
        let ids = ids
            .split(' ')
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        windows.push(LogWindow::new(ids, label, (0, windows.len())));
    }
    Ok(WindowFile { vocab, windows })
}
