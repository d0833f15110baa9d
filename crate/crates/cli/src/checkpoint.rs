//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "LOGADCKP" | u32 version | u64 config length | config text
//! u64 template count | u32 parameter count
//! per parameter, sorted by name:
//!   u32 name length | name | u8 trainable | u32 ndim | u64 dims… | f64 values…
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use logpeft::autodiff::Tensor;
use logpeft::peft::{attach_adapter_head, inject_lora};
use logpeft::rng::SeedSplitter;
use logpeft::trainer::Method;
use logpeft::transformer::TransformerModel;

use crate::config::RunConfig;
use crate::CliError;

const MAGIC: &[u8; 8] = b"LOGADCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint format version {found} is not supported (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// A model together with the settings that produced it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub template_count: usize,
    pub model: TransformerModel,
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let text = ckpt.config.to_text(false);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(ckpt.template_count as u64).to_le_bytes());
    let mut params: Vec<_> = ckpt.model.params().iter().map(|(_, p)| p).collect();
    params.sort_by(|a, b| a.name.cmp(&b.name));
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &dim in p.value.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                CheckpointError::CorruptCheckpoint(format!("truncated while reading {what} at byte {}", self.pos))
            })?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| CheckpointError::CorruptCheckpoint(format!("{what} {v} is too large")))
    }
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptCheckpoint(msg.into())
}

/// Rebuilds the model skeleton from the config, then fills every parameter by name.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let text_len = r.len("config length")?;
    let text = std::str::from_utf8(r.take(text_len, "config")?).map_err(|_| corrupt("config is not UTF-8"))?;
    let config = RunConfig::from_text(text).map_err(|e| corrupt(format!("config: {e}")))?;
    let template_count = r.len("template count")?;

    let mut model = skeleton(&config, template_count).map_err(|e| corrupt(format!("model: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    if count != model.params().len() {
        return Err(corrupt(format!(
            "{count} parameters stored but the configuration defines {}",
            model.params().len()
        )));
    }
    let mut previous: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| corrupt("parameter name is not UTF-8"))?
            .to_string();
        if previous.as_ref().is_some_and(|p| *p >= name) {
            return Err(corrupt(format!("parameter `{name}` is out of order")));
        }
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            other => return Err(corrupt(format!("bad trainable flag {other} for `{name}`"))),
        };
        let ndim = r.u32("rank")? as usize;
        let shape = (0..ndim).map(|_| r.len("dimension")).collect::<Result<Vec<_>, _>>()?;
        let id = model
            .params()
            .find(&name)
            .ok_or_else(|| corrupt(format!("unexpected parameter `{name}`")))?;
        if model.params().value(id).shape() != shape.as_slice() {
            return Err(corrupt(format!(
                "parameter `{name}` has shape {shape:?}, expected {:?}",
                model.params().value(id).shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let param = model.params_mut().get_mut(id);
        param.value = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        param.trainable = trainable;
        previous = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        config,
        template_count,
        model,
    })
}

/// A model with the parameter layout the config describes; values are placeholders.
pub fn skeleton(config: &RunConfig, template_count: usize) -> logpeft::Result<TransformerModel> {
    let streams = SeedSplitter::new(config.seed);
    let base = TransformerModel::new(config.transformer(template_count), &mut streams.stream("init"))?;
    match config.method {
        Method::Lora => inject_lora(&base, &config.lora(), &mut streams.stream("lora")),
        Method::Adapter => attach_adapter_head(&base, &mut streams.stream("adapter")),
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::default_config;

    fn small() -> Checkpoint {
        let mut config = default_config();
        config.d_model = 8;
        config.n_heads = 2;
        config.max_seq_len = 6;
        config.seed = 3;
        let model = skeleton(&config, 5).unwrap();
        Checkpoint {
            config,
            template_count: 5,
            model,
        }
    }

    #[test]
    fn byte_identical_round_trip() {
        let ckpt = small();
        let bytes = encode(&ckpt);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.model, ckpt.model);
    }

    #[test]
    fn every_truncation_is_reported() {
        let bytes = encode(&small());
        for cut in [0, 7, 12, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(CheckpointError::CorruptCheckpoint(_))),
                "cut {cut}"
            );
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode(&longer), Err(CheckpointError::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked() {
        let mut bytes = encode(&small());
        bytes[8] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(CheckpointError::VersionMismatch { found: 9 })
        ));
    }
}
