//! Binary checkpoints.
//!
//! Layout: the magic `GZF1`, a little-endian `u64` header length, a JSON
//! header, then every tensor's `f64` values little-endian in header order.
//! Tensor names carry a group prefix: `param/`, `momentum/` or `best/`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::trainer::{MetricsRecord, TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nd::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GZF1";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal string; the position is a `u128`.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config_hash: String,
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    best_val_acc: Option<f64>,
    best_epoch: Option<usize>,
    stale_epochs: usize,
    stopped_early: bool,
    rng: RngState,
    records: Vec<MetricsRecord>,
    tensors: Vec<TensorEntry>,
}

/// Trainer state plus the configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epoch: usize,
    pub best_val_acc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_epochs: usize,
    pub stopped_early: bool,
    pub rng: RngState,
    pub records: Vec<MetricsRecord>,
    /// `(group/name, tensor)` in file order.
    pub tensors: Vec<(String, Tensor)>,
}

/// SHA-256 over the canonical JSON of both configs, hex encoded.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_vec(&(model, train)).expect("configs serialize");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn format_err(offset: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("checkpoint byte {offset}: {msg}"))
}

impl Checkpoint {
    pub fn capture(model: &ModelConfig, train: &TrainConfig, st: &TrainState) -> Self {
        let names = st.params.names();
        let mut tensors = Vec::with_capacity(3 * names.len());
        for (group, ts) in [
            ("param", st.params.tensors()),
            ("momentum", &st.momentum[..]),
            ("best", &st.best_params[..]),
        ] {
            for (n, t) in names.iter().zip(ts) {
                tensors.push((format!("{group}/{n}"), t.clone()));
            }
        }
        Checkpoint {
            model: model.clone(),
            train: train.clone(),
            epoch: st.epoch,
            best_val_acc: st.best_val_acc,
            best_epoch: st.best_epoch,
            stale_epochs: st.stale_epochs,
            stopped_early: st.stopped_early,
            rng: RngState {
                seed: st.rng_seed,
                stream: st.rng.get_stream(),
                word_pos: st.rng.get_word_pos().to_string(),
            },
            records: st.records.clone(),
            tensors,
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.model, &self.train)
    }

    /// Tensors of one group, keyed by parameter name, in file order.
    pub fn group(&self, group: &str) -> Vec<(&str, &Tensor)> {
        let prefix = format!("{group}/");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|n| (n, t)))
            .collect()
    }

    /// Copies every stored tensor and counter into `st`, whose parameter
    /// names and shapes must match.
    pub fn restore_into(&self, st: &mut TrainState) -> Result<()> {
        let names = st.params.names().to_vec();
        let take = |group: &str| -> Result<Vec<Tensor>> {
            let g = self.group(group);
            if g.len() != names.len() || g.iter().zip(&names).any(|((n, _), m)| n != m) {
                return Err(Error::Format(format!(
                    "checkpoint {group} tensors do not match the model's parameters"
                )));
            }
            Ok(g.into_iter().map(|(_, t)| t.clone()).collect())
        };
        let params = take("param")?;
        let momentum = take("momentum")?;
        let best = take("best")?;
        for ((p, m), b) in st.params.tensors().iter().zip(&momentum).zip(&best) {
            if m.shape() != p.shape() || b.shape() != p.shape() {
                return Err(Error::Format("checkpoint tensor shapes disagree".into()));
            }
        }
        st.params.assign(params)?;
        st.momentum = momentum;
        st.best_params = best;
        st.epoch = self.epoch;
        st.best_val_acc = self.best_val_acc;
        st.best_epoch = self.best_epoch;
        st.stale_epochs = self.stale_epochs;
        st.stopped_early = self.stopped_early;
        st.records = self.records.clone();
        let word_pos: u128 = self
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Format(format!("bad RNG position {:?}", self.rng.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng.seed);
        rng.set_stream(self.rng.stream);
        rng.set_word_pos(word_pos);
        st.rng_seed = self.rng.seed;
        st.rng = rng;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 8 * t.len() as u64;
        }
        let header = Header {
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash(),
            model: self.model.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            best_val_acc: self.best_val_acc,
            best_epoch: self.best_epoch,
            stale_epochs: self.stale_epochs,
            stopped_early: self.stopped_early,
            rng: self.rng.clone(),
            records: self.records.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(format_err(bytes.len(), "truncated before the header"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format_err(0, format!("bad magic {:?}", &bytes[..4])));
        }
        let len = u64::from_le_bytes(bytes[4..PREFIX_LEN].try_into().expect("8 bytes")) as usize;
        let end = PREFIX_LEN
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| format_err(4, format!("header length {len} runs past end of file")))?;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..end]).map_err(|e| {
            let col = if e.line() == 1 { e.column().saturating_sub(1) } else { 0 };
            format_err(PREFIX_LEN + col, format!("malformed header: {e}"))
        })?;
        if header.version != CHECKPOINT_VERSION {
            return Err(format_err(
                PREFIX_LEN,
                format!("version {} is not supported (expected {CHECKPOINT_VERSION})", header.version),
            ));
        }
        let expected = config_hash(&header.model, &header.train);
        if header.config_hash != expected {
            return Err(format_err(PREFIX_LEN, "config hash does not match the stored configs"));
        }
        let payload = &bytes[end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut next = 0u64;
        for e in &header.tensors {
            if e.offset != next {
                return Err(format_err(
                    end,
                    format!("tensor {} starts at {} instead of {next}", e.name, e.offset),
                ));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let stop = start + 8 * n;
            if stop > payload.len() {
                return Err(format_err(
                    end + payload.len(),
                    format!("payload truncated inside tensor {}", e.name),
                ));
            }
            let data = payload[start..stop]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
            next = stop as u64;
        }
        if next as usize != payload.len() {
            return Err(format_err(
                end + next as usize,
                format!("{} trailing bytes after the last tensor", payload.len() - next as usize),
            ));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            epoch: header.epoch,
            best_val_acc: header.best_val_acc,
            best_epoch: header.best_epoch,
            stale_epochs: header.stale_epochs,
            stopped_early: header.stopped_early,
            rng: header.rng,
            records: header.records,
            tensors,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl Checkpoint {
    /// Rebuilds the model with the tensors of `group` (`param` or `best`).
    pub fn model(&self, group: &str) -> Result<(crate::model::GazeClassifier, crate::nd::ParamStore)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (model, mut store) = crate::model::GazeClassifier::new(&self.model, &mut rng)?;
        let g = self.group(group);
        if g.len() != store.len() || g.iter().zip(store.names()).any(|((n, _), m)| n != m) {
            return Err(Error::Format(format!(
                "checkpoint {group} tensors do not match the stored model config"
            )));
        }
        store.assign(g.into_iter().map(|(_, t)| t.clone()).collect())?;
        Ok((model, store))
    }
}
