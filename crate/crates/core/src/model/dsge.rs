use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bias, weight, EncoderLayer, Forward, Init};
use crate::data::GAZE_LEN;
use crate::error::{config_err, dim_err, Result};
use crate::nd::{ParamId, ParamStore, Var};

/// Shape of the dual-sequence gaze encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsgeConfig {
    pub seq_len: usize,
    pub in_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    /// Feed-forward width; `None` means `4 · hidden`.
    pub ffn_hidden: Option<usize>,
    pub out_dim: usize,
    pub dropout: f64,
}

impl Default for DsgeConfig {
    fn default() -> Self {
        DsgeConfig {
            seq_len: GAZE_LEN,
            in_dim: 2,
            hidden: 128,
            heads: 8,
            layers: 6,
            ffn_hidden: None,
            out_dim: 768,
            dropout: 0.1,
        }
    }
}

impl DsgeConfig {
    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.hidden)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim != 2 {
            return Err(config_err!("gaze points are 2-D, in_dim must be 2 (got {})", self.in_dim));
        }
        if self.seq_len == 0 || self.hidden == 0 || self.out_dim == 0 || self.ffn_width() == 0 {
            return Err(config_err!("gaze encoder sizes must be positive"));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(config_err!(
                "gaze hidden width {} is not divisible by {} heads",
                self.hidden,
                self.heads
            ));
        }
        if self.layers == 0 {
            return Err(config_err!("gaze encoder needs at least one layer"));
        }
        check_rate(self.dropout)
    }
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(config_err!("dropout rate {rate} must lie in [0, 1)"))
    }
}

fn check_gaze(f: &Forward, g: Var, seq_len: usize) -> Result<()> {
    let shape = f.graph.value(g).shape();
    if shape != [seq_len, 2] {
        return Err(dim_err!(
            "gaze input must be {seq_len}x2 after length fitting, got {shape:?}"
        ));
    }
    Ok(())
}

/// Parameters of the dual-sequence gaze encoder.
///
/// Point embedding, a stack of self-attention layers without positional
/// encoding, and a per-step alignment projection whose first row is the
/// gaze feature.
#[derive(Clone, Debug)]
pub struct DsgeParams {
    cfg: DsgeConfig,
    embed_w: ParamId,
    embed_b: ParamId,
    layers: Vec<EncoderLayer>,
    align_w: ParamId,
    align_b: ParamId,
}

impl DsgeParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &DsgeConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let embed_w = weight(store, format!("{prefix}.embed.w"), &[d, 2], Init::FanIn, rng)?;
        let embed_b = bias(store, format!("{prefix}.embed.b"), d, 2, Init::FanIn, rng)?;
        let layers = (0..cfg.layers)
            .map(|i| {
                EncoderLayer::init(
                    store,
                    &format!("{prefix}.layer{i}"),
                    d,
                    cfg.heads,
                    cfg.ffn_width(),
                    cfg.dropout,
                    Init::FanIn,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        let align_w = weight(store, format!("{prefix}.align.w"), &[cfg.out_dim, d], Init::FanIn, rng)?;
        let align_b = bias(store, format!("{prefix}.align.b"), cfg.out_dim, d, Init::FanIn, rng)?;
        Ok(DsgeParams {
            cfg: cfg.clone(),
            embed_w,
            embed_b,
            layers,
            align_w,
            align_b,
        })
    }

    pub fn config(&self) -> &DsgeConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn embed_ids(&self) -> (ParamId, ParamId) {
        (self.embed_w, self.embed_b)
    }

    pub fn align_ids(&self) -> (ParamId, ParamId) {
        (self.align_w, self.align_b)
    }

    /// Row-wise affine embedding of `L×2` gaze into `L×d`.
    pub fn embed(&self, f: &mut Forward, g: Var) -> Result<Var> {
        let shape = f.graph.value(g).shape();
        if shape.len() != 2 || shape[1] != 2 {
            return Err(dim_err!("gaze input must be Lx2, got {shape:?}"));
        }
        f.linear(g, self.embed_w, self.embed_b)
    }

    /// The aligned per-step sequence `L × out_dim` before first-row readout.
    pub fn sequence(&self, f: &mut Forward, g: Var) -> Result<Var> {
        check_gaze(f, g, self.cfg.seq_len)?;
        let mut x = self.embed(f, g)?;
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        f.linear(x, self.align_w, self.align_b)
    }

    /// Gaze feature: row 0 of the aligned sequence.
    pub fn forward(&self, f: &mut Forward, g: Var) -> Result<Var> {
        let seq = self.sequence(f, g)?;
        f.graph.select_row(seq, 0)
    }
}

/// Baseline gaze encoder: the flattened trajectory through one ReLU hidden layer.
#[derive(Clone, Debug)]
pub struct MlpGazeParams {
    seq_len: usize,
    dropout: f64,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl MlpGazeParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        seq_len: usize,
        hidden: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if seq_len == 0 || hidden == 0 || out_dim == 0 {
            return Err(config_err!("MLP gaze encoder sizes must be positive"));
        }
        check_rate(dropout)?;
        Ok(MlpGazeParams {
            seq_len,
            dropout,
            w1: weight(store, format!("{prefix}.fc1.w"), &[hidden, 2 * seq_len], Init::FanIn, rng)?,
            b1: bias(store, format!("{prefix}.fc1.b"), hidden, 2 * seq_len, Init::FanIn, rng)?,
            w2: weight(store, format!("{prefix}.fc2.w"), &[out_dim, hidden], Init::FanIn, rng)?,
            b2: bias(store, format!("{prefix}.fc2.b"), out_dim, hidden, Init::FanIn, rng)?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn forward(&self, f: &mut Forward, g: Var) -> Result<Var> {
        check_gaze(f, g, self.seq_len)?;
        let flat = f.graph.reshape(g, &[2 * self.seq_len])?;
        let h = f.linear(flat, self.w1, self.b1)?;
        let h = f.graph.relu(h)?;
        let h = f.dropout(h, self.dropout)?;
        f.linear(h, self.w2, self.b2)
    }
}
