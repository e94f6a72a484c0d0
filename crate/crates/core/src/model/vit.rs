use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dsge::check_rate;
use super::{ones, weight, zeros, EncoderLayer, Forward, Init, LN_EPS};
use crate::error::{config_err, dim_err, Result};
use crate::nd::{ParamId, ParamStore, Tensor, Var};

/// Shape of the patch-transformer image encoder. The default is the full
/// 224/16, 768-wide, 6-layer model; [`VitConfig::desk`] is the small one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; `None` means `4 · dim`.
    pub ffn_hidden: Option<usize>,
    pub dropout: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 224,
            patch_size: 16,
            dim: 768,
            layers: 6,
            heads: 12,
            ffn_hidden: None,
            dropout: 0.1,
        }
    }
}

impl VitConfig {
    /// 64×64 images, 16×16 patches, width 64, two layers.
    pub fn desk() -> Self {
        VitConfig {
            image_size: 64,
            patch_size: 16,
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_hidden: None,
            dropout: 0.1,
        }
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.dim)
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(config_err!(
                "image size {} is not divisible by patch size {}",
                self.image_size,
                self.patch_size
            ));
        }
        if self.dim == 0 || self.layers == 0 || self.ffn_width() == 0 {
            return Err(config_err!("image encoder sizes must be positive"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(config_err!(
                "image width {} is not divisible by {} heads",
                self.dim,
                self.heads
            ));
        }
        check_rate(self.dropout)
    }
}

/// Splits a `3×H×W` image into non-overlapping `p×p` patches in row-major
/// patch order. Each row is one patch flattened channel-major.
pub fn patchify(img: &Tensor, p: usize) -> Result<Tensor> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(dim_err!("expected a 3xHxW image, got {shape:?}"));
    }
    let (h, w) = (shape[1], shape[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(dim_err!("{h}x{w} image is not divisible into {p}x{p} patches"));
    }
    let (ph, pw) = (h / p, w / p);
    let width = 3 * p * p;
    let src = img.data();
    let mut out = Vec::with_capacity(ph * pw * width);
    for py in 0..ph {
        for px in 0..pw {
            for c in 0..3 {
                for dy in 0..p {
                    let row = c * h * w + (py * p + dy) * w + px * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[ph * pw, width], out)
}

/// Parameters of the image encoder.
#[derive(Clone, Debug)]
pub struct VitParams {
    cfg: VitConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    layers: Vec<EncoderLayer>,
    norm_gamma: ParamId,
    norm_beta: ParamId,
}

impl VitParams {
    pub fn init<R: Rng + ?Sized>(
        cfg: &VitConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let p = cfg.patch_size;
        let patch_w = weight(store, format!("{prefix}.patch.w"), &[d, 3 * p * p], Init::Normal, rng)?;
        let patch_b = zeros(store, format!("{prefix}.patch.b"), &[d])?;
        let cls = weight(store, format!("{prefix}.cls"), &[d], Init::Normal, rng)?;
        let pos = weight(store, format!("{prefix}.pos"), &[cfg.num_patches() + 1, d], Init::Normal, rng)?;
        let layers = (0..cfg.layers)
            .map(|i| {
                EncoderLayer::init(
                    store,
                    &format!("{prefix}.layer{i}"),
                    d,
                    cfg.heads,
                    cfg.ffn_width(),
                    cfg.dropout,
                    Init::Normal,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(VitParams {
            cfg: cfg.clone(),
            patch_w,
            patch_b,
            cls,
            pos,
            layers,
            norm_gamma: ones(store, format!("{prefix}.norm.gamma"), &[d])?,
            norm_beta: zeros(store, format!("{prefix}.norm.beta"), &[d])?,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    /// Full token sequence `(N+1)×D` after the final LayerNorm; row 0 is the
    /// classification token.
    pub fn forward_tokens(&self, f: &mut Forward, img: &Tensor) -> Result<Var> {
        let s = self.cfg.image_size;
        if img.shape() != [3, s, s] {
            return Err(dim_err!(
                "image encoder expects 3x{s}x{s} input, got {:?}",
                img.shape()
            ));
        }
        let patches = f.input(patchify(img, self.cfg.patch_size)?);
        let emb = f.linear(patches, self.patch_w, self.patch_b)?;
        let tokens = f.graph.concat_rows(&[f.p(self.cls), emb])?;
        let mut x = f.graph.add(tokens, f.p(self.pos))?;
        for layer in &self.layers {
            x = layer.forward(f, x)?;
        }
        f.graph
            .layer_norm(x, f.p(self.norm_gamma), f.p(self.norm_beta), LN_EPS)
    }

    /// Image feature: the classification token's final state.
    pub fn forward(&self, f: &mut Forward, img: &Tensor) -> Result<Var> {
        let tokens = self.forward_tokens(f, img)?;
        f.graph.select_row(tokens, 0)
    }
}
