use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    ClassifierParams, CrossAttentionParams, DsgeConfig, DsgeParams, Forward, FusionParams,
    MlpGazeParams, VitConfig, VitParams,
};
use crate::error::{config_err, Error, Result};
use crate::nd::{softmax_last, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GazeEncoderKind {
    Dsge,
    Mlp,
    /// Image only; no gaze or fusion parameters exist.
    None,
}

/// How the gaze feature meets the image feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionKind {
    /// Concatenation, projection, and image skip connection.
    #[serde(rename = "layer")]
    Layer,
    /// Plain sum `g + Î` with no fusion weights.
    #[serde(rename = "add")]
    Add,
    /// Cross-attention output is the fused feature.
    #[serde(rename = "ca")]
    Ca,
    /// Cross-attention output takes the place of `g` in the fusion layer.
    #[serde(rename = "ca+layer")]
    CaLayer,
}

impl GazeEncoderKind {
    pub const ALL: [GazeEncoderKind; 3] =
        [GazeEncoderKind::Dsge, GazeEncoderKind::Mlp, GazeEncoderKind::None];

    pub fn as_str(self) -> &'static str {
        match self {
            GazeEncoderKind::Dsge => "dsge",
            GazeEncoderKind::Mlp => "mlp",
            GazeEncoderKind::None => "none",
        }
    }
}

impl FusionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Layer => "layer",
            FusionKind::Add => "add",
            FusionKind::Ca => "ca",
            FusionKind::CaLayer => "ca+layer",
        }
    }

    fn uses_cross_attention(self) -> bool {
        matches!(self, FusionKind::Ca | FusionKind::CaLayer)
    }

    fn uses_fusion_layer(self) -> bool {
        matches!(self, FusionKind::Layer | FusionKind::CaLayer)
    }
}

impl fmt::Display for GazeEncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GazeEncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GazeEncoderKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| config_err!("unknown gaze encoder {s:?} (expected dsge, mlp or none)"))
    }
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [FusionKind::Layer, FusionKind::Add, FusionKind::Ca, FusionKind::CaLayer]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                config_err!("unknown fusion {s:?} (expected layer, add, ca or ca+layer)")
            })
    }
}

/// Everything needed to build a [`GazeClassifier`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vit: VitConfig,
    pub dsge: DsgeConfig,
    pub mlp_hidden: usize,
    pub gaze: GazeEncoderKind,
    pub fusion: FusionKind,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vit: VitConfig::default(),
            dsge: DsgeConfig::default(),
            mlp_hidden: 512,
            gaze: GazeEncoderKind::Dsge,
            fusion: FusionKind::Layer,
            num_classes: 10,
        }
    }
}

impl ModelConfig {
    /// Small model sized for single-core training on 64×64 images.
    pub fn desk() -> Self {
        ModelConfig {
            vit: VitConfig::desk(),
            dsge: DsgeConfig {
                hidden: 32,
                heads: 2,
                layers: 2,
                out_dim: 64,
                ..DsgeConfig::default()
            },
            num_classes: 4,
            ..ModelConfig::default()
        }
    }

    /// Sets every dropout site to `rate`.
    pub fn set_dropout(&mut self, rate: f64) {
        self.vit.dropout = rate;
        self.dsge.dropout = rate;
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        if self.num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.num_classes));
        }
        match self.gaze {
            GazeEncoderKind::None => {
                if self.fusion != FusionKind::Layer {
                    return Err(config_err!(
                        "fusion {} requires a gaze encoder, but gaze is none",
                        self.fusion
                    ));
                }
            }
            GazeEncoderKind::Dsge => {
                self.dsge.validate()?;
                if self.dsge.out_dim != self.vit.dim {
                    return Err(config_err!(
                        "gaze feature width {} must equal image feature width {}",
                        self.dsge.out_dim,
                        self.vit.dim
                    ));
                }
            }
            GazeEncoderKind::Mlp => {
                if self.mlp_hidden == 0 || self.dsge.seq_len == 0 {
                    return Err(config_err!("MLP gaze encoder sizes must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Short human-readable variant label, e.g. `dsge+layer` or `none`.
    pub fn variant(&self) -> String {
        match self.gaze {
            GazeEncoderKind::None => "none".into(),
            g => format!("{g}+{}", self.fusion),
        }
    }
}

#[derive(Clone, Debug)]
enum GazeBranch {
    Dsge(DsgeParams),
    Mlp(MlpGazeParams),
    None,
}

/// Image encoder, optional gaze encoder, fusion, and classifier, with every
/// parameter registered in one [`ParamStore`].
///
/// Parameter names are prefixed `vit.`, `dsge.`, `mlp.`, `fusion.`, `ca.` and
/// `head.`. The image-only variant registers only `vit.` and `head.`.
#[derive(Clone, Debug)]
pub struct GazeClassifier {
    cfg: ModelConfig,
    vit: VitParams,
    gaze: GazeBranch,
    fusion: Option<FusionParams>,
    cross: Option<CrossAttentionParams>,
    head: ClassifierParams,
}

/// Intermediate features of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub image: Var,
    pub gaze: Option<Var>,
    pub fused: Var,
    pub logits: Var,
}

impl GazeClassifier {
    /// Registers freshly initialized parameters in `store`. The image encoder
    /// is always initialized first, so two variants built from the same RNG
    /// state share identical image-encoder weights.
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.vit.dim;
        let vit = VitParams::init(&cfg.vit, store, "vit", rng)?;
        let gaze = match cfg.gaze {
            GazeEncoderKind::Dsge => GazeBranch::Dsge(DsgeParams::init(&cfg.dsge, store, "dsge", rng)?),
            GazeEncoderKind::Mlp => GazeBranch::Mlp(MlpGazeParams::init(
                store,
                "mlp",
                cfg.dsge.seq_len,
                cfg.mlp_hidden,
                d,
                cfg.dsge.dropout,
                rng,
            )?),
            GazeEncoderKind::None => GazeBranch::None,
        };
        let has_gaze = cfg.gaze != GazeEncoderKind::None;
        let cross = if has_gaze && cfg.fusion.uses_cross_attention() {
            Some(CrossAttentionParams::init(store, "ca", d, cfg.vit.dropout, rng)?)
        } else {
            None
        };
        let fusion = if has_gaze && cfg.fusion.uses_fusion_layer() {
            Some(FusionParams::init(store, "fusion", d, rng)?)
        } else {
            None
        };
        let head = ClassifierParams::init(store, "head", d, cfg.num_classes, rng)?;
        Ok(GazeClassifier {
            cfg: cfg.clone(),
            vit,
            gaze,
            fusion,
            cross,
            head,
        })
    }

    /// Builds a model and a fresh store in one go.
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = Self::init(cfg, &mut store, rng)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vit(&self) -> &VitParams {
        &self.vit
    }

    pub fn dsge(&self) -> Option<&DsgeParams> {
        match &self.gaze {
            GazeBranch::Dsge(p) => Some(p),
            _ => None,
        }
    }

    pub fn mlp(&self) -> Option<&MlpGazeParams> {
        match &self.gaze {
            GazeBranch::Mlp(p) => Some(p),
            _ => None,
        }
    }

    pub fn fusion(&self) -> Option<&FusionParams> {
        self.fusion.as_ref()
    }

    pub fn cross_attention(&self) -> Option<&CrossAttentionParams> {
        self.cross.as_ref()
    }

    pub fn head(&self) -> &ClassifierParams {
        &self.head
    }

    pub fn fusion_ids(&self) -> Option<(ParamId, ParamId)> {
        self.fusion.as_ref().map(FusionParams::ids)
    }

    /// Full forward pass. `image` is a normalized `3×S×S` tensor and `gaze` a
    /// normalized, length-fitted `L×2` trajectory (ignored without a gaze encoder).
    pub fn features(&self, f: &mut Forward, image: &Tensor, gaze: &Tensor) -> Result<Features> {
        let needs_tokens = self.cross.is_some();
        let (i_hat, tokens) = if needs_tokens {
            let t = self.vit.forward_tokens(f, image)?;
            (f.graph.select_row(t, 0)?, Some(t))
        } else {
            (self.vit.forward(f, image)?, None)
        };
        let g = match &self.gaze {
            GazeBranch::None => None,
            branch => {
                let gv = f.input(gaze.clone());
                Some(match branch {
                    GazeBranch::Dsge(p) => p.forward(f, gv)?,
                    GazeBranch::Mlp(p) => p.forward(f, gv)?,
                    GazeBranch::None => unreachable!(),
                })
            }
        };
        let fused = match (g, self.cfg.fusion) {
            (None, _) => i_hat,
            (Some(g), FusionKind::Add) => f.graph.add(g, i_hat)?,
            (Some(g), FusionKind::Layer) => self.fusion_layer().fuse(f, g, i_hat)?,
            (Some(g), FusionKind::Ca) => self.cross_block().forward(f, g, tokens.unwrap(), i_hat)?,
            (Some(g), FusionKind::CaLayer) => {
                let ca = self.cross_block().forward(f, g, tokens.unwrap(), i_hat)?;
                self.fusion_layer().fuse(f, ca, i_hat)?
            }
        };
        let logits = self.head.logits(f, fused)?;
        Ok(Features {
            image: i_hat,
            gaze: g,
            fused,
            logits,
        })
    }

    pub fn logits(&self, f: &mut Forward, image: &Tensor, gaze: &Tensor) -> Result<Var> {
        Ok(self.features(f, image, gaze)?.logits)
    }

    /// Class probabilities in evaluation mode.
    pub fn predict(&self, store: &ParamStore, image: &Tensor, gaze: &Tensor) -> Result<Vec<f64>> {
        let mut f = Forward::eval(store);
        let z = self.logits(&mut f, image, gaze)?;
        Ok(softmax_last(f.graph.value(z)).into_data())
    }

    fn fusion_layer(&self) -> &FusionParams {
        self.fusion.as_ref().expect("fusion layer exists for this variant")
    }

    fn cross_block(&self) -> &CrossAttentionParams {
        self.cross.as_ref().expect("cross-attention exists for this variant")
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
