//! Finite-difference gradient checks of every model module at tiny sizes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{
    ClassifierParams, CrossAttentionParams, DsgeConfig, DsgeParams, Forward, FusionParams,
    VitConfig, VitParams,
};
use crate::nd::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Var};

/// Default finite-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Pass threshold on the maximum relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Outcome for one module.
#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: &'static str,
    pub report: GradCheckReport,
    /// Parameter names in tensor order, for reporting the worst coordinate.
    pub names: Vec<String>,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }

    pub fn worst_description(&self) -> String {
        match &self.report.worst {
            Some(w) => format!(
                "{}[{}]: analytic {:.6e}, numeric {:.6e}",
                self.names[w.tensor], w.index, w.analytic, w.numeric
            ),
            None => "no coordinates".into(),
        }
    }
}

const CLASSES: usize = 3;
const LABEL: usize = 1;

/// Moves the checked point away from the initialization, where many
/// coordinates have near-zero gradients: matrices are redrawn from
/// `N(0, gain² / fan_in)`, vectors (biases, LayerNorm affines, the class token) get
/// `N(0, 0.1²)` added so LayerNorm gains stay near 1 and token rows stay distinct.
fn spread(store: &mut ParamStore, gain: f64, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        if t.rank() >= 2 {
            let fan_in = t.cols() as f64;
            *t = Tensor::randn(t.shape(), gain / fan_in.sqrt(), rng);
        } else {
            let noise = Tensor::randn(t.shape(), 0.1, rng);
            t.axpy(1.0, &noise);
        }
    }
}

fn run<F>(
    module: &'static str,
    mut store: ParamStore,
    eps: f64,
    fault: bool,
    f: F,
) -> Result<ModuleCheck>
where
    F: Fn(&mut Forward) -> Result<Var>,
{
    let names = store.names().to_vec();
    let report = grad_check(store.tensors_mut(), eps, |g: &mut Graph<'_>, vars: &[Var]| {
        if fault {
            g.inject_backward_fault();
        }
        let graph = std::mem::take(g);
        let mut fw = Forward::from_parts(graph, vars.to_vec(), false, 0);
        let out = f(&mut fw);
        *g = fw.graph;
        out
    })?;
    Ok(ModuleCheck {
        module,
        report,
        names,
    })
}

fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(&[rows, cols], data).expect("shape matches")
}

/// Gaze encoder (`L=8, d=16, H=2, l=2`) feeding a 3-class classifier.
pub fn check_dsge(eps: f64, fault: bool) -> Result<ModuleCheck> {
    check_dsge_seeded(11, eps, fault)
}

pub(crate) fn check_dsge_seeded(seed: u64, eps: f64, fault: bool) -> Result<ModuleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DsgeConfig {
        seq_len: 8,
        hidden: 16,
        heads: 2,
        layers: 2,
        out_dim: 16,
        dropout: 0.0,
        ..DsgeConfig::default()
    };
    let mut store = ParamStore::new();
    let dsge = DsgeParams::init(&cfg, &mut store, "dsge", &mut rng)?;
    let head = ClassifierParams::init(&mut store, "head", 16, CLASSES, &mut rng)?;
    spread(&mut store, 1.0, &mut rng);
    let gaze = random_matrix(8, 2, 0.0, 8.0, &mut rng);
    run("dsge", store, eps, fault, |f| {
        let g = f.input(gaze.clone());
        let feat = dsge.forward(f, g)?;
        let z = head.logits(f, feat)?;
        f.graph.cross_entropy(z, &[LABEL])
    })
}

/// Image encoder (16×16 input, 8×8 patches, `D=16`, 2 layers).
pub fn check_vit(eps: f64, fault: bool) -> Result<ModuleCheck> {
    check_vit_seeded(12, eps, fault)
}

pub(crate) fn check_vit_seeded(seed: u64, eps: f64, fault: bool) -> Result<ModuleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = VitConfig {
        image_size: 16,
        patch_size: 8,
        dim: 16,
        layers: 2,
        heads: 2,
        ffn_hidden: None,
        dropout: 0.0,
    };
    let mut store = ParamStore::new();
    let vit = VitParams::init(&cfg, &mut store, "vit", &mut rng)?;
    let head = ClassifierParams::init(&mut store, "head", 16, CLASSES, &mut rng)?;
    spread(&mut store, 1.0, &mut rng);
    let img = Tensor::new(
        &[3, 16, 16],
        (0..3 * 256).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    run("vit", store, eps, fault, |f| {
        let feat = vit.forward(f, &img)?;
        let z = head.logits(f, feat)?;
        f.graph.cross_entropy(z, &[LABEL])
    })
}

/// Fusion layer (`D=16`) and classifier (`C=3`), with the two input
/// features as trainable leaves as well.
pub fn check_fusion(eps: f64, fault: bool) -> Result<ModuleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let fusion = FusionParams::init(&mut store, "fusion", 16, &mut rng)?;
    let head = ClassifierParams::init(&mut store, "head", 16, CLASSES, &mut rng)?;
    let g_id = store.add("input.g", Tensor::zeros(&[16]))?;
    let i_id = store.add("input.i_hat", Tensor::zeros(&[16]))?;
    spread(&mut store, 1.0, &mut rng);
    run("fusion", store, eps, fault, |f| {
        let fused = fusion.fuse(f, f.p(g_id), f.p(i_id))?;
        let z = head.logits(f, fused)?;
        f.graph.cross_entropy(z, &[LABEL])
    })
}

/// Cross-attention block (`D=16`, 5 image tokens), with its query, tokens
/// and image feature as trainable leaves.
pub fn check_cross_attention(eps: f64, fault: bool) -> Result<ModuleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut store = ParamStore::new();
    let ca = CrossAttentionParams::init(&mut store, "ca", 16, 0.0, &mut rng)?;
    let head = ClassifierParams::init(&mut store, "head", 16, CLASSES, &mut rng)?;
    let q_id = store.add("input.query", Tensor::zeros(&[16]))?;
    let t_id = store.add("input.tokens", Tensor::zeros(&[5, 16]))?;
    let i_id = store.add("input.i_hat", Tensor::zeros(&[16]))?;
    spread(&mut store, 1.0, &mut rng);
    run("cross-attention", store, eps, fault, |f| {
        let out = ca.forward(f, f.p(q_id), f.p(t_id), f.p(i_id))?;
        let z = head.logits(f, out)?;
        f.graph.cross_entropy(z, &[LABEL])
    })
}

/// All four module checks in a fixed order.
pub fn check_all(eps: f64, fault: bool) -> Result<Vec<ModuleCheck>> {
    Ok(vec![
        check_dsge(eps, fault)?,
        check_vit(eps, fault)?,
        check_fusion(eps, fault)?,
        check_cross_attention(eps, fault)?,
    ])
}
