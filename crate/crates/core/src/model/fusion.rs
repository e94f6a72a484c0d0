use rand::Rng;

use super::{bias, weight, Forward, Init};
use crate::error::{dim_err, Result};
use crate::nd::{ParamId, ParamStore, Var};

fn check_vec(f: &Forward, v: Var, dim: usize, what: &str) -> Result<()> {
    let shape = f.graph.value(v).shape();
    if shape != [dim] {
        return Err(dim_err!("{what} must be a {dim}-vector, got {shape:?}"));
    }
    Ok(())
}

/// Concatenation fusion with an image-feature skip connection:
/// `f″ = W3 · [g; Î] + b3 + Î`.
#[derive(Clone, Debug)]
pub struct FusionParams {
    dim: usize,
    w3: ParamId,
    b3: ParamId,
}

impl FusionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FusionParams {
            dim,
            w3: weight(store, format!("{prefix}.w3"), &[dim, 2 * dim], Init::FanIn, rng)?,
            b3: bias(store, format!("{prefix}.b3"), dim, 2 * dim, Init::FanIn, rng)?,
        })
    }

    pub fn ids(&self) -> (ParamId, ParamId) {
        (self.w3, self.b3)
    }

    /// The `2D` concatenation `[g; Î]`.
    pub fn concat(&self, f: &mut Forward, g: Var, i_hat: Var) -> Result<Var> {
        check_vec(f, g, self.dim, "gaze feature")?;
        check_vec(f, i_hat, self.dim, "image feature")?;
        f.graph.concat_last(&[g, i_hat])
    }

    pub fn fuse(&self, f: &mut Forward, g: Var, i_hat: Var) -> Result<Var> {
        let cat = self.concat(f, g, i_hat)?;
        let proj = f.linear(cat, self.w3, self.b3)?;
        f.graph.add(proj, i_hat)
    }
}

/// Final affine map to class logits.
#[derive(Clone, Debug)]
pub struct ClassifierParams {
    dim: usize,
    classes: usize,
    w4: ParamId,
    b4: ParamId,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ClassifierParams {
            dim,
            classes,
            w4: weight(store, format!("{prefix}.w4"), &[classes, dim], Init::Normal, rng)?,
            b4: bias(store, format!("{prefix}.b4"), classes, dim, Init::Normal, rng)?,
        })
    }

    pub fn ids(&self) -> (ParamId, ParamId) {
        (self.w4, self.b4)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn logits(&self, f: &mut Forward, x: Var) -> Result<Var> {
        check_vec(f, x, self.dim, "classifier input")?;
        f.linear(x, self.w4, self.b4)
    }

    /// Softmax class probabilities.
    pub fn classify(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let z = self.logits(f, x)?;
        f.graph.softmax_rows(z)
    }
}

/// One cross-attention block: the gaze feature queries the image tokens and
/// the attended value, projected by `W^O`, is added to `Î`.
#[derive(Clone, Debug)]
pub struct CrossAttentionParams {
    dim: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    dropout: f64,
}

impl CrossAttentionParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(CrossAttentionParams {
            dim,
            wq: weight(store, format!("{prefix}.wq"), &[dim, dim], Init::FanIn, rng)?,
            wk: weight(store, format!("{prefix}.wk"), &[dim, dim], Init::FanIn, rng)?,
            wv: weight(store, format!("{prefix}.wv"), &[dim, dim], Init::FanIn, rng)?,
            wo: weight(store, format!("{prefix}.wo"), &[dim, dim], Init::FanIn, rng)?,
            dropout,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }

    /// `Î + W^O · softmax(q Kᵀ / √D) V` with `q = W_Q g`, `K = T W_Kᵀ`, `V = T W_Vᵀ`.
    pub fn forward(&self, f: &mut Forward, query: Var, tokens: Var, i_hat: Var) -> Result<Var> {
        check_vec(f, query, self.dim, "cross-attention query")?;
        check_vec(f, i_hat, self.dim, "image feature")?;
        let shape = f.graph.value(tokens).shape();
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(dim_err!(
                "cross-attention tokens must be Tx{}, got {shape:?}",
                self.dim
            ));
        }
        let q = f.graph.matmul_t(query, f.p(self.wq))?;
        let k = f.graph.matmul_t(tokens, f.p(self.wk))?;
        let v = f.graph.matmul_t(tokens, f.p(self.wv))?;
        let scores = f.graph.matmul_t(q, k)?;
        let scores = f.graph.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
        let a = f.graph.softmax_rows(scores)?;
        f.note_attention(a);
        let ctx = f.graph.matmul(a, v)?;
        let out = f.graph.matmul_t(ctx, f.p(self.wo))?;
        let out = f.dropout(out, self.dropout)?;
        f.graph.add(i_hat, out)
    }
}
