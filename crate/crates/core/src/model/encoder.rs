use rand::Rng;

use super::{bias, ones, weight, zeros, Forward, Init, LN_EPS};
use crate::error::{config_err, dim_err, Result};
use crate::nd::{ParamId, ParamStore, Var};

/// Post-norm transformer encoder layer: multi-head self-attention with a
/// residual and LayerNorm, then a ReLU feed-forward block with a residual and
/// LayerNorm. Q, K and V are bias-free projections of the layer input.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    width: usize,
    heads: usize,
    dropout: f64,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

impl EncoderLayer {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        heads: usize,
        ffn_hidden: usize,
        dropout: f64,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(config_err!(
                "width {width} is not divisible by {heads} attention heads"
            ));
        }
        let n = |s: &str| format!("{prefix}.{s}");
        Ok(EncoderLayer {
            width,
            heads,
            dropout,
            wq: weight(store, n("wq"), &[width, width], init, rng)?,
            wk: weight(store, n("wk"), &[width, width], init, rng)?,
            wv: weight(store, n("wv"), &[width, width], init, rng)?,
            wo: weight(store, n("wo"), &[width, width], init, rng)?,
            ln1_gamma: ones(store, n("ln1.gamma"), &[width])?,
            ln1_beta: zeros(store, n("ln1.beta"), &[width])?,
            ff1_w: weight(store, n("ff1.w"), &[ffn_hidden, width], init, rng)?,
            ff1_b: bias(store, n("ff1.b"), ffn_hidden, width, init, rng)?,
            ff2_w: weight(store, n("ff2.w"), &[width, ffn_hidden], init, rng)?,
            ff2_b: bias(store, n("ff2.b"), width, ffn_hidden, init, rng)?,
            ln2_gamma: ones(store, n("ln2.gamma"), &[width])?,
            ln2_beta: zeros(store, n("ln2.beta"), &[width])?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Multi-head self-attention, concatenated heads projected by `W^O`.
    pub fn attention(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let shape = f.graph.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.width {
            return Err(dim_err!(
                "encoder layer of width {} got input {shape:?}",
                self.width
            ));
        }
        let q = f.graph.matmul_t(x, f.p(self.wq))?;
        let k = f.graph.matmul_t(x, f.p(self.wk))?;
        let v = f.graph.matmul_t(x, f.p(self.wv))?;
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    f.graph.slice_last(q, h * dh, dh)?,
                    f.graph.slice_last(k, h * dh, dh)?,
                    f.graph.slice_last(v, h * dh, dh)?,
                )
            };
            let scores = f.graph.matmul_t(qh, kh)?;
            let scores = f.graph.scale(scores, scale)?;
            let a = f.graph.softmax_rows(scores)?;
            f.note_attention(a);
            heads.push(f.graph.matmul(a, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            f.graph.concat_last(&heads)?
        };
        f.graph.matmul_t(cat, f.p(self.wo))
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let mha = self.attention(f, x)?;
        let mha = f.dropout(mha, self.dropout)?;
        let res = f.graph.add(x, mha)?;
        let x1 = f
            .graph
            .layer_norm(res, f.p(self.ln1_gamma), f.p(self.ln1_beta), LN_EPS)?;

        let h = f.linear(x1, self.ff1_w, self.ff1_b)?;
        let h = f.graph.relu(h)?;
        let ff = f.linear(h, self.ff2_w, self.ff2_b)?;
        let ff = f.dropout(ff, self.dropout)?;
        let res = f.graph.add(x1, ff)?;
        f.graph
            .layer_norm(res, f.p(self.ln2_gamma), f.p(self.ln2_beta), LN_EPS)
    }
}
