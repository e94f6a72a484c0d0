//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass. Every operation appends a node whose
//! inputs are earlier nodes, so the node vector is already in topological
//! order and [`Graph::backward`] is a single reverse sweep. Gradients that
//! reach a node from several consumers are summed.
//!
//! Leaves can borrow their tensors (`Graph<'p>` borrows parameters for `'p`),
//! which keeps binding a large parameter set onto a fresh graph free.

use std::borrow::Cow;

use rand::Rng;

use super::tensor::{gemm, Tensor};
use crate::error::{config_err, data_err, dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatLast(Vec<Var>),
    SliceLast { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SelectRow { x: Var, row: usize },
    Reshape(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward pass.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    backward_done: bool,
    fault: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when no gradient reached `v` (or `v` does not participate).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            fault: false,
        }
    }

    /// Deliberately breaks the ReLU backward rule (doubles its gradient).
    /// Only meant as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self) {
        self.fault = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, what: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, requires_grad))
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Borrowed leaf excluded from differentiation.
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Owned leaf excluded from differentiation (inputs, targets).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// `a · b`, or `a · bᵀ` when `trans_b` is set. `a` may be a vector, which
    /// is treated as a single row and yields a vector.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(dim_err!("matmul: left operand {sa:?} must be rank 1 or 2")),
        };
        if sb.len() != 2 {
            return Err(dim_err!("matmul: right operand {sb:?} must be a matrix"));
        }
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            let shown = if trans_b { "transposed " } else { "" };
            return Err(dim_err!(
                "matmul: inner extents differ for {sa:?} and {shown}{sb:?}"
            ));
        }
        let out_shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let value = Tensor::new(&out_shape, out)?;
        self.push_op("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut value = self.value(a).clone();
        value.axpy(1.0, self.value(b));
        self.push_op("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds a vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.shape(bias) != [c] {
            return Err(dim_err!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data();
        for row in value.data_mut().chunks_mut(c) {
            for (v, bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
        self.push_op("add_bias", value, Op::AddBias { x, bias }, &[x, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let bv = self.value(b).data();
        let mut value = self.value(a).clone();
        for (v, w) in value.data_mut().iter_mut().zip(bv) {
            *v *= w;
        }
        self.push_op("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        self.push_op("scale", value, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push_op("relu", value, Op::Relu(x), &[x])
    }

    /// Softmax along the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_last(self.value(x));
        self.push_op("softmax_rows", value, Op::SoftmaxRows(x), &[x])
    }

    /// Standardizes each row with its mean and population variance, then
    /// applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(config_err!("layer_norm: eps must be positive, got {eps}"));
        }
        let xv = self.value(x);
        let c = xv.cols();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(dim_err!(
                "layer_norm: gamma {:?} / beta {:?} must both be [{c}]",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push_op("layer_norm", value, op, &[x, gamma, beta])
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err!("concat_last: nothing to concatenate"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(dim_err!(
                    "concat_last: {:?} does not match leading axes of {:?}",
                    s,
                    self.shape(first)
                ));
            }
            total += s[s.len() - 1];
        }
        let rows = self.value(first).rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        self.push_op("concat_last", value, Op::ConcatLast(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return Err(dim_err!(
                "slice_last: range {start}..{} outside last axis of {:?}",
                start + len,
                xv.shape()
            ));
        }
        let mut out = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let value = Tensor::new(&shape, out)?;
        self.push_op("slice_last", value, Op::SliceLast { x, start }, &[x])
    }

    /// Stacks matrices (or vectors, as single rows) along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| dim_err!("concat_rows: nothing to concatenate"))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() > 2 || self.value(p).cols() != c {
                return Err(dim_err!("concat_rows: {s:?} cannot stack with width {c}"));
            }
            rows += self.value(p).rows();
        }
        let mut out = Vec::with_capacity(rows * c);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[rows, c], out)?;
        self.push_op("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row `row` of a matrix, as a vector.
    pub fn select_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || row >= xv.shape()[0] {
            return Err(dim_err!("select_row: row {row} of {:?}", xv.shape()));
        }
        let value = Tensor::vector(xv.row(row).to_vec());
        self.push_op("select_row", value, Op::SelectRow { x, row }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push_op("reshape", value, Op::Reshape(x), &[x])
    }

    /// Inverted dropout. In evaluation mode, or with `rate == 0`, this returns
    /// `x` itself so the output is bit-identical to the input.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(config_err!("dropout rate must lie in [0, 1), got {rate}"));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mut value = self.value(x).clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push_op("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push_op("sum", value, Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`,
    /// computed through log-softmax. `logits` is `B×C` (or a single `C`-vector).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if lv.rank() > 2 || labels.len() != b {
            return Err(dim_err!(
                "cross_entropy: {} labels for logits {:?}",
                labels.len(),
                lv.shape()
            ));
        }
        if let Some(i) = labels.iter().position(|&l| l >= c) {
            return Err(data_err!(
                "cross_entropy: sample {i} has label {} but only {c} classes",
                labels[i]
            ));
        }
        let probs = softmax_last(lv).into_data();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        let value = Tensor::scalar(loss / b as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push_op("cross_entropy", value, op, &[logits])
    }

    /// Propagates d`loss`/d(node) back to every node that requires a gradient.
    ///
    /// A graph can be differentiated once; record a new pass to differentiate again.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph(
                "backward on a value detached from every gradient-enabled leaf".into(),
            ));
        }
        self.backward_done = true;

        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        // Zero-initialized accumulation buffer for `v`, or `None` if `v` takes
        // no part in differentiation.
        fn slot<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node<'_>],
            v: Var,
        ) -> Option<&'g mut Vec<f64>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let out = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b, trans_b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    let (m, k) = (av.rows(), av.cols());
                    let n = out.cols();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, &g, false, bv.data(), !trans_b, da, true);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        if *trans_b {
                            // B is n×k: dB = dCᵀ · A
                            gemm(n, m, k, &g, true, av.data(), false, db, true);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, av.data(), true, &g, false, db, true);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(d) = slot(&mut grads, nodes, *v) {
                            add_into(d, &g);
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        add_into(dx, &g);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *bias) {
                        let c = db.len();
                        for row in g.chunks(c) {
                            add_into(db, row);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data();
                    let bv = nodes[b.0].value.data();
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        for ((d, gi), bi) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        for ((d, gi), ai) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * ai;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (d, gi) in dx.iter_mut().zip(&g) {
                            *d += s * gi;
                        }
                    }
                }
                Op::Relu(x) => {
                    let factor = if self.fault { 2.0 } else { 1.0 };
                    let xv = nodes[x.0].value.data();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for ((d, gi), xi) in dx.iter_mut().zip(&g).zip(xv) {
                            if *xi > 0.0 {
                                *d += factor * gi;
                            }
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let c = out.cols();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for ((drow, grow), yrow) in dx
                            .chunks_mut(c)
                            .zip(g.chunks(c))
                            .zip(out.data().chunks(c))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                drow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let c = out.cols();
                    let gam = nodes[gamma.0].value.data();
                    if let Some(dg) = slot(&mut grads, nodes, *gamma) {
                        for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += grow[j] * hrow[j];
                            }
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *beta) {
                        for grow in g.chunks(c) {
                            add_into(db, grow);
                        }
                    }
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        let mut dh = vec![0.0; c];
                        for (r, ((drow, grow), hrow)) in dx
                            .chunks_mut(c)
                            .zip(g.chunks(c))
                            .zip(xhat.chunks(c))
                            .enumerate()
                        {
                            for j in 0..c {
                                dh[j] = grow[j] * gam[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / c as f64;
                            let mean_dh_h =
                                dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                drow[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::ConcatLast(parts) => {
                    let total = out.cols();
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(dp) = slot(&mut grads, nodes, *p) {
                            for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(drow, &grow[offset..offset + w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceLast { x, start } => {
                    let w = out.cols();
                    let c = nodes[x.0].value.cols();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(w)) {
                            add_into(&mut drow[*start..start + w], grow);
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = nodes[p.0].value.len();
                        if let Some(dp) = slot(&mut grads, nodes, *p) {
                            add_into(dp, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::SelectRow { x, row } => {
                    let c = out.len();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        add_into(&mut dx[row * c..(row + 1) * c], &g);
                    }
                }
                Op::Reshape(x) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        add_into(dx, &g);
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for ((d, gi), m) in dx.iter_mut().zip(&g).zip(mask) {
                            *d += gi * m;
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for d in dx.iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = nodes[logits.0].value.cols();
                    let scale = g[0] / labels.len() as f64;
                    if let Some(dl) = slot(&mut grads, nodes, *logits) {
                        for (r, &label) in labels.iter().enumerate() {
                            for j in 0..c {
                                let target = if j == label { 1.0 } else { 0.0 };
                                dl[r * c + j] += scale * (probs[r * c + j] - target);
                            }
                        }
                    }
                }
            }
        }

        let grads = grads
            .into_iter()
            .zip(nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(
                    Tensor::new(node.value.shape(), g).expect("gradient matches value shape"),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_last(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
