//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order; `backward` walks it once in reverse. Values are computed
//! eagerly when a node is pushed.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, RopeTable};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    /// `x · wᵀ` with `w: [out × in]`
    Linear { x: NodeId, w: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, by: f32 },
    Tanh { a: NodeId },
    Sum { a: NodeId },
    SumSquares { a: NodeId },
    Softmax { a: NodeId },
    RmsNorm { x: NodeId, gamma: NodeId, inv: Vec<f32> },
    Rope { x: NodeId, positions: Vec<usize>, table: Arc<RopeTable> },
    Attention { q: NodeId, k: NodeId, v: NodeId, shape: AttentionShape, probs: Vec<f32> },
    SwiGlu { gate: NodeId, up: NodeId },
    Embedding { table: NodeId, ids: Vec<usize> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, count: usize },
    WeightedSum { inputs: Vec<NodeId>, weights: Vec<f64> },
}

struct Node {
    value: Tensor,
    /// Binary64 value for scalar losses, where the reduction is done in f64.
    exact: Option<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f32>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a loss node, in binary64 where available.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        n.exact.unwrap_or(n.value.data()[0] as f64)
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            exact: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: &Tensor) -> NodeId {
        let rg = value.requires_grad;
        self.leaf(value.clone(), rg)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let n_in = xv.cols();
        if wv.shape().len() != 2 || wv.shape()[1] != n_in {
            return Err(Error::Dimension(format!(
                "linear input width {n_in} against weight {:?}",
                wv.shape()
            )));
        }
        let n_out = wv.shape()[0];
        let data = kernels::linear_rows(xv.data(), n_in, wv.data(), n_out);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Linear { x, w }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, by: f32) -> NodeId {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * by).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale { a, by }, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let value = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x.tanh()).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh { a }, rg)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[a]);
        let id = self.push(Tensor::scalar(s as f32), Op::Sum { a }, rg);
        self.nodes[id.0].exact = Some(s);
        id
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|&v| (v as f64).powi(2)).sum();
        let rg = self.rg(&[a]);
        let id = self.push(Tensor::scalar(s as f32), Op::SumSquares { a }, rg);
        self.nodes[id.0].exact = Some(s);
        id
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let value = crate::tensor::softmax(av, av.shape().len() - 1)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax { a }, rg))
    }

    pub fn rmsnorm(&mut self, x: NodeId, gamma: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gamma));
        let d = xv.cols();
        if gv.numel() != d {
            return Err(Error::Dimension(format!("rmsnorm gain {:?} for width {d}", gv.shape())));
        }
        let mut out = Tensor::zeros(xv.shape());
        let mut inv = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            inv.push(kernels::rmsnorm_row(xv.row(r), gv.data(), eps, out.row_mut(r)));
        }
        let rg = self.rg(&[x, gamma]);
        Ok(self.push(out, Op::RmsNorm { x, gamma, inv }, rg))
    }

    /// Rotary embedding; `positions[r]` is the position of row `r`.
    pub fn rope(&mut self, x: NodeId, positions: Vec<usize>, table: Arc<RopeTable>) -> Result<NodeId> {
        let xv = self.value(x);
        if positions.len() != xv.rows() {
            return Err(Error::Dimension(format!(
                "{} positions for {} rows",
                positions.len(),
                xv.rows()
            )));
        }
        if let Some(&p) = positions.iter().max() {
            if p >= table.positions() {
                return Err(Error::Input(format!("position {p} beyond rotary table")));
            }
        }
        let mut out = xv.clone();
        out.requires_grad = false;
        for (r, &p) in positions.iter().enumerate() {
            table.rotate(out.row_mut(r), p);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Rope { x, positions, table }, rg))
    }

    /// Causal grouped-query attention. Rows are `batch × seq` positions; query
    /// head `h` reads key/value head `h / (q_heads / kv_heads)`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, shape: AttentionShape) -> Result<NodeId> {
        let AttentionShape {
            batch,
            seq,
            q_heads,
            kv_heads,
            head_dim,
        } = shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qw, kw) = (q_heads * head_dim, kv_heads * head_dim);
        if qv.cols() != qw || kv.cols() != kw || vv.cols() != kw {
            return Err(Error::Dimension("attention projection widths".into()));
        }
        if qv.rows() != batch * seq || kv.rows() != batch * seq || vv.rows() != batch * seq {
            return Err(Error::Dimension("attention rows".into()));
        }
        if q_heads % kv_heads != 0 {
            return Err(Error::Dimension("q_heads must be a multiple of kv_heads".into()));
        }
        let group = q_heads / kv_heads;
        let scale = 1.0 / (head_dim as f32).sqrt();
        let mut out = vec![0f32; batch * seq * qw];
        let mut probs = vec![0f32; batch * q_heads * seq * seq];
        for b in 0..batch {
            let base = b * seq;
            let keys = &kv.data()[base * kw..(base + seq) * kw];
            let values = &vv.data()[base * kw..(base + seq) * kw];
            for h in 0..q_heads {
                let g = h / group;
                for t in 0..seq {
                    let row = base + t;
                    let qh = &qv.data()[row * qw + h * head_dim..row * qw + (h + 1) * head_dim];
                    let p_off = ((b * q_heads + h) * seq + t) * seq;
                    kernels::attend_row(
                        qh,
                        keys,
                        values,
                        kw,
                        g * head_dim,
                        t,
                        scale,
                        &mut probs[p_off..p_off + seq],
                        &mut out[row * qw + h * head_dim..row * qw + (h + 1) * head_dim],
                    );
                }
            }
        }
        let value = Tensor::new(vec![batch * seq, qw], out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, shape, probs }, rg))
    }

    pub fn swiglu(&mut self, gate: NodeId, up: NodeId) -> Result<NodeId> {
        let (gv, uv) = (self.value(gate), self.value(up));
        if gv.shape() != uv.shape() {
            return Err(Error::Dimension("swiglu operand shapes".into()));
        }
        let mut out = Tensor::zeros(gv.shape());
        kernels::swiglu_row(gv.data(), uv.data(), out.data_mut());
        let rg = self.rg(&[gate, up]);
        Ok(self.push(out, Op::SwiGlu { gate, up }, rg))
    }

    pub fn embedding(&mut self, table: NodeId, ids: Vec<usize>) -> Result<NodeId> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in &ids {
            if id >= vocab {
                return Err(Error::Input(format!("token id {id} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Embedding { table, ids }, rg))
    }

    /// Mean token cross-entropy over rows whose target is `Some`, reduced in
    /// binary64.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> Result<NodeId> {
        let lv = self.value(logits);
        let vocab = lv.cols();
        if targets.len() != lv.rows() {
            return Err(Error::Dimension(format!(
                "{} targets for {} logit rows",
                targets.len(),
                lv.rows()
            )));
        }
        let mut total = 0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::Input(format!("target {t} outside vocabulary of {vocab}")));
            }
            total += row_nll(lv.row(r), t);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data("cross-entropy over zero effective positions".into()));
        }
        let loss = total / count as f64;
        let rg = self.rg(&[logits]);
        let id = self.push(Tensor::scalar(loss as f32), Op::CrossEntropy { logits, targets, count }, rg);
        self.nodes[id.0].exact = Some(loss);
        Ok(id)
    }

    /// `Σ w_k · L_k` over scalar nodes, accumulated in binary64.
    pub fn weighted_sum(&mut self, inputs: Vec<NodeId>, weights: Vec<f64>) -> Result<NodeId> {
        if inputs.len() != weights.len() {
            return Err(Error::Config(format!(
                "{} losses but {} weights",
                inputs.len(),
                weights.len()
            )));
        }
        let values: Vec<f64> = inputs.iter().map(|&i| self.scalar(i)).collect();
        let total = crate::train::joint_loss(&values, &weights)?;
        let rg = self.rg(&inputs);
        let id = self.push(Tensor::scalar(total as f32), Op::WeightedSum { inputs, weights }, rg);
        self.nodes[id.0].exact = Some(total);
        Ok(id)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = &self.nodes[loss.0];
        if node.value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        if !node.requires_grad {
            return Err(Error::Graph("loss is detached from every trainable parameter".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    // dA = dC · Bᵀ: rows of B are the columns we need.
                    let da = kernels::linear_rows(g, n, bv.data(), k);
                    accumulate(grads, *a, &da);
                }
                if wants(*b) {
                    let mut db = vec![0f32; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for t in 0..k {
                            kernels::axpy(av.data()[r * k + t], grow, &mut db[t * n..(t + 1) * n]);
                        }
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n_in, n_out) = (xv.cols(), wv.shape()[0]);
                let rows = xv.rows();
                if wants(*x) {
                    let mut dx = vec![0f32; rows * n_in];
                    for r in 0..rows {
                        let dst = &mut dx[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            let go = g[r * n_out + o];
                            if go != 0.0 {
                                kernels::axpy(go, &wv.data()[o * n_in..(o + 1) * n_in], dst);
                            }
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
                if wants(*w) {
                    let mut dw = vec![0f32; n_out * n_in];
                    for r in 0..rows {
                        let xr = xv.row(r);
                        for o in 0..n_out {
                            let go = g[r * n_out + o];
                            if go != 0.0 {
                                kernels::axpy(go, xr, &mut dw[o * n_in..(o + 1) * n_in]);
                            }
                        }
                    }
                    accumulate(grads, *w, &dw);
                }
            }
            Op::Add { a, b } => {
                if wants(*a) {
                    accumulate(grads, *a, g);
                }
                if wants(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Scale { a, by } => {
                let d: Vec<f32> = g.iter().map(|v| v * by).collect();
                accumulate(grads, *a, &d);
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                let d: Vec<f32> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(grads, *a, &d);
            }
            Op::Sum { a } => {
                let d = vec![g[0]; self.value(*a).numel()];
                accumulate(grads, *a, &d);
            }
            Op::SumSquares { a } => {
                let d: Vec<f32> = self.value(*a).data().iter().map(|x| 2.0 * x * g[0]).collect();
                accumulate(grads, *a, &d);
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0f32; y.numel()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let inner = kernels::dot(yr, gr);
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::RmsNorm { x, gamma, inv } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let d = xv.cols();
                if wants(*x) {
                    let mut dx = vec![0f32; xv.numel()];
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let s = inv[r];
                        let mut proj = 0f64;
                        for j in 0..d {
                            proj += (gr[j] * gv.data()[j]) as f64 * xr[j] as f64;
                        }
                        let coef = (proj * (s as f64).powi(3) / d as f64) as f32;
                        for j in 0..d {
                            dx[r * d + j] = s * gv.data()[j] * gr[j] - xr[j] * coef;
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
                if wants(*gamma) {
                    let mut dg = vec![0f32; d];
                    for r in 0..xv.rows() {
                        let xr = xv.row(r);
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xr[j] * inv[r];
                        }
                    }
                    accumulate(grads, *gamma, &dg);
                }
            }
            Op::Rope { x, positions, table } => {
                let c = node.value.cols();
                let mut d = g.to_vec();
                for (r, &p) in positions.iter().enumerate() {
                    table.rotate_back(&mut d[r * c..(r + 1) * c], p);
                }
                accumulate(grads, *x, &d);
            }
            Op::Attention { q, k, v, shape, probs } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *shape, probs, g);
                if wants(*q) {
                    accumulate(grads, *q, &dq);
                }
                if wants(*k) {
                    accumulate(grads, *k, &dk);
                }
                if wants(*v) {
                    accumulate(grads, *v, &dv);
                }
            }
            Op::SwiGlu { gate, up } => {
                let (gv, uv) = (self.value(*gate), self.value(*up));
                if wants(*gate) {
                    let d: Vec<f32> = g
                        .iter()
                        .zip(gv.data())
                        .zip(uv.data())
                        .map(|((g, &x), &u)| {
                            let s = kernels::sigmoid(x);
                            g * u * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    accumulate(grads, *gate, &d);
                }
                if wants(*up) {
                    let d: Vec<f32> = g.iter().zip(gv.data()).map(|(g, &x)| g * kernels::silu(x)).collect();
                    accumulate(grads, *up, &d);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0f32; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                }
                accumulate(grads, *table, &dt);
            }
            Op::CrossEntropy { logits, targets, count } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let mut d = vec![0f32; lv.numel()];
                let scale = g[0] as f64 / *count as f64;
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = lv.row(r);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
                    let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
                    for j in 0..c {
                        let p = (row[j] as f64 - max).exp() / z;
                        let y = if j == t { 1.0 } else { 0.0 };
                        d[r * c + j] = ((p - y) * scale) as f32;
                    }
                }
                accumulate(grads, *logits, &d);
            }
            Op::WeightedSum { inputs, weights } => {
                for (id, w) in inputs.iter().zip(weights) {
                    if wants(*id) {
                        accumulate(grads, *id, &[(g[0] as f64 * w) as f32]);
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        shape: AttentionShape,
        probs: &[f32],
        g: &[f32],
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let AttentionShape {
            batch,
            seq,
            q_heads,
            kv_heads,
            head_dim: hd,
        } = shape;
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (qw, kw) = (q_heads * hd, kv_heads * hd);
        let group = q_heads / kv_heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut dq = vec![0f32; qv.len()];
        let mut dk = vec![0f32; kv.len()];
        let mut dv = vec![0f32; vv.len()];
        let mut dp = vec![0f32; seq];
        for b in 0..batch {
            let base = b * seq;
            for h in 0..q_heads {
                let kh = (h / group) * hd;
                for t in 0..seq {
                    let row = base + t;
                    let go = &g[row * qw + h * hd..row * qw + (h + 1) * hd];
                    let p = &probs[((b * q_heads + h) * seq + t) * seq..][..=t];
                    let mut inner = 0f32;
                    for j in 0..=t {
                        let vj = &vv[(base + j) * kw + kh..(base + j) * kw + kh + hd];
                        dp[j] = kernels::dot(go, vj);
                        inner += p[j] * dp[j];
                        kernels::axpy(p[j], go, &mut dv[(base + j) * kw + kh..(base + j) * kw + kh + hd]);
                    }
                    let qh = &qv[row * qw + h * hd..row * qw + (h + 1) * hd];
                    for j in 0..=t {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv[(base + j) * kw + kh..(base + j) * kw + kh + hd];
                        kernels::axpy(ds, kj, &mut dq[row * qw + h * hd..row * qw + (h + 1) * hd]);
                        kernels::axpy(ds, qh, &mut dk[(base + j) * kw + kh..(base + j) * kw + kh + hd]);
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], id: NodeId, g: &[f32]) {
    match &mut grads[id.0] {
        Some(acc) => kernels::axpy(1.0, g, acc),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Negative log-softmax of `row` at `target`, in binary64.
pub fn row_nll(row: &[f32], target: usize) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    lse - row[target] as f64
}
