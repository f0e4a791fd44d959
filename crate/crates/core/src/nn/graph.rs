//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! as leaves tagged trainable or frozen; [`Graph::backward`] walks the tape in
//! reverse and only propagates into nodes that depend on a trainable leaf, so
//! frozen parameters never receive a gradient entry.
//!
//! Nondifferentiable points use fixed conventions: `|x|` and `relu` have
//! derivative 0 at 0, and constant masks (indicator gates) carry no gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamSet, PartitionSet};
use super::tensor::{gemm_acc, Tensor};
use crate::error::{IlsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddTiled(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulConst(NodeId, Tensor),
    Scale(NodeId, f64),
    Relu(NodeId),
    Abs(NodeId),
    Square(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    MeanGroups(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    ActionSquash {
        x: NodeId,
        trans_scale: f64,
        rot_scale: f64,
    },
    RowSum(NodeId),
    WeightedSum(NodeId, Tensor),
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, whose value lives in the parameter set.
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Dropout applied in training mode with a seeded mask stream.
pub struct DropoutCtx {
    pub prob: f64,
    pub rng: ChaCha8Rng,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    trainable: Vec<bool>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    dropout: Option<DropoutCtx>,
}

impl<'p> Graph<'p> {
    /// A graph whose trainable leaves are the parameters in `trainable`.
    pub fn new(params: &'p ParamSet, trainable: &PartitionSet) -> Self {
        let flags = params
            .entries()
            .iter()
            .map(|e| trainable.contains(&e.partition))
            .collect();
        Graph {
            params,
            trainable: flags,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
            dropout: None,
        }
    }

    /// Inference-only graph: nothing is trainable.
    pub fn inference(params: &'p ParamSet) -> Self {
        Self::new(params, &PartitionSet::new())
    }

    pub fn with_dropout(mut self, ctx: Option<DropoutCtx>) -> Self {
        self.dropout = ctx.filter(|c| c.prob > 0.0);
        self
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(i), _) => &self.params.entry(*i).value,
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(ctx: &str, a: &Tensor, b: &Tensor) -> IlsaError {
        IlsaError::structural(
            ctx,
            format!("[{}, {}] vs [{}, {}]", a.rows(), a.cols(), b.rows(), b.cols()),
        )
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value: Some(t),
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let id = self.params.id(name)?;
        if let Some(n) = self.param_nodes[id] {
            return Ok(n);
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: self.trainable[id],
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id] = Some(n);
        Ok(n)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Self::shape_err("matmul", va, vb));
        }
        let mut out = Tensor::zeros(va.rows(), vb.cols());
        gemm_acc(va, false, vb, false, &mut out);
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    /// `x + b` with the 1×d row `b` broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Self::shape_err("add_bias", vx, vb));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += bb;
            }
        }
        Ok(self.push(Op::AddBias(x, b), out, &[x, b]))
    }

    /// `x + e` where row `r` of `x` receives row `r mod T` of the T×d table `e`.
    pub fn add_tiled(&mut self, x: NodeId, e: NodeId) -> Result<NodeId> {
        let (vx, ve) = (self.value(x), self.value(e));
        if ve.cols() != vx.cols() || ve.rows() == 0 || vx.rows() % ve.rows() != 0 {
            return Err(Self::shape_err("add_tiled", vx, ve));
        }
        let t = ve.rows();
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, bb) in out.row_mut(r).iter_mut().zip(ve.row(r % t)) {
                *o += bb;
            }
        }
        Ok(self.push(Op::AddTiled(x, e), out, &[x, e]))
    }

    fn zip_op(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Self::shape_err(name, va, vb));
        }
        let mut out = va.clone();
        for (o, y) in out.data_mut().iter_mut().zip(vb.data()) {
            *o = f(*o, *y);
        }
        Ok(out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    /// Elementwise product with a constant (no gradient into the constant).
    pub fn mul_const(&mut self, a: NodeId, c: Tensor) -> Result<NodeId> {
        let va = self.value(a);
        if !va.same_shape(&c) {
            return Err(Self::shape_err("mul_const", va, &c));
        }
        let mut out = va.clone();
        for (o, y) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= y;
        }
        Ok(self.push(Op::MulConst(a, c), out, &[a]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        self.push(Op::Scale(a, s), out, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), out, &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), out, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v * v);
        self.push(Op::Square(a), out, &[a])
    }

    /// Row-wise layer normalisation with learned gain and bias (1×d each).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = vx.cols();
        if vg.cols() != d || vb.cols() != d || vg.rows() != 1 || vb.rows() != 1 {
            return Err(Self::shape_err("layer_norm", vx, vg));
        }
        let mut xhat = Tensor::zeros(vx.rows(), d);
        let mut out = Tensor::zeros(vx.rows(), d);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * vg.data()[c] + vb.data()[c]);
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
            &[x, gamma, beta],
        ))
    }

    /// Multi-head scaled dot-product self-attention, independently within each
    /// block of `group` consecutive rows (one block per sample).
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, group: usize, heads: usize) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if !vq.same_shape(vk) || !vq.same_shape(vv) {
            return Err(Self::shape_err("attention", vq, vk));
        }
        let (n, d) = (vq.rows(), vq.cols());
        if group == 0 || n % group != 0 || heads == 0 || d % heads != 0 {
            return Err(IlsaError::structural(
                "attention",
                format!("{n} rows in groups of {group}, width {d} over {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let blocks = n / group;
        let mut probs = vec![0.0; blocks * heads * group * group];
        let mut out = Tensor::zeros(n, d);
        let mut scores = vec![0.0; group];
        for b in 0..blocks {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..group {
                    let qi = &vq.row(b * group + i)[c0..c0 + dh];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &vk.row(b * group + j)[c0..c0 + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        mx = mx.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        z += *s;
                    }
                    let base = ((b * heads + h) * group + i) * group;
                    for j in 0..group {
                        let p = scores[j] / z;
                        probs[base + j] = p;
                        let vj = &vv.row(b * group + j)[c0..c0 + dh];
                        let orow = &mut out.row_mut(b * group + i)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
            out,
            &[q, k, v],
        ))
    }

    /// Mean over each block of `group` consecutive rows.
    pub fn mean_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if group == 0 || vx.rows() % group != 0 {
            return Err(IlsaError::structural("mean_groups", format!("{} rows in groups of {group}", vx.rows())));
        }
        let blocks = vx.rows() / group;
        let mut out = Tensor::zeros(blocks, vx.cols());
        for b in 0..blocks {
            for i in 0..group {
                let src = vx.row(b * group + i);
                for (o, s) in out.row_mut(b).iter_mut().zip(src) {
                    *o += s;
                }
            }
            for o in out.row_mut(b) {
                *o /= group as f64;
            }
        }
        Ok(self.push(Op::MeanGroups(x, group), out, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(IlsaError::structural("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                let src = self.value(*p).row(r);
                out.row_mut(r)[c0..c0 + src.len()].copy_from_slice(src);
                c0 += src.len();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(IlsaError::structural("slice_cols", format!("[{start}, {}) of {}", start + len, vx.cols())));
        }
        let mut out = Tensor::zeros(vx.rows(), len);
        for r in 0..vx.rows() {
            out.row_mut(r).copy_from_slice(&vx.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols(x, start), out, &[x]))
    }

    /// Bounded action map on n×6 rows: the translational triple goes through a
    /// radial tanh (norm < `trans_scale`), rotations through per-axis tanh
    /// scaled by `rot_scale`.
    pub fn action_squash(&mut self, x: NodeId, trans_scale: f64, rot_scale: f64) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.cols() != 6 {
            return Err(IlsaError::structural("action_squash", format!("expected 6 columns, got {}", vx.cols())));
        }
        let mut out = Tensor::zeros(vx.rows(), 6);
        for r in 0..vx.rows() {
            let z = vx.row(r);
            let f = radial_factor(norm3(z));
            let o = out.row_mut(r);
            for i in 0..3 {
                o[i] = trans_scale * f * z[i];
                o[3 + i] = rot_scale * z[3 + i].tanh();
            }
        }
        Ok(self.push(
            Op::ActionSquash {
                x,
                trans_scale,
                rot_scale,
            },
            out,
            &[x],
        ))
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut out = Tensor::zeros(vx.rows(), 1);
        for r in 0..vx.rows() {
            out.set(r, 0, vx.row(r).iter().sum());
        }
        self.push(Op::RowSum(x), out, &[x])
    }

    /// Scalar `Σ w_ij x_ij` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, w: Tensor) -> Result<NodeId> {
        let vx = self.value(x);
        if !vx.same_shape(&w) {
            return Err(Self::shape_err("weighted_sum", vx, &w));
        }
        let s = vx.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Op::WeightedSum(x, w), Tensor::scalar(s), &[x]))
    }

    /// Inverted dropout in training mode; identity otherwise.
    pub fn dropout(&mut self, x: NodeId) -> NodeId {
        let Some(ctx) = self.dropout.as_mut() else {
            return x;
        };
        let keep = 1.0 - ctx.prob;
        let vx = &self.nodes[x.0];
        let (rows, cols) = match (&vx.op, &vx.value) {
            (Op::Param(i), _) => (self.params.entry(*i).value.rows(), self.params.entry(*i).value.cols()),
            (_, Some(v)) => (v.rows(), v.cols()),
            _ => unreachable!(),
        };
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(rows, cols, mask).expect("shape by construction");
        self.mul_const(x, mask).expect("shape by construction")
    }

    /// Reverse pass from a 1×1 node. Returns one entry per parameter; entries
    /// are `None` for frozen parameters and for parameters the loss does not
    /// reach.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(IlsaError::structural("backward", "loss must be a 1x1 node"));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Param(_)) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(n) = node {
                if self.trainable[pid] {
                    out.grads[pid] = Some(
                        grads[n.0]
                            .take()
                            .unwrap_or_else(|| {
                                let v = &self.params.entry(pid).value;
                                Tensor::zeros(v.rows(), v.cols())
                            }),
                    );
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = node.value.as_ref().expect("op nodes own their value");
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let vb = self.value(*b);
                    let acc = slot(grads, *a, g.rows(), vb.rows());
                    gemm_acc(g, false, vb, true, acc);
                }
                if self.wants(*b) {
                    let va = self.value(*a);
                    let acc = slot(grads, *b, va.cols(), g.cols());
                    gemm_acc(va, true, g, false, acc);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    add_into(grads, *x, g);
                }
                if self.wants(*b) {
                    let acc = slot(grads, *b, 1, g.cols());
                    for r in 0..g.rows() {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                }
            }
            Op::AddTiled(x, e) => {
                if self.wants(*x) {
                    add_into(grads, *x, g);
                }
                if self.wants(*e) {
                    let t = self.value(*e).rows();
                    let acc = slot(grads, *e, t, g.cols());
                    for r in 0..g.rows() {
                        for (a, v) in acc.row_mut(r % t).iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(grads, *a, g);
                }
                if self.wants(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(grads, *a, g);
                }
                if self.wants(*b) {
                    add_into(grads, *b, &g.map(|v| -v));
                }
            }
            Op::MulConst(a, c) => {
                if self.wants(*a) {
                    let mut d = g.clone();
                    for (x, y) in d.data_mut().iter_mut().zip(c.data()) {
                        *x *= y;
                    }
                    add_into(grads, *a, &d);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    add_into(grads, *a, &g.map(|v| v * s));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(out.data()) {
                    if *y <= 0.0 {
                        *x = 0.0;
                    }
                }
                add_into(grads, *a, &d);
            }
            Op::Abs(a) => {
                let va = self.value(*a);
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(va.data()) {
                    *x *= if *y > 0.0 {
                        1.0
                    } else if *y < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                add_into(grads, *a, &d);
            }
            Op::Square(a) => {
                let va = self.value(*a);
                let mut d = g.clone();
                for (x, y) in d.data_mut().iter_mut().zip(va.data()) {
                    *x *= 2.0 * y;
                }
                add_into(grads, *a, &d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let vg = self.value(*gamma);
                if self.wants(*gamma) {
                    let acc = slot(grads, *gamma, 1, d);
                    for r in 0..g.rows() {
                        for c in 0..d {
                            acc.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                if self.wants(*beta) {
                    let acc = slot(grads, *beta, 1, d);
                    for r in 0..g.rows() {
                        for (a, v) in acc.data_mut().iter_mut().zip(g.row(r)) {
                            *a += v;
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(g.rows(), d);
                    for r in 0..g.rows() {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = g.get(r, c) * vg.data()[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat.get(r, c);
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = g.get(r, c) * vg.data()[c];
                            dx.set(r, c, inv_std[r] * (dh - mean_dh - xhat.get(r, c) * mean_dh_h));
                        }
                    }
                    add_into(grads, *x, &dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, d) = (vq.rows(), vq.cols());
                let (group, heads) = (*group, *heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Tensor::zeros(n, d);
                let mut dk = Tensor::zeros(n, d);
                let mut dv = Tensor::zeros(n, d);
                let mut dp = vec![0.0; group];
                for b in 0..n / group {
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..group {
                            let ri = b * group + i;
                            let base = ((b * heads + h) * group + i) * group;
                            let p = &probs[base..base + group];
                            let go = &g.row(ri)[c0..c0 + dh];
                            let mut dot = 0.0;
                            for j in 0..group {
                                let rj = b * group + j;
                                let vj = &vv.row(rj)[c0..c0 + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot += p[j] * dp[j];
                                let dvj = &mut dv.row_mut(rj)[c0..c0 + dh];
                                for (a, x) in dvj.iter_mut().zip(go) {
                                    *a += p[j] * x;
                                }
                            }
                            for j in 0..group {
                                let rj = b * group + j;
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    let qv = vq.get(ri, c0 + c);
                                    let kv = vk.get(rj, c0 + c);
                                    dq.data_mut()[ri * d + c0 + c] += ds * kv;
                                    dk.data_mut()[rj * d + c0 + c] += ds * qv;
                                }
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    add_into(grads, *q, &dq);
                }
                if self.wants(*k) {
                    add_into(grads, *k, &dk);
                }
                if self.wants(*v) {
                    add_into(grads, *v, &dv);
                }
            }
            Op::MeanGroups(x, group) => {
                let vx = self.value(*x);
                let mut d = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    for (a, v) in d.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *a = v / *group as f64;
                    }
                }
                add_into(grads, *x, &d);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        add_into(grads, *p, &d);
                    }
                    c0 += w;
                }
            }
            Op::SliceCols(x, start) => {
                let vx = self.value(*x);
                let acc = slot(grads, *x, vx.rows(), vx.cols());
                for r in 0..g.rows() {
                    for (a, v) in acc.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *a += v;
                    }
                }
            }
            Op::ActionSquash {
                x,
                trans_scale,
                rot_scale,
            } => {
                let vx = self.value(*x);
                let mut d = Tensor::zeros(vx.rows(), 6);
                for r in 0..vx.rows() {
                    let z = vx.row(r);
                    let gr = g.row(r);
                    let rn = norm3(z);
                    let f = radial_factor(rn);
                    let h = radial_factor_slope_over_r(rn);
                    let zg = z[0] * gr[0] + z[1] * gr[1] + z[2] * gr[2];
                    let dr = d.row_mut(r);
                    for i in 0..3 {
                        dr[i] = trans_scale * (f * gr[i] + h * zg * z[i]);
                        let t = z[3 + i].tanh();
                        dr[3 + i] = rot_scale * (1.0 - t * t) * gr[3 + i];
                    }
                }
                add_into(grads, *x, &d);
            }
            Op::RowSum(x) => {
                let vx = self.value(*x);
                let mut d = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    let gv = g.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|a| *a = gv);
                }
                add_into(grads, *x, &d);
            }
            Op::WeightedSum(x, w) => {
                let s = g.item();
                add_into(grads, *x, &w.map(|v| v * s));
            }
        }
    }
}

fn slot(grads: &mut [Option<Tensor>], id: NodeId, rows: usize, cols: usize) -> &mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn add_into(grads: &mut [Option<Tensor>], id: NodeId, g: &Tensor) {
    match &mut grads[id.0] {
        Some(t) => t.add_assign(g),
        s @ None => *s = Some(g.clone()),
    }
}

fn norm3(z: &[f64]) -> f64 {
    (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt()
}

/// tanh(r) / r, continuous at 0.
pub(crate) fn radial_factor(r: f64) -> f64 {
    if r < 1e-4 {
        1.0 - r * r / 3.0
    } else {
        r.tanh() / r
    }
}

/// (d/dr [tanh(r)/r]) / r, continuous at 0.
fn radial_factor_slope_over_r(r: f64) -> f64 {
    if r < 1e-3 {
        -2.0 / 3.0 + 8.0 * r * r / 15.0
    } else {
        let t = r.tanh();
        (r * (1.0 - t * t) - t) / (r * r * r)
    }
}
