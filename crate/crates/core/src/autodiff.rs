//! Reverse-mode automatic differentiation over a flat expression graph.
//!
//! A [`Graph`] is an append-only arena of nodes. Values are computed eagerly
//! when an operation is recorded, so node ids always refer to earlier nodes
//! and arena order is a topological order. [`Graph::backward`] walks the
//! arena once in reverse, accumulating `d(root)/d(node)` into every node
//! that can reach a gradient-bearing leaf.
//!
//! Two properties the rest of the crate leans on:
//!
//! * [`Graph::stop_grad`] forwards its input value unchanged and contributes
//!   nothing on the backward pass. The training losses use it to reproduce
//!   their stop-gradient routing exactly: a blocked path is never visited,
//!   so the "zero gradient" the tests assert is bitwise zero, not a small
//!   number.
//! * Backward is deterministic. Nodes are visited in a fixed order and all
//!   reductions are sequential, so repeated passes over the same graph give
//!   bit-identical gradients.
//!
//! The op set is the closure needed by the networks and losses here, not a
//! general kernel library; everything is f64 and at most two-dimensional.
//! Higher-order derivatives are out of scope: Langevin sampling only needs
//! first-order input gradients, and chains are never differentiated through.

use crate::error::{Error, Result};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    StopGrad(#[allow(dead_code)] NodeId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// (n x m) plus a (1 x m) bias broadcast over rows.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    Swish(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    SoftmaxRows(NodeId),
    /// Fused log-sum-exp cross-entropy; output is the per-row loss (n x 1).
    /// Row softmax probabilities are cached for the backward pass.
    SoftmaxXent {
        logits: NodeId,
        targets: NodeId,
        probs: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), computed from the non-overflowing side.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    pub fn value_tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor {
            rows: n.rows,
            cols: n.cols,
            data: n.value.clone(),
        }
    }

    /// Gradient of the last `backward` root with respect to this node.
    /// `None` when the node was not reached or does not require gradients.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let n = self.node(id);
        n.grad.as_ref().map(|g| Tensor {
            rows: n.rows,
            cols: n.cols,
            data: g.clone(),
        })
    }

    // ── node constructors ──────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t.rows, t.cols, t.data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Identity forward, zero backward. The returned node never propagates
    /// into its parent.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let n = self.node(x);
        let (rows, cols, value) = (n.rows, n.cols, n.value.clone());
        self.push(rows, cols, value, false, Op::StopGrad(x))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("node {:?} is {}x{}, node {:?} is {}x{}", a, n, k, b, k2, m),
            ));
        }
        let mut value = vec![0.0; n * m];
        matmul_acc(&self.node(a).value, &self.node(b).value, &mut value, n, k, m);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(n, m, value, needs, Op::MatMul(a, b)))
    }

    fn elementwise_pair(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (r1, c1) = self.shape(a);
        let (r2, c2) = self.shape(b);
        if r1 != r2 || c1 != c2 {
            return Err(Error::shape(
                op,
                format!("node {:?} is {}x{}, node {:?} is {}x{}", a, r1, c1, b, r2, c2),
            ));
        }
        Ok((r1, c1))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.elementwise_pair("add", a, b)?;
        let value: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, value, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.elementwise_pair("sub", a, b)?;
        let value: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, value, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.elementwise_pair("mul", a, b)?;
        let value: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, value, needs, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.elementwise_pair("div", a, b)?;
        let value: Vec<f64> = self
            .node(a)
            .value
            .iter()
            .zip(&self.node(b).value)
            .map(|(x, y)| x / y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(r, c, value, needs, Op::Div(a, b)))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        let (br, bc) = self.shape(bias);
        if br != 1 || bc != m {
            return Err(Error::shape(
                "add_bias",
                format!("input {}x{} with bias {}x{}", n, m, br, bc),
            ));
        }
        let bv = self.node(bias).value.clone();
        let mut value = self.node(x).value.clone();
        for row in value.chunks_mut(m) {
            for (v, b) in row.iter_mut().zip(&bv) {
                *v += b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(n, m, value, needs, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let n = self.node(x);
        let (rows, cols) = (n.rows, n.cols);
        let value: Vec<f64> = n.value.iter().map(|v| v * k).collect();
        let needs = self.needs(x);
        self.push(rows, cols, value, needs, Op::Scale(x, k))
    }

    fn unary(&mut self, x: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let n = self.node(x);
        let (rows, cols) = (n.rows, n.cols);
        let value: Vec<f64> = n.value.iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        self.push(rows, cols, value, needs, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// x * sigmoid(x)
    pub fn swish(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Swish(x), |v| v * sigmoid(v))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v: f64 = self.node(x).value.iter().sum();
        let needs = self.needs(x);
        self.push(1, 1, vec![v], needs, Op::Sum(x))
    }

    /// Mean of all entries, as a 1x1 node.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.node(x);
        let v: f64 = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let needs = self.needs(x);
        self.push(1, 1, vec![v], needs, Op::Mean(x))
    }

    /// [a | b] along the feature (column) axis.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("row counts differ: {}x{} vs {}x{}", ra, ca, rb, cb),
            ));
        }
        let mut value = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            value.extend_from_slice(&self.node(a).value[i * ca..(i + 1) * ca]);
            value.extend_from_slice(&self.node(b).value[i * cb..(i + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(ra, ca + cb, value, needs, Op::ConcatCols(a, b)))
    }

    /// Columns [start, start+len) of `src`.
    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(src);
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{}, {}) out of {} columns", start, start + len, c),
            ));
        }
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&self.node(src).value[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(src);
        Ok(self.push(r, len, value, needs, Op::SliceCols { src, start }))
    }

    /// Row-wise softmax with the max subtracted before exponentiation.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let n = self.node(x);
        let (rows, cols) = (n.rows, n.cols);
        let mut value = Vec::with_capacity(rows * cols);
        for row in n.value.chunks(cols) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = exps.iter().sum();
            value.extend(exps.into_iter().map(|e| e / s));
        }
        let needs = self.needs(x);
        self.push(rows, cols, value, needs, Op::SoftmaxRows(x))
    }

    /// Per-row cross-entropy `lse(logits) - logits . target` as an (n x 1)
    /// node. Targets must be a constant one-hot (or any distribution) node;
    /// no gradient flows into them.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let (r, c) = self.elementwise_pair("softmax_xent", logits, targets)?;
        let mut probs = Vec::with_capacity(r * c);
        let mut value = Vec::with_capacity(r);
        for i in 0..r {
            let lrow = &self.node(logits).value[i * c..(i + 1) * c];
            let trow = &self.node(targets).value[i * c..(i + 1) * c];
            let m = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &v in lrow {
                sum += (v - m).exp();
            }
            let lse = m + sum.ln();
            let dot: f64 = lrow.iter().zip(trow).map(|(l, t)| l * t).sum();
            value.push(lse - dot);
            for &v in lrow {
                probs.push((v - m).exp() / sum);
            }
        }
        let needs = self.needs(logits);
        Ok(self.push(
            r,
            1,
            value,
            needs,
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            },
        ))
    }

    // ── execution ──────────────────────────────────────────────────────

    /// Value of the root node. Values are computed when ops are recorded, so
    /// this is a lookup; it exists to make call sites read as forward passes.
    pub fn forward(&self, root: NodeId) -> Tensor {
        self.value_tensor(root)
    }

    /// Accumulate d(root)/d(node) for every node that reaches a
    /// gradient-bearing leaf. The root must be 1x1. Previous gradients are
    /// cleared first, so repeated calls are independent and bit-identical.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        {
            let n = self.node(root);
            if n.rows != 1 || n.cols != 1 {
                return Err(Error::usage(format!(
                    "backward root must be scalar, node {:?} is {}x{}",
                    root, n.rows, n.cols
                )));
            }
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i)?;
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: NodeId, contrib: impl FnOnce(&mut [f64])) {
        let n = &mut self.nodes[id.0];
        if !n.needs_grad {
            return;
        }
        let len = n.rows * n.cols;
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        contrib(g);
    }

    fn propagate(&mut self, i: usize) -> Result<()> {
        let g = self.nodes[i].grad.clone().expect("checked by caller");
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        // Ops carrying cached state (SoftmaxXent) are read through a raw
        // borrow of the op before mutation of parents.
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGrad(_) => {}
            &Op::MatMul(a, b) => {
                let (n, k) = self.shape(a);
                let m = cols;
                if self.needs(a) {
                    let bv = self.node(b).value.clone();
                    self.acc_grad(a, |ga| matmul_bt_acc(&g, &bv, ga, n, m, k));
                }
                if self.needs(b) {
                    let av = self.node(a).value.clone();
                    self.acc_grad(b, |gb| matmul_at_acc(&av, &g, gb, n, k, m));
                }
            }
            &Op::Add(a, b) => {
                self.acc_grad(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y;
                    }
                });
                self.acc_grad(b, |gb| {
                    for (x, y) in gb.iter_mut().zip(&g) {
                        *x += y;
                    }
                });
            }
            &Op::Sub(a, b) => {
                self.acc_grad(a, |ga| {
                    for (x, y) in ga.iter_mut().zip(&g) {
                        *x += y;
                    }
                });
                self.acc_grad(b, |gb| {
                    for (x, y) in gb.iter_mut().zip(&g) {
                        *x -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.node(b).value.clone();
                    self.acc_grad(a, |ga| {
                        for ((x, y), z) in ga.iter_mut().zip(&g).zip(&bv) {
                            *x += y * z;
                        }
                    });
                }
                if self.needs(b) {
                    let av = self.node(a).value.clone();
                    self.acc_grad(b, |gb| {
                        for ((x, y), z) in gb.iter_mut().zip(&g).zip(&av) {
                            *x += y * z;
                        }
                    });
                }
            }
            &Op::Div(a, b) => {
                let bv = self.node(b).value.clone();
                if self.needs(a) {
                    self.acc_grad(a, |ga| {
                        for ((x, y), z) in ga.iter_mut().zip(&g).zip(&bv) {
                            *x += y / z;
                        }
                    });
                }
                if self.needs(b) {
                    let av = self.node(a).value.clone();
                    self.acc_grad(b, |gb| {
                        for i in 0..gb.len() {
                            gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    });
                }
            }
            &Op::AddBias(x, bias) => {
                self.acc_grad(x, |gx| {
                    for (a, b) in gx.iter_mut().zip(&g) {
                        *a += b;
                    }
                });
                self.acc_grad(bias, |gb| {
                    for row in g.chunks(cols) {
                        for (a, b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                });
            }
            &Op::Scale(x, k) => {
                self.acc_grad(x, |gx| {
                    for (a, b) in gx.iter_mut().zip(&g) {
                        *a += k * b;
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = self.node(x).value.clone();
                self.acc_grad(x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let sv = self.nodes[i].value.clone();
                self.acc_grad(x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sv[i] * (1.0 - sv[i]);
                    }
                });
            }
            &Op::Swish(x) => {
                let xv = self.node(x).value.clone();
                self.acc_grad(x, |gx| {
                    for i in 0..gx.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += g[i] * (s + xv[i] * s * (1.0 - s));
                    }
                });
            }
            &Op::Softplus(x) => {
                let xv = self.node(x).value.clone();
                self.acc_grad(x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sigmoid(xv[i]);
                    }
                });
            }
            &Op::Exp(x) => {
                let ev = self.nodes[i].value.clone();
                self.acc_grad(x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * ev[i];
                    }
                });
            }
            &Op::Log(x) => {
                let xv = self.node(x).value.clone();
                self.acc_grad(x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xv[i];
                    }
                });
            }
            &Op::Square(x) => {
                let xv = self.node(x).value.clone();
                self.acc_grad(x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * 2.0 * xv[i];
                    }
                });
            }
            &Op::Sum(x) => {
                let go = g[0];
                self.acc_grad(x, |gx| {
                    for a in gx.iter_mut() {
                        *a += go;
                    }
                });
            }
            &Op::Mean(x) => {
                let numel = self.node(x).value.len() as f64;
                let go = g[0] / numel;
                self.acc_grad(x, |gx| {
                    for a in gx.iter_mut() {
                        *a += go;
                    }
                });
            }
            &Op::ConcatCols(a, b) => {
                let (_, ca) = self.shape(a);
                let (_, cb) = self.shape(b);
                self.acc_grad(a, |ga| {
                    for i in 0..rows {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * (ca + cb) + j];
                        }
                    }
                });
                self.acc_grad(b, |gb| {
                    for i in 0..rows {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * (ca + cb) + ca + j];
                        }
                    }
                });
            }
            &Op::SliceCols { src, start } => {
                let (_, c) = self.shape(src);
                self.acc_grad(src, |gs| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gs[i * c + start + j] += g[i * cols + j];
                        }
                    }
                });
            }
            &Op::SoftmaxRows(x) => {
                let pv = self.nodes[i].value.clone();
                self.acc_grad(x, |gx| {
                    for r in 0..rows {
                        let p = &pv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            gx[r * cols + j] += p[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxXent { logits, targets, probs } => {
                let (logits, targets) = (*logits, *targets);
                let probs = probs.clone();
                let (_, c) = self.shape(logits);
                let tv = self.node(targets).value.clone();
                self.acc_grad(logits, |gl| {
                    for r in 0..rows {
                        let gr = g[r];
                        for j in 0..c {
                            gl[r * c + j] += gr * (probs[r * c + j] - tv[r * c + j]);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a scalar function of a flat parameter
    /// vector. The closure rebuilds the computation from scratch for every
    /// probe, so this stays independent of the backward implementation.
    pub(crate) fn finite_diff(f: &dyn Fn(&[f64]) -> f64, at: &[f64], step: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(at.len());
        let mut probe = at.to_vec();
        for i in 0..at.len() {
            let orig = probe[i];
            probe[i] = orig + step;
            let hi = f(&probe);
            probe[i] = orig - step;
            let lo = f(&probe);
            probe[i] = orig;
            g.push((hi - lo) / (2.0 * step));
        }
        g
    }

    pub(crate) fn assert_close(analytic: &[f64], numeric: &[f64], rel_tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs());
            if denom < 1e-8 {
                assert!(
                    (a - n).abs() < 1e-8,
                    "component {}: analytic {} vs numeric {}",
                    i,
                    a,
                    n
                );
            } else {
                assert!(
                    ((a - n) / denom).abs() < rel_tol,
                    "component {}: analytic {} vs numeric {} (rel {})",
                    i,
                    a,
                    n,
                    ((a - n) / denom).abs()
                );
            }
        }
    }

    fn deterministic_values(n: usize, salt: u64) -> Vec<f64> {
        // Small LCG so op tests do not depend on rand; values land in (-1, 1).
        let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn forward_values_for_frozen_points() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 0.0, -1.0]), false);
        let s = g.swish(x);
        // swish(1) = 1 / (1 + e^-1)
        assert!((g.value(s)[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(g.value(s)[1], 0.0);
        assert!((g.value(s)[2] + 0.268_941_421_369_995_1).abs() < 1e-15);

        let sig = g.sigmoid(x);
        assert!((g.value(sig)[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(g.value(sig)[1], 0.5);
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0), true);
        let s = g.sigmoid(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data[0], 0.25);
    }

    fn aux34(salt: u64) -> Tensor {
        Tensor::new(3, 4, deterministic_values(12, salt)).unwrap()
    }

    /// Every primitive gets checked against central finite differences with
    /// step 1e-5 on deterministic points; tolerance is far below the 1e-4
    /// the rest of the crate works to.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        type Build = fn(&mut Graph, NodeId) -> NodeId;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |g, x| {
                let w = g.constant(Tensor::new(4, 2, deterministic_values(8, 90)).unwrap());
                let m = g.matmul(x, w).unwrap();
                let sq = g.square(m);
                g.sum(sq)
            }),
            ("add_sub_mul_div", |g, x| {
                let other = g.constant(aux34(91));
                let d = g.sub(x, other).unwrap();
                let m = g.mul(d, x).unwrap();
                let shift = g.constant(Tensor::full(3, 4, 3.0));
                let denom = g.add(other, shift).unwrap();
                let q = g.div(m, denom).unwrap();
                g.sum(q)
            }),
            ("add_bias", |g, x| {
                let b = g.constant(Tensor::row(&[0.3, -0.2, 0.5, 0.1]));
                let a = g.add_bias(x, b).unwrap();
                let sq = g.square(a);
                g.sum(sq)
            }),
            ("relu", |g, x| {
                let r = g.relu(x);
                let sq = g.square(r);
                g.sum(sq)
            }),
            ("sigmoid", |g, x| {
                let s = g.sigmoid(x);
                g.sum(s)
            }),
            ("swish", |g, x| {
                let s = g.swish(x);
                g.sum(s)
            }),
            ("softplus_exp_log", |g, x| {
                let sp = g.softplus(x);
                let e = g.exp(x);
                let shift = g.constant(Tensor::full(3, 4, 2.5));
                let pos = g.add(sp, shift).unwrap();
                let l = g.log(pos);
                let s1 = g.sum(e);
                let s2 = g.sum(l);
                g.add(s1, s2).unwrap()
            }),
            ("scale_mean_square", |g, x| {
                let sq = g.square(x);
                let s = g.scale(sq, -2.5);
                g.mean(s)
            }),
            ("concat_slice", |g, x| {
                let other = g.constant(aux34(92));
                let c = g.concat_cols(x, other).unwrap();
                let mid = g.slice_cols(c, 1, 5).unwrap();
                let sq = g.square(mid);
                g.sum(sq)
            }),
            ("softmax_rows", |g, x| {
                let p = g.softmax_rows(x);
                let w = g.constant(Tensor::new(3, 4, (0..12).map(|v| v as f64).collect()).unwrap());
                let m = g.mul(p, w).unwrap();
                g.sum(m)
            }),
            ("softmax_xent", |g, x| {
                let mut onehot = Tensor::zeros(3, 4);
                onehot.set(0, 2, 1.0);
                onehot.set(1, 0, 1.0);
                onehot.set(2, 3, 1.0);
                let t = g.constant(onehot);
                let ce = g.softmax_xent(x, t).unwrap();
                g.mean(ce)
            }),
        ];

        for (salt, (name, build)) in cases.into_iter().enumerate() {
            let x0 = deterministic_values(12, salt as u64 + 1);
            let eval = move |vals: &[f64]| -> f64 {
                let mut g = Graph::new();
                let x = g.leaf(Tensor::new(3, 4, vals.to_vec()).unwrap(), true);
                let root = build(&mut g, x);
                g.value(root)[0]
            };

            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(3, 4, x0.clone()).unwrap(), true);
            let root = build(&mut g, x);
            g.backward(root).unwrap();
            let analytic = g.grad(x).unwrap_or_else(|| panic!("{}: no grad", name)).data;
            let numeric = finite_diff(&eval, &x0, 1e-5);
            assert_close(&analytic, &numeric, 1e-6);
        }
    }

    #[test]
    fn matmul_parameter_side_matches_finite_differences() {
        let x0 = deterministic_values(12, 5);
        let w0 = deterministic_values(8, 6);
        let run = |w: &[f64], want_grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(3, 4, x0.clone()).unwrap());
            let wn = g.leaf(Tensor::new(4, 2, w.to_vec()).unwrap(), true);
            let m = g.matmul(x, wn).unwrap();
            let sq = g.square(m);
            let root = g.sum(sq);
            let v = g.value(root)[0];
            if want_grad {
                g.backward(root).unwrap();
                let grad = g.grad(wn).unwrap().data;
                assert!(g.grad(x).is_none(), "constants must not accumulate gradients");
                (v, Some(grad))
            } else {
                (v, None)
            }
        };
        let (_, analytic) = run(&w0, true);
        let eval = |w: &[f64]| run(w, false).0;
        let numeric = finite_diff(&eval, &w0, 1e-5);
        assert_close(&analytic.unwrap(), &numeric, 1e-6);
    }

    #[test]
    fn stop_grad_blocks_and_zero_is_bitwise() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.5, -0.5]), true);
        let frozen = g.stop_grad(x);
        let sq = g.square(frozen);
        let live = g.square(x);
        let a = g.sum(sq);
        let b = g.sum(live);
        let root = g.add(a, b).unwrap();
        g.backward(root).unwrap();
        // Only the live path contributes: d/dx sum(x^2) = 2x exactly.
        let got = g.grad(x).unwrap().data;
        assert_eq!(got, vec![3.0, -1.0]);

        // A graph that is stop_grad-only leaves the leaf untouched.
        let mut g2 = Graph::new();
        let x2 = g2.leaf(Tensor::row(&[1.5, -0.5]), true);
        let frozen2 = g2.stop_grad(x2);
        let sq2 = g2.square(frozen2);
        let root2 = g2.sum(sq2);
        g2.backward(root2).unwrap();
        assert!(g2.grad(x2).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[1.0, 2.0]), true);
        let y = g.square(x);
        assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_errors_name_the_operation() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(2, 3), false);
        let b = g.leaf(Tensor::zeros(2, 3), false);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        let err = g.add_bias(a, b).unwrap_err();
        assert!(err.to_string().contains("add_bias"));
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let vals = deterministic_values(20, 42);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(4, 5, vals).unwrap(), true);
        let s = g.swish(x);
        let w = g.constant(Tensor::new(5, 3, deterministic_values(15, 7)).unwrap());
        let m = g.matmul(s, w).unwrap();
        let p = g.softmax_rows(m);
        let l = g.log(p);
        let root = g.mean(l);
        g.backward(root).unwrap();
        let first = g.grad(x).unwrap().data;
        g.backward(root).unwrap();
        let second = g.grad(x).unwrap().data;
        assert!(first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gradients_accumulate_across_shared_subexpressions() {
        // f(x) = sum(x*x) + sum(x*x) uses the same node twice.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::row(&[2.0]), true);
        let sq = g.square(x);
        let s = g.sum(sq);
        let root = g.add(s, s).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![8.0]);
    }

    #[test]
    fn linearity_of_backward() {
        // backward(a*f + b*g) == a*backward(f) + b*backward(g)
        let vals = deterministic_values(6, 3);
        let (a, b) = (2.5, -1.25);

        let grad_of = |mode: u8| -> Vec<f64> {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(2, 3, vals.clone()).unwrap(), true);
            let f = {
                let s = g.swish(x);
                g.sum(s)
            };
            let h = {
                let sq = g.square(x);
                g.mean(sq)
            };
            let root = match mode {
                0 => f,
                1 => h,
                _ => {
                    let fa = g.scale(f, a);
                    let hb = g.scale(h, b);
                    g.add(fa, hb).unwrap()
                }
            };
            g.backward(root).unwrap();
            g.grad(x).unwrap().data
        };

        let gf = grad_of(0);
        let gh = grad_of(1);
        let gmix = grad_of(2);
        for i in 0..gmix.len() {
            assert!((gmix[i] - (a * gf[i] + b * gh[i])).abs() < 1e-12);
        }
    }
}
