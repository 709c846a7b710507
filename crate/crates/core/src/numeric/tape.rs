//! Tape-based computation graph.
//!
//! Nodes are appended in construction order, which is therefore a valid
//! topological order: every node's parents precede it. Shape checking happens
//! at construction; `forward` fills values, `backward` accumulates gradients
//! into every node, and leaves not on the loss path keep an exact zero
//! gradient. Through a `min` node, gradient flows only along the argmin
//! branch (ties broken toward the lowest branch index).

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::numeric::sparse::SparseMask;

/// Row-major matrix shape; vectors are `(n, 1)`, scalars `(1, 1)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }
    pub fn scalar() -> Self {
        Shape { rows: 1, cols: 1 }
    }
    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(NodeId, NodeId),
    Slice { src: NodeId, start: usize },
    Sum(NodeId),
    SquaredError(NodeId, NodeId),
    SigmoidXent { logits: NodeId, targets: NodeId },
    Min(Vec<NodeId>),
    SparseApply { weights: NodeId, input: NodeId, mask: Arc<SparseMask> },
}

struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Stable sigmoid cross-entropy on a logit: `max(z,0) - z*t + ln(1+e^-|z|)`.
pub fn sigmoid_xent(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    forward_run: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Shape) -> NodeId {
        self.forward_run = false;
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            shape,
            value: Vec::new(),
            grad: Vec::new(),
        });
        id
    }

    fn shape_of(&self, id: NodeId) -> Shape {
        self.nodes[id.idx()].shape
    }

    /// Leaf node with assigned values; parameters and inputs both enter here.
    pub fn leaf(&mut self, values: Vec<f64>, shape: Shape) -> Result<NodeId> {
        if values.len() != shape.len() {
            return Err(CoreError::shape(
                "leaf",
                format!("{} values for shape {}x{}", values.len(), shape.rows, shape.cols),
            ));
        }
        let id = self.push(Op::Leaf, shape);
        self.nodes[id.idx()].value = values;
        Ok(id)
    }

    pub fn leaf_vector(&mut self, values: Vec<f64>) -> NodeId {
        let n = values.len();
        self.leaf(values, Shape::vector(n)).expect("vector leaf")
    }

    pub fn leaf_scalar(&mut self, v: f64) -> NodeId {
        self.leaf(vec![v], Shape::scalar()).expect("scalar leaf")
    }

    /// Re-assigns a leaf's values; invalidates any previous forward pass.
    pub fn set_leaf(&mut self, id: NodeId, values: Vec<f64>) -> Result<()> {
        let node = &mut self.nodes[id.idx()];
        if !matches!(node.op, Op::Leaf) {
            return Err(CoreError::Graph("set_leaf on a non-leaf node".into()));
        }
        if values.len() != node.shape.len() {
            return Err(CoreError::shape("set_leaf", "value length"));
        }
        node.value = values;
        self.forward_run = false;
        Ok(())
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (ms, vs) = (self.shape_of(m), self.shape_of(v));
        if vs.cols != 1 || ms.cols != vs.rows {
            return Err(CoreError::shape(
                "matvec",
                format!("{}x{} times {}x{}", ms.rows, ms.cols, vs.rows, vs.cols),
            ));
        }
        Ok(self.push(Op::MatVec(m, v), Shape::vector(ms.rows)))
    }

    fn elementwise(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Result<Shape> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa != sb {
            return Err(CoreError::shape(
                op,
                format!("{}x{} vs {}x{}", sa.rows, sa.cols, sb.rows, sb.cols),
            ));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.elementwise("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.elementwise("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.elementwise("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let s = self.shape_of(a);
        self.push(Op::Scale(a, k), s)
    }

    pub fn sigmoid_node(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a);
        self.push(Op::Sigmoid(a), s)
    }

    pub fn tanh_node(&mut self, a: NodeId) -> NodeId {
        let s = self.shape_of(a);
        self.push(Op::Tanh(a), s)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.cols != 1 || sb.cols != 1 {
            return Err(CoreError::shape("concat", "both operands must be vectors"));
        }
        Ok(self.push(Op::Concat(a, b), Shape::vector(sa.rows + sb.rows)))
    }

    /// Contiguous slice of a node's storage, reinterpreted as `rows x cols`.
    pub fn slice(&mut self, src: NodeId, start: usize, rows: usize, cols: usize) -> Result<NodeId> {
        let s = self.shape_of(src);
        if start + rows * cols > s.len() {
            return Err(CoreError::shape(
                "slice",
                format!("[{start}, {}) out of {}", start + rows * cols, s.len()),
            ));
        }
        Ok(self.push(Op::Slice { src, start }, Shape::matrix(rows, cols)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Shape::scalar())
    }

    /// Sum of squared differences, as a scalar.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise("squared_error", a, b)?;
        Ok(self.push(Op::SquaredError(a, b), Shape::scalar()))
    }

    /// Summed sigmoid cross-entropy between logits and targets, as a scalar.
    pub fn sigmoid_xent_sum(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.elementwise("sigmoid_xent", logits, targets)?;
        Ok(self.push(Op::SigmoidXent { logits, targets }, Shape::scalar()))
    }

    /// Minimum over a set of scalar nodes. The argmin (lowest index on ties)
    /// is recoverable with [`Tape::argmin`] after `forward`.
    pub fn min_over(&mut self, branches: Vec<NodeId>) -> Result<NodeId> {
        if branches.is_empty() {
            return Err(CoreError::Invalid("min over empty set".into()));
        }
        for &b in &branches {
            if !self.shape_of(b).is_scalar() {
                return Err(CoreError::shape("min", "branches must be scalar"));
            }
        }
        Ok(self.push(Op::Min(branches), Shape::scalar()))
    }

    pub fn sparse_apply(
        &mut self,
        weights: NodeId,
        input: NodeId,
        mask: Arc<SparseMask>,
    ) -> Result<NodeId> {
        let (ws, xs) = (self.shape_of(weights), self.shape_of(input));
        if ws.len() != mask.entries.len() {
            return Err(CoreError::shape(
                "sparse_apply",
                format!("{} weights for {} mask entries", ws.len(), mask.entries.len()),
            ));
        }
        if xs.cols != 1 || xs.rows != mask.cols {
            return Err(CoreError::shape(
                "sparse_apply",
                format!("input length {} for {} columns", xs.len(), mask.cols),
            ));
        }
        let rows = mask.rows;
        Ok(self.push(Op::SparseApply { weights, input, mask }, Shape::vector(rows)))
    }

    fn min_branch(&self, branches: &[NodeId]) -> usize {
        let mut best = 0usize;
        let mut best_v = self.nodes[branches[0].idx()].value[0];
        for (i, &b) in branches.iter().enumerate().skip(1) {
            let v = self.nodes[b.idx()].value[0];
            if v < best_v {
                best_v = v;
                best = i;
            }
        }
        best
    }

    /// Argmin branch index of a `min_over` node. Requires `forward`.
    pub fn argmin(&self, id: NodeId) -> Result<usize> {
        if !self.forward_run {
            return Err(CoreError::Graph("argmin before forward".into()));
        }
        match &self.nodes[id.idx()].op {
            Op::Min(branches) => Ok(self.min_branch(branches)),
            _ => Err(CoreError::Graph("argmin on a non-min node".into())),
        }
    }

    /// Computes every node's value in construction order.
    pub fn forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Leaf => continue,
                Op::MatVec(m, v) => {
                    let ms = self.nodes[m.idx()].shape;
                    let mv = &self.nodes[m.idx()].value;
                    let xv = &self.nodes[v.idx()].value;
                    let mut out = vec![0.0; ms.rows];
                    for r in 0..ms.rows {
                        let row = &mv[r * ms.cols..(r + 1) * ms.cols];
                        let mut acc = 0.0;
                        for (w, x) in row.iter().zip(xv.iter()) {
                            acc += w * x;
                        }
                        out[r] = acc;
                    }
                    out
                }
                Op::Add(a, b) => {
                    let (av, bv) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
                    av.iter().zip(bv).map(|(x, y)| x + y).collect()
                }
                Op::Sub(a, b) => {
                    let (av, bv) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
                    av.iter().zip(bv).map(|(x, y)| x - y).collect()
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
                    av.iter().zip(bv).map(|(x, y)| x * y).collect()
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    self.nodes[a.idx()].value.iter().map(|x| x * k).collect()
                }
                Op::Sigmoid(a) => self.nodes[a.idx()].value.iter().map(|&x| sigmoid(x)).collect(),
                Op::Tanh(a) => self.nodes[a.idx()].value.iter().map(|x| x.tanh()).collect(),
                Op::Concat(a, b) => {
                    let mut out = self.nodes[a.idx()].value.clone();
                    out.extend_from_slice(&self.nodes[b.idx()].value);
                    out
                }
                Op::Slice { src, start } => {
                    let n = self.nodes[i].shape.len();
                    self.nodes[src.idx()].value[*start..*start + n].to_vec()
                }
                Op::Sum(a) => vec![self.nodes[a.idx()].value.iter().sum()],
                Op::SquaredError(a, b) => {
                    let (av, bv) = (&self.nodes[a.idx()].value, &self.nodes[b.idx()].value);
                    let mut acc = 0.0;
                    for (x, y) in av.iter().zip(bv) {
                        let d = x - y;
                        acc += d * d;
                    }
                    vec![acc]
                }
                Op::SigmoidXent { logits, targets } => {
                    let (zv, tv) = (
                        &self.nodes[logits.idx()].value,
                        &self.nodes[targets.idx()].value,
                    );
                    let mut acc = 0.0;
                    for (&z, &t) in zv.iter().zip(tv) {
                        acc += sigmoid_xent(z, t);
                    }
                    vec![acc]
                }
                Op::Min(branches) => {
                    let mut best = self.nodes[branches[0].idx()].value[0];
                    for &b in &branches[1..] {
                        let v = self.nodes[b.idx()].value[0];
                        if v < best {
                            best = v;
                        }
                    }
                    vec![best]
                }
                Op::SparseApply { weights, input, mask } => {
                    let wv = &self.nodes[weights.idx()].value;
                    let xv = &self.nodes[input.idx()].value;
                    let mut out = vec![0.0; mask.rows];
                    for (k, &(r, c)) in mask.entries.iter().enumerate() {
                        out[r as usize] += wv[k] * xv[c as usize];
                    }
                    out
                }
            };
            self.nodes[i].value = value;
        }
        self.forward_run = true;
        Ok(())
    }

    /// Reverse pass from a scalar loss node. Populates gradients on every
    /// node; leaves unreachable from the loss keep exact-zero gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.forward_run {
            return Err(CoreError::Graph("backward before forward".into()));
        }
        if !self.nodes[loss.idx()].shape.is_scalar() {
            return Err(CoreError::Graph("backward from a non-scalar node".into()));
        }
        for n in &mut self.nodes {
            n.grad = vec![0.0; n.shape.len()];
        }
        self.nodes[loss.idx()].grad[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            // Skip nodes with no incoming gradient; cheap and keeps zeros exact.
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[i].grad);
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatVec(m, v) => {
                    let ms = self.nodes[m.idx()].shape;
                    let xv = self.nodes[v.idx()].value.clone();
                    let mv = self.nodes[m.idx()].value.clone();
                    {
                        let gm = &mut self.nodes[m.idx()].grad;
                        for r in 0..ms.rows {
                            let g = grad[r];
                            if g != 0.0 {
                                for c in 0..ms.cols {
                                    gm[r * ms.cols + c] += g * xv[c];
                                }
                            }
                        }
                    }
                    {
                        let gv = &mut self.nodes[v.idx()].grad;
                        for r in 0..ms.rows {
                            let g = grad[r];
                            if g != 0.0 {
                                let row = &mv[r * ms.cols..(r + 1) * ms.cols];
                                for (c, w) in row.iter().enumerate() {
                                    gv[c] += g * w;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (g, d) in self.nodes[a.idx()].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.idx()].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
                Op::Sub(a, b) => {
                    for (g, d) in self.nodes[a.idx()].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.idx()].grad.iter_mut().zip(&grad) {
                        *g -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.idx()].value.clone();
                    let bv = self.nodes[b.idx()].value.clone();
                    for ((g, d), y) in self.nodes[a.idx()].grad.iter_mut().zip(&grad).zip(&bv) {
                        *g += d * y;
                    }
                    for ((g, d), x) in self.nodes[b.idx()].grad.iter_mut().zip(&grad).zip(&av) {
                        *g += d * x;
                    }
                }
                Op::Scale(a, k) => {
                    for (g, d) in self.nodes[a.idx()].grad.iter_mut().zip(&grad) {
                        *g += d * k;
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = self.nodes[i].value.clone();
                    for ((g, d), y) in self.nodes[a.idx()].grad.iter_mut().zip(&grad).zip(&yv) {
                        *g += d * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let yv = self.nodes[i].value.clone();
                    for ((g, d), y) in self.nodes[a.idx()].grad.iter_mut().zip(&grad).zip(&yv) {
                        *g += d * (1.0 - y * y);
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.nodes[a.idx()].shape.len();
                    for (g, d) in self.nodes[a.idx()].grad.iter_mut().zip(&grad[..na]) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.idx()].grad.iter_mut().zip(&grad[na..]) {
                        *g += d;
                    }
                }
                Op::Slice { src, start } => {
                    let gsrc = &mut self.nodes[src.idx()].grad;
                    for (k, d) in grad.iter().enumerate() {
                        gsrc[start + k] += d;
                    }
                }
                Op::Sum(a) => {
                    let d = grad[0];
                    for g in self.nodes[a.idx()].grad.iter_mut() {
                        *g += d;
                    }
                }
                Op::SquaredError(a, b) => {
                    let d = grad[0];
                    let av = self.nodes[a.idx()].value.clone();
                    let bv = self.nodes[b.idx()].value.clone();
                    for ((g, x), y) in self.nodes[a.idx()].grad.iter_mut().zip(&av).zip(&bv) {
                        *g += d * 2.0 * (x - y);
                    }
                    for ((g, x), y) in self.nodes[b.idx()].grad.iter_mut().zip(&av).zip(&bv) {
                        *g -= d * 2.0 * (x - y);
                    }
                }
                Op::SigmoidXent { logits, targets } => {
                    let d = grad[0];
                    let zv = self.nodes[logits.idx()].value.clone();
                    let tv = self.nodes[targets.idx()].value.clone();
                    for ((g, &z), &t) in self.nodes[logits.idx()].grad.iter_mut().zip(&zv).zip(&tv)
                    {
                        *g += d * (sigmoid(z) - t);
                    }
                    for (g, &z) in self.nodes[targets.idx()].grad.iter_mut().zip(&zv) {
                        *g += d * -z;
                    }
                }
                Op::Min(branches) => {
                    let chosen = self.min_branch(&branches);
                    self.nodes[branches[chosen].idx()].grad[0] += grad[0];
                }
                Op::SparseApply { weights, input, mask } => {
                    let wv = self.nodes[weights.idx()].value.clone();
                    let xv = self.nodes[input.idx()].value.clone();
                    {
                        let gw = &mut self.nodes[weights.idx()].grad;
                        for (k, &(r, c)) in mask.entries.iter().enumerate() {
                            gw[k] += grad[r as usize] * xv[c as usize];
                        }
                    }
                    {
                        let gx = &mut self.nodes[input.idx()].grad;
                        for (k, &(r, c)) in mask.entries.iter().enumerate() {
                            gx[c as usize] += wv[k] * grad[r as usize];
                        }
                    }
                }
            }
            self.nodes[i].grad = grad;
        }
        Ok(())
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.idx()].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.idx()].value[0]
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.idx()].grad
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.shape_of(id)
    }
}
