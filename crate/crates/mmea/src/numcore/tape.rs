//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! The tape records one node per operation during the forward pass; values
//! are computed eagerly when a node is added, so `value()` is always
//! available. `backward` walks the nodes in reverse, accumulating dense
//! gradients. The op set is exactly what the encoders and losses need; the
//! `CustomOp` hook lets callers add fused scalar ops (the alignment loss)
//! without widening this module.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numcore::matrix::{row_l2_normalize, Matrix};
use crate::numcore::sparse::SparseMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// A fused operation with caller-supplied forward and backward rules.
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix>;
    /// Accumulate into `input_grads` given upstream `grad_out`.
    fn backward(&self, inputs: &[&Matrix], grad_out: &Matrix, input_grads: &mut [Matrix]);
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a * b^T`
    MatMulNT(NodeId, NodeId),
    /// Symmetric sparse matrix times dense node.
    SpMm(Rc<SparseMatrix>, NodeId),
    /// `(n x d) + (1 x d)` broadcast over rows.
    AddRowVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Relu(NodeId),
    RowL2Norm(NodeId),
    /// Matrix scaled by one entry of a column-vector node.
    ScaleEntry {
        matrix: NodeId,
        scalars: NodeId,
        entry: usize,
    },
    /// Softmax over the single column of an `n x 1` node.
    SoftmaxColumn(NodeId),
    ConcatCols(Vec<NodeId>),
    GatherRows(NodeId, Rc<Vec<usize>>),
    /// Identity forward, gradient barrier backward. The parent id is kept
    /// for debugging even though backward never follows it.
    Detach(#[allow(dead_code)] NodeId),
    Custom {
        inputs: Vec<NodeId>,
        op: Rc<dyn CustomOp>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients for every node of a tape, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(
            (self.value(id).rows(), self.value(id).cols()),
            (1, 1),
            "scalar() on a non-scalar node"
        );
        self.value(id).get(0, 0)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows(), v.cols())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape(format!("tape matmul: {ar}x{ac} * {br}x{bc}")));
        }
        let value = self.value(a).matmul_unchecked(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::Shape(format!(
                "tape matmul_nt: {ar}x{ac} * ({br}x{bc})^T"
            )));
        }
        let value = self.value(a).matmul_nt_unchecked(self.value(b));
        Ok(self.push(value, Op::MatMulNT(a, b)))
    }

    pub fn spmm(&mut self, sparse: Rc<SparseMatrix>, x: NodeId) -> Result<NodeId> {
        let (xr, _) = self.shape(x);
        if sparse.cols() != xr {
            return Err(Error::Shape(format!(
                "tape spmm: {}x{} * {}x{}",
                sparse.rows(),
                sparse.cols(),
                xr,
                self.shape(x).1
            )));
        }
        let value = sparse.mul_dense_unchecked(self.value(x));
        Ok(self.push(value, Op::SpMm(sparse, x)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "tape add: {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    /// Broadcast-add a `1 x d` bias row to every row of an `n x d` node.
    pub fn add_row_vec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, mc) = self.shape(m);
        let (vr, vc) = self.shape(v);
        if vr != 1 || vc != mc {
            return Err(Error::Shape(format!(
                "tape add_row_vec: {:?} + {vr}x{vc}",
                self.shape(m)
            )));
        }
        let mut value = self.value(m).clone();
        let bias = self.value(v).row(0).to_vec();
        for i in 0..value.rows() {
            for (o, &b) in value.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(value, Op::AddRowVec(m, v)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).relu();
        self.push(value, Op::Relu(x))
    }

    pub fn row_l2_normalize(&mut self, x: NodeId) -> NodeId {
        let value = row_l2_normalize(self.value(x));
        self.push(value, Op::RowL2Norm(x))
    }

    /// Multiply `matrix` by entry `entry` of the column-vector node
    /// `scalars`.
    pub fn scale_entry(&mut self, matrix: NodeId, scalars: NodeId, entry: usize) -> Result<NodeId> {
        let (sr, sc) = self.shape(scalars);
        if sc != 1 || entry >= sr {
            return Err(Error::Shape(format!(
                "tape scale_entry: entry {entry} of {sr}x{sc}"
            )));
        }
        let s = self.value(scalars).get(entry, 0);
        let value = self.value(matrix).scale(s);
        Ok(self.push(
            value,
            Op::ScaleEntry {
                matrix,
                scalars,
                entry,
            },
        ))
    }

    pub fn softmax_column(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, xc) = self.shape(x);
        if xc != 1 {
            return Err(Error::Shape(format!(
                "tape softmax_column on {:?}",
                self.shape(x)
            )));
        }
        let col = self.value(x);
        let max = col.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.data().iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = Matrix::from_vec(col.rows(), 1, exps.iter().map(|e| e / sum).collect())?;
        Ok(self.push(value, Op::SoftmaxColumn(x)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("tape concat_cols: empty part list".into()));
        }
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape(format!(
                    "tape concat_cols: row counts differ ({} vs {})",
                    rows,
                    self.shape(p).0
                )));
            }
        }
        let total_cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut value = Matrix::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let part = self.value(p);
            for i in 0..rows {
                let src = part.row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
            }
            offset += part.cols();
        }
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: Rc<Vec<usize>>) -> Result<NodeId> {
        let (xr, xc) = self.shape(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= xr) {
            return Err(Error::Shape(format!(
                "tape gather_rows: index {bad} out of {xr} rows"
            )));
        }
        let mut value = Matrix::zeros(indices.len(), xc);
        for (out_row, &src) in indices.iter().enumerate() {
            let row = self.value(x).row(src).to_vec();
            value.row_mut(out_row).copy_from_slice(&row);
        }
        Ok(self.push(value, Op::GatherRows(x, indices)))
    }

    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::Detach(x))
    }

    pub fn custom(&mut self, inputs: &[NodeId], op: Rc<dyn CustomOp>) -> Result<NodeId> {
        let input_values: Vec<&Matrix> = inputs.iter().map(|&i| self.value(i)).collect();
        let value = op.forward(&input_values)?;
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        ))
    }

    /// Backpropagate from a scalar (`1 x 1`) node. Returns per-node
    /// gradients; leaves that did not influence the loss keep zero grads.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let v = self.value(loss);
        if (v.rows(), v.cols()) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward from a {}x{} node; expected 1x1",
                v.rows(),
                v.cols()
            )));
        }
        if !v.get(0, 0).is_finite() {
            return Err(Error::NonFinite("loss value".into()));
        }
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss.0].set(0, 0, 1.0);

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            // Cheap skip: untouched nodes propagate nothing.
            if grads[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[idx].clone();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt_unchecked(self.value(*b));
                    let db = self.value(*a).matmul_tn_unchecked(&g);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::MatMulNT(a, b) => {
                    let da = g.matmul_unchecked(self.value(*b));
                    let db = g.matmul_tn_unchecked(self.value(*a));
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::SpMm(sparse, x) => {
                    // Adjacency operators are symmetric, so A^T g == A g.
                    let dx = sparse.mul_dense_unchecked(&g);
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::AddRowVec(m, v) => {
                    accumulate(&mut grads[m.0], &g);
                    let cols = g.cols();
                    let mut dv = Matrix::zeros(1, cols);
                    for i in 0..g.rows() {
                        for (o, &gv) in dv.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads[v.0], &dv);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Relu(x) => {
                    let mut dx = g.clone();
                    for (d, &out) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if out <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::RowL2Norm(x) => {
                    let input = self.value(*x);
                    let mut dx = Matrix::zeros(input.rows(), input.cols());
                    for i in 0..input.rows() {
                        let norm = input.row_norm(i);
                        if norm > 0.0 {
                            let y = node.value.row(i);
                            let gr = g.row(i);
                            let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                            for ((d, &gv), &yv) in dx.row_mut(i).iter_mut().zip(gr).zip(y) {
                                *d = (gv - yv * dot) / norm;
                            }
                        } else {
                            // Zero rows pass through unchanged in forward.
                            let gr = g.row(i).to_vec();
                            dx.row_mut(i).copy_from_slice(&gr);
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::ScaleEntry {
                    matrix,
                    scalars,
                    entry,
                } => {
                    let s = self.value(*scalars).get(*entry, 0);
                    let dm = g.scale(s);
                    accumulate(&mut grads[matrix.0], &dm);
                    let m = self.value(*matrix);
                    let ds: f64 = g.data().iter().zip(m.data()).map(|(a, b)| a * b).sum();
                    let cur = grads[scalars.0].get(*entry, 0);
                    grads[scalars.0].set(*entry, 0, cur + ds);
                }
                Op::SoftmaxColumn(x) => {
                    let y = node.value.data();
                    let gd = g.data();
                    let dot: f64 = y.iter().zip(gd).map(|(a, b)| a * b).sum();
                    let dx_vals: Vec<f64> = y
                        .iter()
                        .zip(gd)
                        .map(|(&yi, &gi)| yi * (gi - dot))
                        .collect();
                    let dx = Matrix::from_vec(node.value.rows(), 1, dx_vals).unwrap();
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let width = self.value(p).cols();
                        let mut dp = Matrix::zeros(g.rows(), width);
                        for i in 0..g.rows() {
                            let src = &g.row(i)[offset..offset + width];
                            dp.row_mut(i).copy_from_slice(src);
                        }
                        accumulate(&mut grads[p.0], &dp);
                        offset += width;
                    }
                }
                Op::GatherRows(x, indices) => {
                    let dx = &mut grads[x.0];
                    for (out_row, &src) in indices.iter().enumerate() {
                        let gr = g.row(out_row).to_vec();
                        for (d, gv) in dx.row_mut(src).iter_mut().zip(gr) {
                            *d += gv;
                        }
                    }
                }
                Op::Detach(_) => {}
                Op::Custom { inputs, op } => {
                    let input_values: Vec<&Matrix> =
                        inputs.iter().map(|&i| self.value(i)).collect();
                    let mut local: Vec<Matrix> = input_values
                        .iter()
                        .map(|m| Matrix::zeros(m.rows(), m.cols()))
                        .collect();
                    op.backward(&input_values, &g, &mut local);
                    for (inp, d) in inputs.iter().zip(local) {
                        accumulate(&mut grads[inp.0], &d);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(target: &mut Matrix, delta: &Matrix) {
    debug_assert_eq!((target.rows(), target.cols()), (delta.rows(), delta.cols()));
    for (t, &d) in target.data_mut().iter_mut().zip(delta.data()) {
        *t += d;
    }
}
