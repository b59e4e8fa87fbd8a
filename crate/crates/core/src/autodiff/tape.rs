//! Matrix-level Wengert tape.
//!
//! Every node stores its forward value. Leaves can borrow their matrix
//! (model weights during an image-gradient pass) or own it. A node needs a
//! gradient iff it is a variable leaf or depends on one; the reverse sweep
//! skips everything else, so weights held as constants cost nothing there.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::matrix::{axpy, dot, gemm, gemm_nt, gemm_tn, Matrix};
use crate::numerics::ops::{moments, softmax_in_place};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `scale · a + shift`
    Affine(NodeId, f64, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    MeanRows(NodeId),
    /// Each row rescaled to Euclidean norm `scale`.
    NormalizeRows(NodeId, f64),
    /// `out.data[i] = src.data[index[i]]`, reshaped to `rows × cols`.
    Gather {
        src: NodeId,
        index: Arc<[usize]>,
        rows: usize,
        cols: usize,
    },
}

struct Node<'a> {
    op: Op,
    value: Cow<'a, Matrix>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Adjoints produced by one reverse sweep.
pub struct Adjoints {
    grads: Vec<Option<Matrix>>,
}

impl Adjoints {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Cow<'a, Matrix>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: &'a Matrix) -> NodeId {
        self.leaf(Cow::Borrowed(m), false)
    }

    pub fn constant_owned(&mut self, m: Matrix) -> NodeId {
        self.leaf(Cow::Owned(m), false)
    }

    pub fn variable(&mut self, m: &'a Matrix) -> NodeId {
        self.leaf(Cow::Borrowed(m), true)
    }

    pub fn variable_owned(&mut self, m: Matrix) -> NodeId {
        self.leaf(Cow::Owned(m), true)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = eval(&op, |id| &self.nodes[id.0].value)?;
        let needs_grad = parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Affine(a, c, 0.0))
    }

    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.push(Op::Affine(a, scale, shift))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.push(Op::LayerNormRows {
            x,
            gamma,
            beta,
            eps,
        })
    }

    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::MeanRows(a))
    }

    pub fn normalize_rows(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        self.push(Op::NormalizeRows(a, scale))
    }

    pub fn gather(
        &mut self,
        src: NodeId,
        index: Arc<[usize]>,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        self.push(Op::Gather {
            src,
            index,
            rows,
            cols,
        })
    }

    /// Recomputes every node from the leaves with the recorded operations.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut values: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Leaf => node.value.as_ref().clone(),
                ref op => eval(op, |id| &values[id.0])?,
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Reverse sweep seeded with `(node, adjoint)` pairs.
    pub fn backward(&self, seeds: &[(NodeId, &Matrix)]) -> Result<Adjoints> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for &(id, seed) in seeds {
            if seed.shape() != self.value(id).shape() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed {:?} for node of shape {:?}",
                        seed.shape(),
                        self.value(id).shape()
                    ),
                ));
            }
            accumulate(&mut grads[id.0], seed.clone());
            top = top.max(id.0 + 1);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Adjoints { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[i];
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], gemm_nt(g, self.value(b))?);
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], gemm_tn(self.value(a), g)?);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], gemm(g, self.value(b))?);
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], gemm_tn(g, self.value(a))?);
                }
            }
            Op::Add(a, b) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.clone());
                }
                if self.wants(b) {
                    accumulate(&mut grads[b.0], g.clone());
                }
            }
            Op::Affine(a, scale, _) => {
                if self.wants(a) {
                    accumulate(&mut grads[a.0], g.scale(scale));
                }
            }
            Op::Relu(a) => {
                if self.wants(a) {
                    let x = self.value(a);
                    let mut d = g.clone();
                    // derivative at exactly zero is taken as zero
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(a) {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr);
                        for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                eps,
            } => self.layer_norm_backward(g, x, gamma, beta, eps, grads),
            Op::MeanRows(a) => {
                if self.wants(a) {
                    let (rows, cols) = self.value(a).shape();
                    let mut d = Matrix::zeros(rows, cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        axpy(inv, g.row(0), d.row_mut(r));
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::NormalizeRows(a, scale) => {
                if self.wants(a) {
                    let x = self.value(a);
                    let y = &node.value;
                    let mut d = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = row_norm(x.row(r));
                        let (yr, gr) = (y.row(r), g.row(r));
                        let inner = dot(yr, gr) / (scale * scale);
                        for ((o, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = scale / n * (gv - yv * inner);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
            }
            Op::Gather { src, ref index, .. } => {
                if self.wants(src) {
                    let (rows, cols) = self.value(src).shape();
                    let slot = grads[src.0].get_or_insert_with(|| Matrix::zeros(rows, cols));
                    let sd = slot.data_mut();
                    for (&ix, &gv) in index.iter().zip(g.data()) {
                        sd[ix] += gv;
                    }
                }
            }
        }
        Ok(())
    }

    fn layer_norm_backward(
        &self,
        g: &Matrix,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        grads: &mut [Option<Matrix>],
    ) {
        let xv = self.value(x);
        let gam = self.value(gamma).data();
        let (rows, d) = xv.shape();
        let mut dx = self.wants(x).then(|| Matrix::zeros(rows, d));
        let mut dgamma = self.wants(gamma).then(|| vec![0.0; d]);
        let mut dbeta = self.wants(beta).then(|| vec![0.0; d]);
        let mut xhat = vec![0.0; d];
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let xr = xv.row(r);
            let gr = g.row(r);
            let (mu, sd) = moments(xr, eps);
            for j in 0..d {
                xhat[j] = (xr[j] - mu) / sd;
                dxhat[j] = gr[j] * gam[j];
            }
            if let Some(dg) = dgamma.as_mut() {
                for j in 0..d {
                    dg[j] += gr[j] * xhat[j];
                }
            }
            if let Some(db) = dbeta.as_mut() {
                axpy(1.0, gr, db);
            }
            if let Some(dx) = dx.as_mut() {
                let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dx = dot(&dxhat, &xhat) / d as f64;
                for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
                    *o = (dxhat[j] - mean_d - xhat[j] * mean_dx) / sd;
                }
            }
        }
        if let Some(dx) = dx {
            accumulate(&mut grads[x.0], dx);
        }
        if let Some(dg) = dgamma {
            accumulate(&mut grads[gamma.0], Matrix::row_vector(&dg));
        }
        if let Some(db) = dbeta {
            accumulate(&mut grads[beta.0], Matrix::row_vector(&db));
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Norm floored away from zero so an all-zero row maps to zero.
fn row_norm(r: &[f64]) -> f64 {
    dot(r, r).sqrt().max(1e-300)
}

fn parents(op: &Op) -> Vec<NodeId> {
    match *op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) => vec![a, b],
        Op::Affine(a, ..)
        | Op::Relu(a)
        | Op::SoftmaxRows(a)
        | Op::MeanRows(a)
        | Op::NormalizeRows(a, _) => vec![a],
        Op::LayerNormRows { x, gamma, beta, .. } => vec![x, gamma, beta],
        Op::Gather { src, .. } => vec![src],
    }
}

fn eval<'v>(op: &Op, get: impl Fn(NodeId) -> &'v Matrix) -> Result<Matrix> {
    Ok(match *op {
        Op::Leaf => unreachable!("leaves carry their own value"),
        Op::MatMul(a, b) => gemm(get(a), get(b))?,
        Op::MatMulNt(a, b) => gemm_nt(get(a), get(b))?,
        Op::Add(a, b) => get(a).add(get(b))?,
        Op::Affine(a, scale, shift) => get(a).map(|v| scale * v + shift),
        Op::Relu(a) => get(a).map(|v| v.max(0.0)),
        Op::SoftmaxRows(a) => {
            let mut m = get(a).clone();
            for r in 0..m.rows() {
                softmax_in_place(m.row_mut(r));
            }
            m
        }
        Op::LayerNormRows {
            x,
            gamma,
            beta,
            eps,
        } => {
            let (xv, gv, bv) = (get(x), get(gamma), get(beta));
            let d = xv.cols();
            if gv.shape() != (1, d) || bv.shape() != (1, d) {
                return Err(Error::shape(
                    "layer_norm_rows",
                    format!(
                        "x {:?} gamma {:?} beta {:?}",
                        xv.shape(),
                        gv.shape(),
                        bv.shape()
                    ),
                ));
            }
            let mut out = Matrix::zeros(xv.rows(), d);
            let (gd, bd) = (gv.data(), bv.data());
            for r in 0..xv.rows() {
                let xr = xv.row(r);
                let (mu, sd) = moments(xr, eps);
                for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                    *o = gd[j] * (xr[j] - mu) / sd + bd[j];
                }
            }
            out
        }
        Op::MeanRows(a) => {
            let m = get(a);
            let mut out = vec![0.0; m.cols()];
            for r in 0..m.rows() {
                axpy(1.0, m.row(r), &mut out);
            }
            let inv = 1.0 / m.rows() as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            Matrix::row_vector(&out)
        }
        Op::NormalizeRows(a, scale) => {
            let mut m = get(a).clone();
            for r in 0..m.rows() {
                let row = m.row_mut(r);
                let k = scale / row_norm(row);
                row.iter_mut().for_each(|v| *v *= k);
            }
            m
        }
        Op::Gather {
            src,
            ref index,
            rows,
            cols,
        } => {
            let s = get(src).data();
            if index.len() != rows * cols {
                return Err(Error::shape(
                    "gather",
                    format!("{} indices for {rows}x{cols}", index.len()),
                ));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= s.len()) {
                return Err(Error::shape(
                    "gather",
                    format!("index {bad} out of {} source values", s.len()),
                ));
            }
            Matrix::from_vec(rows, cols, index.iter().map(|&i| s[i]).collect())?
        }
    })
}
