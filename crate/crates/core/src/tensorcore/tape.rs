//! Reverse-mode autodiff over a flat op tape.
//!
//! Each forward op appends a node holding its output value and enough
//! metadata to replay the chain rule. `backward` walks the tape once in
//! reverse, accumulating vector-Jacobian products into per-node gradient
//! buffers. Gradients are allocated lazily: nodes the loss never touches
//! stay `None` and read back as zero.

use crate::error::{BootError, Result};
use crate::tensorcore::tensor::{matmul_a_bt_accum, matmul_at_b_accum, matmul_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// [m,n] plus a length-n bias broadcast across rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Per-row constant coefficients; the coefficients themselves carry no
    /// gradient.
    RowScale(NodeId, Vec<f64>),
    Silu(NodeId),
    ConcatCols(Vec<NodeId>),
    /// Row lookup into a [vocab, dim] table; backward scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    Sum(NodeId),
    StopGradient,
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient buffers produced by `Tape::backward`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node, or `None` if the loss
    /// does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    /// Like `get`, but materializes zeros for untouched nodes.
    pub fn dense(&self, id: NodeId, len: usize) -> Vec<f64> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![0.0; len],
        }
    }
}

fn same_shape(context: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(BootError::shape(
            context,
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a tape leaf. Leaves receive gradients like any
    /// other node; whether they are parameters or constants is the caller's
    /// bookkeeping.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(BootError::shape(
                "matmul",
                format!("[m,k] x [k,n], got lhs {:?}", va.shape()),
                format!("rhs {:?}", vb.shape()),
            ));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), m, k, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("sub", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::Mul(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let n = va.cols();
        if vb.shape() != [n] {
            return Err(BootError::shape(
                "add_row",
                format!("bias [{n}]"),
                format!("{:?}", vb.shape()),
            ));
        }
        let m = va.rows();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(va.data()[i * n + j] + vb.data()[j]);
            }
        }
        Ok(self.push(Tensor::new(va.shape().to_vec(), data)?, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }

    pub fn row_scale(&mut self, a: NodeId, coeffs: &[f64]) -> Result<NodeId> {
        let va = &self.nodes[a.0].value;
        let (m, n) = (va.rows(), va.cols());
        if coeffs.len() != m {
            return Err(BootError::shape(
                "row_scale",
                format!("{m} row coefficients"),
                format!("{}", coeffs.len()),
            ));
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let c = coeffs[i];
            for j in 0..n {
                data.push(va.data()[i * n + j] * c);
            }
        }
        Ok(self.push(
            Tensor::new(va.shape().to_vec(), data)?,
            Op::RowScale(a, coeffs.to_vec()),
        ))
    }

    /// x / (1 + e^-x); the same expression is used by the no-tape inference
    /// path so both produce bit-identical values.
    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|x| x / (1.0 + (-x).exp()));
        self.push(value, Op::Silu(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(BootError::contract("concat_cols over an empty list"));
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != m {
                return Err(BootError::shape(
                    "concat_cols",
                    format!("{m} rows"),
                    format!("{}", v.rows()),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(i));
            }
        }
        Ok(self.push(
            Tensor::new(vec![m, total], data)?,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let vt = &self.nodes[table.0].value;
        if vt.shape().len() != 2 {
            return Err(BootError::shape(
                "gather_rows",
                "[vocab, dim] table",
                format!("{:?}", vt.shape()),
            ));
        }
        let (vocab, dim) = (vt.shape()[0], vt.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &ix in indices {
            if ix >= vocab {
                return Err(BootError::contract(format!(
                    "gather_rows index {ix} out of range for vocab {vocab}"
                )));
            }
            data.extend_from_slice(vt.row(ix));
        }
        Ok(self.push(
            Tensor::new(vec![indices.len(), dim], data)?,
            Op::GatherRows(table, indices.to_vec()),
        ))
    }

    /// Sum of all entries, producing a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Identity forward; backward treats the input as a constant.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::StopGradient)
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient buffer
    /// per node; untouched nodes stay `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(BootError::contract(format!(
                "backward expects a scalar loss node, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            // Detach this node's buffer while its inputs accumulate into the
            // same vector; it is restored at the end of the iteration.
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf | Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    let ga = ensure(&mut grads, *a, m * k);
                    matmul_a_bt_accum(&g, vb.data(), m, k, n, ga);
                    let gb = ensure(&mut grads, *b, k * n);
                    matmul_at_b_accum(va.data(), &g, m, k, n, gb);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, &g, 1.0);
                    accum(&mut grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, &g, 1.0);
                    accum(&mut grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = ensure(&mut grads, *a, g.len());
                    for (gi, (gv, bv)) in ga.iter_mut().zip(g.iter().zip(vb.data())) {
                        *gi += gv * bv;
                    }
                    let gb = ensure(&mut grads, *b, g.len());
                    for (gi, (gv, av)) in gb.iter_mut().zip(g.iter().zip(va.data())) {
                        *gi += gv * av;
                    }
                }
                Op::AddRow(a, bias) => {
                    accum(&mut grads, *a, &g, 1.0);
                    let n = self.nodes[bias.0].value.len();
                    let gb = ensure(&mut grads, *bias, n);
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % n] += gv;
                    }
                }
                Op::Scale(a, c) => accum(&mut grads, *a, &g, *c),
                Op::RowScale(a, coeffs) => {
                    let n = g.len() / coeffs.len();
                    let ga = ensure(&mut grads, *a, g.len());
                    for (i, c) in coeffs.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * c;
                        }
                    }
                }
                Op::Silu(a) => {
                    let va = &self.nodes[a.0].value;
                    let ga = ensure(&mut grads, *a, g.len());
                    for (gi, (gv, &x)) in ga.iter_mut().zip(g.iter().zip(va.data())) {
                        let s = sigmoid(x);
                        *gi += gv * (s + x * s * (1.0 - s));
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = self.nodes[i].value.rows();
                    let total = self.nodes[i].value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let gp = ensure(&mut grads, p, m * w);
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherRows(table, indices) => {
                    let vt = &self.nodes[table.0].value;
                    let dim = vt.shape()[1];
                    let gt = ensure(&mut grads, *table, vt.len());
                    for (r, &ix) in indices.iter().enumerate() {
                        for c in 0..dim {
                            gt[ix * dim + c] += g[r * dim + c];
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    let ga = ensure(&mut grads, *a, n);
                    for gi in ga.iter_mut() {
                        *gi += g[0];
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn accum(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64], scale: f64) {
    let buf = ensure(grads, id, g.len());
    for (b, gv) in buf.iter_mut().zip(g) {
        *b += gv * scale;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
