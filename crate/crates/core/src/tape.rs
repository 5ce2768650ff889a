//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records tensor operations during a forward pass and replays
//! them in reverse to accumulate gradients. Tapes are cheap to build and are
//! rebuilt for every forward pass; nothing is retained between updates.

use std::collections::BTreeMap;

use crate::tensor::{self, Tensor, TensorError};

pub const LOG_CLAMP_EPS: f64 = 1e-12;

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LnClamped(NodeId),
    Softmax(NodeId),
    Concat(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    RowSum(NodeId),
    Mean(NodeId),
    Sum(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    name: Option<String>,
}

/// Gradients produced by [`Tape::backward`].
///
/// Named leaves that did not contribute to the loss report exact zeros.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    named: Vec<(String, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the node; zeros if the node is unused.
    pub fn for_node(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    /// All named leaves and their gradients, zero-filled where unused.
    pub fn named_map(&self) -> BTreeMap<String, Tensor> {
        self.named
            .iter()
            .map(|(name, idx)| (name.clone(), self.for_node(NodeId(*idx))))
            .collect()
    }

    /// Named gradients whose name starts with `prefix/`, with the prefix
    /// stripped.
    pub fn named_map_for_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let full = format!("{prefix}/");
        self.named
            .iter()
            .filter_map(|(name, idx)| {
                name.strip_prefix(&full)
                    .map(|rest| (rest.to_string(), self.for_node(NodeId(*idx))))
            })
            .collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.iter().map(|(n, _)| n.as_str())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
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

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.numel(), 1);
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, name: Option<String>) -> NodeId {
        self.nodes.push(Node { op, value, name });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a constant leaf: it never receives a named gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, None)
    }

    /// Inserts a named parameter leaf; gradients are reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, Some(name.into()))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.is_matrix() || !vb.is_matrix() || va.cols() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let value = tensor::matmul(va, vb);
        Ok(self.push(Op::MatMul(a, b), value, None))
    }

    /// `[b,n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if !vx.is_matrix() || vb.rank() != 1 || vx.cols() != vb.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let cols = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % cols])
            .collect();
        let value = Tensor::from_raw(vx.shape().to_vec(), data);
        Ok(self.push(Op::AddBias(x, bias), value, None))
    }

    fn elementwise_pair(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_raw(va.shape().to_vec(), data);
        Ok(self.push(op, value, None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v * factor);
        self.push(Op::Scale(a, factor), value, None)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v.max(0.0));
        self.push(Op::Relu(a), value, None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(f64::tanh);
        self.push(Op::Tanh(a), value, None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid(a), value, None)
    }

    /// `ln(max(x, 1e-12))`; the clamped region has zero gradient.
    pub fn ln_clamped(&mut self, a: NodeId) -> NodeId {
        let value = self.nodes[a.0].value.map(|v| v.max(LOG_CLAMP_EPS).ln());
        self.push(Op::LnClamped(a), value, None)
    }

    /// Row-wise softmax of a `[b,n]` matrix, max-subtracted for stability.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if !va.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "softmax",
                shape: va.shape().to_vec(),
            });
        }
        let value = tensor::softmax_rows(va);
        Ok(self.push(Op::Softmax(a), value, None))
    }

    /// Concatenates two matrices along columns.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !va.is_matrix() || !vb.is_matrix() || va.rows() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (rows, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let value = Tensor::from_raw(vec![rows, ca + cb], data);
        Ok(self.push(Op::Concat(a, b), value, None))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if !va.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "slice_cols",
                shape: va.shape().to_vec(),
            });
        }
        let cols = va.cols();
        if start >= end || end > cols {
            return Err(TensorError::BadColumnRange {
                op: "slice_cols",
                start,
                end,
                cols,
            });
        }
        let rows = va.rows();
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&va.row(r)[start..end]);
        }
        let value = Tensor::from_raw(vec![rows, width], data);
        Ok(self.push(Op::SliceCols(a, start, end), value, None))
    }

    /// Sums each row of a matrix: `[b,n] -> [b,1]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.nodes[a.0].value;
        if !va.is_matrix() {
            return Err(TensorError::NotAMatrix {
                op: "row_sum",
                shape: va.shape().to_vec(),
            });
        }
        let (rows, cols) = (va.rows(), va.cols());
        let data = (0..rows)
            .map(|r| va.row(r).iter().sum())
            .collect::<Vec<f64>>();
        let value = Tensor::from_raw(vec![rows, 1], data);
        Ok(self.push(Op::RowSum(a), value, None))
    }

    /// Mean of all entries: `[..] -> [1]`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let n = va.numel() as f64;
        let value = Tensor::scalar(va.data().iter().sum::<f64>() / n);
        self.push(Op::Mean(a), value, None)
    }

    /// Sum of all entries: `[..] -> [1]`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Tensor::scalar(va.data().iter().sum());
        self.push(Op::Sum(a), value, None)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NotAMatrix {
                op: "backward(scalar loss)",
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }

        let named = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.as_ref().map(|name| (name.clone(), i)))
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads,
            named,
            shapes,
        })
    }

    fn accumulate(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let ga = tensor::matmul_nt(grad, vb); // g * b^T
                let gb = tensor::matmul_tn(va, grad); // a^T * g
                add_into(grads, a.0, ga);
                add_into(grads, b.0, gb);
            }
            Op::AddBias(x, bias) => {
                add_into(grads, x.0, grad.clone());
                let cols = self.nodes[bias.0].value.numel();
                let mut gb = vec![0.0; cols];
                for (i, &g) in grad.data().iter().enumerate() {
                    gb[i % cols] += g;
                }
                add_into(grads, bias.0, Tensor::from_raw(vec![cols], gb));
            }
            Op::Add(a, b) => {
                add_into(grads, a.0, grad.clone());
                add_into(grads, b.0, grad.clone());
            }
            Op::Sub(a, b) => {
                add_into(grads, a.0, grad.clone());
                add_into(grads, b.0, grad.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                add_into(grads, a.0, elementwise(grad, vb, |g, y| g * y));
                add_into(grads, b.0, elementwise(grad, va, |g, x| g * x));
            }
            Op::Scale(a, factor) => {
                add_into(grads, a.0, grad.map(|g| g * factor));
            }
            Op::Relu(a) => {
                let va = &self.nodes[a.0].value;
                add_into(
                    grads,
                    a.0,
                    elementwise(grad, va, |g, x| if x > 0.0 { g } else { 0.0 }),
                );
            }
            Op::Tanh(a) => {
                let y = &node.value;
                add_into(grads, a.0, elementwise(grad, y, |g, y| g * (1.0 - y * y)));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                add_into(grads, a.0, elementwise(grad, y, |g, y| g * y * (1.0 - y)));
            }
            Op::LnClamped(a) => {
                let va = &self.nodes[a.0].value;
                add_into(
                    grads,
                    a.0,
                    elementwise(grad, va, |g, x| {
                        if x > LOG_CLAMP_EPS {
                            g / x
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut gx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let gr = &grad.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(&y, &g)| y * g).sum();
                    let out = &mut gx[r * cols..(r + 1) * cols];
                    for ((o, &y), &g) in out.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                        *o = y * (g - dot);
                    }
                }
                add_into(grads, a.0, Tensor::from_raw(vec![rows, cols], gx));
            }
            Op::Concat(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (rows, ca, cb) = (va.rows(), va.cols(), vb.cols());
                let mut ga = vec![0.0; rows * ca];
                let mut gb = vec![0.0; rows * cb];
                for r in 0..rows {
                    let grow = &grad.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                    ga[r * ca..(r + 1) * ca].copy_from_slice(&grow[..ca]);
                    gb[r * cb..(r + 1) * cb].copy_from_slice(&grow[ca..]);
                }
                add_into(grads, a.0, Tensor::from_raw(vec![rows, ca], ga));
                add_into(grads, b.0, Tensor::from_raw(vec![rows, cb], gb));
            }
            Op::SliceCols(a, start, end) => {
                let va = &self.nodes[a.0].value;
                let (rows, cols) = (va.rows(), va.cols());
                let width = end - start;
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let grow = &grad.data()[r * width..(r + 1) * width];
                    ga[r * cols + start..r * cols + end].copy_from_slice(grow);
                }
                add_into(grads, a.0, Tensor::from_raw(vec![rows, cols], ga));
            }
            Op::RowSum(a) => {
                let va = &self.nodes[a.0].value;
                let (rows, cols) = (va.rows(), va.cols());
                let mut ga = vec![0.0; rows * cols];
                for r in 0..rows {
                    let g = grad.data()[r];
                    for o in &mut ga[r * cols..(r + 1) * cols] {
                        *o = g;
                    }
                }
                add_into(grads, a.0, Tensor::from_raw(vec![rows, cols], ga));
            }
            Op::Mean(a) => {
                let va = &self.nodes[a.0].value;
                let g = grad.data()[0] / va.numel() as f64;
                add_into(grads, a.0, Tensor::full(va.shape().to_vec(), g));
            }
            Op::Sum(a) => {
                let va = &self.nodes[a.0].value;
                let g = grad.data()[0];
                add_into(grads, a.0, Tensor::full(va.shape().to_vec(), g));
            }
        }
    }
}

fn elementwise(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_raw(a.shape().to_vec(), data)
}

fn add_into(grads: &mut [Option<Tensor>], idx: usize, add: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, a) in existing.data_mut().iter_mut().zip(add.data().iter()) {
                *e += a;
            }
        }
        slot @ None => *slot = Some(add),
    }
}
