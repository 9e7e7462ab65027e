//! Reverse-mode differentiation over a per-pass tape.
//!
//! A [`Tape`] records every value produced during one forward pass together
//! with the parents and the saved context its backward rule needs. Nodes are
//! appended in evaluation order, so walking indices in reverse is a reverse
//! topological order and the tape cannot contain cycles.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Mul,
    MatMul,
    ConcatLast,
    Sum,
    Reshape,
    Conv1d,
    Elu,
    Relu,
    Sigmoid,
    MaxPool,
    AvgPool,
    BatchNorm,
    Linear,
    Softmax,
    GlobalAvgPool,
    ScaleChannels,
    LastStep,
    SoftmaxCrossEntropy,
}

/// Backward rule of a recorded operation.
///
/// `grads_out` is ∂loss/∂output; the rule returns ∂loss/∂input for each
/// parent whose `needs` flag is set and `None` for the others.
pub trait Backward {
    fn kind(&self) -> OpKind;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Value<'p> {
    Owned(Tensor),
    Param(&'p Tensor),
}

enum Source {
    Op(Box<dyn Backward>),
    Leaf,
    Param(ParamId),
    Constant,
}

struct Node<'p> {
    value: Value<'p>,
    parents: Vec<Var>,
    source: Source,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, waiting to be
/// folded into the running buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// One forward pass worth of recorded operations.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node<'p>>,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    /// A tape that can read parameters from `store` without copying them.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            params: Some(store),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input tensor; gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push_node(Node {
            value: Value::Owned(tensor),
            parents: Vec::new(),
            source: Source::Leaf,
            requires_grad,
        })
    }

    /// Value that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_node(Node {
            value: Value::Owned(tensor),
            parents: Vec::new(),
            source: Source::Constant,
            requires_grad: false,
        })
    }

    /// The node for parameter `id`, created on first use.
    ///
    /// Panics when the tape was built without a parameter store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let tensor = store.get(id);
        let var = self.push_node(Node {
            value: Value::Param(tensor),
            parents: Vec::new(),
            source: Source::Param(id),
            requires_grad: tensor.requires_grad(),
        });
        self.param_vars.insert(id, var);
        var
    }

    pub fn value(&self, var: Var) -> &Tensor {
        match &self.nodes[var.0].value {
            Value::Owned(t) => t,
            Value::Param(t) => t,
        }
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Operation tag recorded for `var`, if it was produced by an op that
    /// takes part in differentiation.
    pub fn op_kind(&self, var: Var) -> Option<OpKind> {
        match &self.nodes[var.0].source {
            Source::Op(op) => Some(op.kind()),
            _ => None,
        }
    }

    pub fn parents(&self, var: Var) -> &[Var] {
        &self.nodes[var.0].parents
    }

    /// Records the result of an operation. The backward rule is kept only
    /// when some parent requires a gradient.
    pub fn push(&mut self, value: Tensor, parents: &[Var], op: impl Backward + 'static) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let source = if requires_grad {
            Source::Op(Box::new(op))
        } else {
            Source::Constant
        };
        self.push_node(Node {
            value: Value::Owned(value),
            parents: if requires_grad {
                parents.to_vec()
            } else {
                Vec::new()
            },
            source,
            requires_grad,
        })
    }

    fn push_node(&mut self, node: Node<'p>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn record_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stat_updates
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Computes ∂loss/∂v for every leaf and parameter reachable from `loss`.
    ///
    /// The tape is left intact, so calling this twice yields the same
    /// gradients; accumulation happens when the caller adds them into a
    /// [`ParamStore`].
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.source {
                Source::Op(op) => {
                    let inputs: Vec<&Tensor> =
                        node.parents.iter().map(|&p| self.value(p)).collect();
                    let needs: Vec<bool> = node
                        .parents
                        .iter()
                        .map(|p| self.nodes[p.0].requires_grad)
                        .collect();
                    let output = self.value(Var(idx));
                    let parent_grads = op.backward(&inputs, output, &grad_out, &needs);
                    debug_assert_eq!(parent_grads.len(), node.parents.len());
                    for (&parent, g) in node.parents.iter().zip(parent_grads) {
                        let Some(g) = g else { continue };
                        debug_assert_eq!(g.len(), self.value(parent).numel());
                        match &mut grads[parent.0] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                Source::Leaf => {
                    leaves.insert(Var(idx), grad_out);
                }
                Source::Param(id) => params.push((*id, grad_out)),
                Source::Constant => {}
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { leaves, params })
    }
}

/// Result of one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .binary_search_by_key(&id, |(p, _)| *p)
            .ok()
            .map(|i| self.params[i].1.as_slice())
    }

    /// Parameter gradients in declaration order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

struct AddOp;

impl Backward for AddOp {
    fn kind(&self) -> OpKind {
        OpKind::Add
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        needs.iter().map(|&n| n.then(|| g.to_vec())).collect()
    }
}

struct MulOp;

impl Backward for MulOp {
    fn kind(&self) -> OpKind {
        OpKind::Mul
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let times = |other: &[f64]| g.iter().zip(other).map(|(g, o)| g * o).collect();
        vec![needs[0].then(|| times(b)), needs[1].then(|| times(a))]
    }
}

struct MatMulOp;

impl Backward for MatMulOp {
    fn kind(&self) -> OpKind {
        OpKind::MatMul
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let gv = MatRef::rows(g, 0, m, n);
        let da = needs[0].then(|| {
            let mut da = vec![0.0; m * k];
            gemm(
                gv,
                MatRef::rows(b.data(), 0, k, n).t(),
                0.0,
                MatMut::rows(&mut da, 0, m, k),
            );
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![0.0; k * n];
            gemm(
                MatRef::rows(a.data(), 0, m, k).t(),
                gv,
                0.0,
                MatMut::rows(&mut db, 0, k, n),
            );
            db
        });
        vec![da, db]
    }
}

struct ConcatLastOp {
    left_width: usize,
    right_width: usize,
}

impl Backward for ConcatLastOp {
    fn kind(&self) -> OpKind {
        OpKind::ConcatLast
    }

    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (l, r) = (self.left_width, self.right_width);
        let rows = g.len() / (l + r);
        let split = |start: usize, width: usize| {
            let mut out = Vec::with_capacity(rows * width);
            for row in g.chunks_exact(l + r) {
                out.extend_from_slice(&row[start..start + width]);
            }
            out
        };
        vec![needs[0].then(|| split(0, l)), needs[1].then(|| split(l, r))]
    }
}

struct SumOp;

impl Backward for SumOp {
    fn kind(&self) -> OpKind {
        OpKind::Sum
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        g: &[f64],
        _: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

struct ReshapeOp;

impl Backward for ReshapeOp {
    fn kind(&self) -> OpKind {
        OpKind::Reshape
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

impl<'p> Tape<'p> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, &[a, b], AddOp))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, &[a, b], MulOp))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::rows(ta.data(), 0, m, k),
            MatRef::rows(tb.data(), 0, k, n),
            0.0,
            MatMut::rows(&mut out, 0, m, n),
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], MatMulOp))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(mismatch("concat_last", ta, tb));
        }
        let (l, r) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for (ra, rb) in ta.data().chunks_exact(l).zip(tb.data().chunks_exact(r)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = l + r;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            &[a, b],
            ConcatLastOp {
                left_width: l,
                right_width: r,
            },
        ))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], SumOp)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, &[a], ReshapeOp))
    }
}
