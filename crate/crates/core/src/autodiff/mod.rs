//! Reverse-mode differentiation on an explicit tape.
//!
//! Ops append nodes in execution order; [`Tape::backward`] walks the record in
//! exact reverse order, consuming the tape. Every forward op fails fast if it
//! produces a non-finite value.

mod kernels;
mod ops;

pub mod gradcheck;

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulConst(Var, Tensor<T>),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Reshape(Var),
    Matmul(Var, Var),
    AddColBias(Var, Var),
    MulBcast0(Var, Var),
    Conv2d { x: Var, w: Var, b: Var, fused_relu: bool },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample { x: Var },
    PointSample { x: Var, pts: Vec<(f64, f64)> },
    Concat0(Vec<Var>),
    SelectRows0 { x: Var, idx: Vec<usize> },
    ScatterRows0 { x: Var, idx: Vec<usize> },
    Softmax { x: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropyMean { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    // (parameter id, node, parameter name)
    bindings: Vec<(u64, Var, String)>,
}

pub struct Tape<T: Scalar> {
    inner: RefCell<TapeInner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                bindings: Vec::new(),
            }),
        }
    }

    pub(crate) fn push(
        &self,
        name: &'static str,
        value: Tensor<T>,
        needs_grad: bool,
        op: Op<T>,
    ) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(Error::NonFinite { op: name, index });
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(Var(id))
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn input(&self, value: Tensor<T>) -> Result<Var> {
        self.push("input", value, false, Op::Leaf)
    }

    /// Differentiable leaf bound to an external parameter identity.
    pub fn param_leaf(&self, id: u64, name: &str, value: Tensor<T>) -> Result<Var> {
        let var = self.push("param", value, true, Op::Leaf)?;
        self.inner
            .borrow_mut()
            .bindings
            .push((id, var, name.to_string()));
        Ok(var)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.inner.borrow().nodes[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().nodes[v.0].value.shape().to_vec()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss. Consumes the tape and returns the
    /// gradient of every bound parameter; parameters that the loss does not
    /// reach get a zero gradient of the right shape.
    pub fn backward(self, loss: Var) -> Result<GradMap<T>> {
        let inner = self.inner.into_inner();
        let nodes = inner.nodes;
        if !nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(nodes[loss.0].value.shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            ops::backward_step(&nodes, id, &g, &mut grads);
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut map: HashMap<u64, Tensor<T>> = HashMap::new();
        for (pid, var, _name) in inner.bindings {
            let grad = grads[var.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(nodes[var.0].value.shape().to_vec()));
            match map.entry(pid) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(grad);
                }
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    let acc = e.get_mut().data_mut();
                    for (a, b) in acc.iter_mut().zip(grad.data()) {
                        *a = *a + *b;
                    }
                }
            }
        }
        Ok(GradMap { map })
    }
}

/// Parameter gradients produced by one backward pass, keyed by parameter id.
pub struct GradMap<T: Scalar> {
    map: HashMap<u64, Tensor<T>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn take(&mut self, id: u64) -> Option<Tensor<T>> {
        self.map.remove(&id)
    }

    pub fn get(&self, id: u64) -> Option<&Tensor<T>> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub(crate) fn add_into<T: Scalar>(slot: &mut Option<Tensor<T>>, inc: Tensor<T>) {
    match slot {
        None => *slot = Some(inc),
        Some(acc) => {
            let data = acc.data_mut();
            for (a, b) in data.iter_mut().zip(inc.data()) {
                *a = *a + *b;
            }
        }
    }
}
