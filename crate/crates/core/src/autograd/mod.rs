//! Define-by-run reverse-mode differentiation.
//!
//! Every operation in [`ops`] executes eagerly and, when any input requires a
//! gradient, records a [`TapeNode`] linking the result to its inputs. The graph
//! therefore exists only as the chain of nodes reachable from a result; it is
//! rebuilt on every forward pass and freed when the result is dropped.
//!
//! [`Tensor::backward`] walks the nodes reachable from a scalar in reverse
//! creation order and accumulates `∂loss/∂leaf` into every leaf that requires
//! a gradient. Gradients add up across calls until [`ops::zero_grads`] or
//! [`Tensor::clear_grad`] resets them.
//!
//! Tensors are cheap handles (`Rc`) and are confined to the thread that made
//! them. In data-parallel runs each worker builds its own replica.

pub mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{Error, Result};

thread_local! {
    static NEXT_NODE_ID: Cell<u64> = const { Cell::new(0) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Identifier of a recorded operation. Ids grow monotonically per thread, so
/// an input's node always has a smaller id than its consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u64);

fn next_node_id() -> NodeId {
    NEXT_NODE_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        NodeId(id)
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Disables tape recording on this thread until dropped.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = GRAD_ENABLED.with(|g| g.replace(false));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

/// Runs `f` with recording disabled.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = NoGradGuard::new();
    f()
}

/// Backward rule of a recorded operation plus whatever it saved at forward
/// time beyond its inputs.
#[derive(Debug)]
pub(crate) enum Op<T> {
    MatMul,
    Add,
    Mul,
    Scale(T),
    Sum,
    BiasAdd,
    Relu,
    SoftmaxCrossEntropy { probs: Vec<T>, labels: Vec<usize> },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::BiasAdd => "bias_add",
            Op::Relu => "relu",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }
}

/// One recorded operation.
pub struct TapeNode<T: Element> {
    id: NodeId,
    op: Op<T>,
    inputs: Vec<Tensor<T>>,
    // Data versions of the inputs when recorded; a mismatch at backward time
    // means an input was mutated in place after being used.
    input_versions: Vec<u64>,
}

impl<T: Element> TapeNode<T> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn op_kind(&self) -> &'static str {
        self.op.kind()
    }

    pub fn inputs(&self) -> &[Tensor<T>] {
        &self.inputs
    }
}

struct TensorInner<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    version: Cell<u64>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    name: Option<String>,
    node: Option<Rc<TapeNode<T>>>,
}

/// An n-dimensional row-major array with an optional gradient slot.
///
/// Cloning a `Tensor` clones the handle, not the data.
pub struct Tensor<T: Element = f64> {
    inner: Rc<TensorInner<T>>,
}

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("name", &self.inner.name)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("node", &self.node_id())
            .finish()
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != len {
        return Err(Error::contract(format!(
            "shape {shape:?} needs {expected} elements, got {len}"
        )));
    }
    Ok(())
}

impl<T: Element> Tensor<T> {
    /// A constant (no gradient).
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self::leaf(shape, data, false, None))
    }

    /// A trainable leaf.
    pub fn parameter(name: impl Into<String>, shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_len(&shape, data.len())?;
        Ok(Self::leaf(shape, data, true, Some(name.into())))
    }

    pub fn scalar(value: T) -> Self {
        Self::leaf(vec![], vec![value], false, None)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::leaf(shape, vec![T::zero(); len], false, None)
    }

    /// Copies the data into a fresh leaf that requires a gradient.
    pub fn into_trainable(self) -> Self {
        let data = self.to_vec();
        Self::leaf(
            self.inner.shape.clone(),
            data,
            true,
            self.inner.name.clone(),
        )
    }

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool, name: Option<String>) -> Self {
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                version: Cell::new(0),
                grad: RefCell::new(None),
                requires_grad,
                name,
                node: None,
            }),
        }
    }

    /// Builds an op result, recording a node when any input requires a
    /// gradient and recording is enabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        op: Op<T>,
        inputs: &[&Tensor<T>],
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let track = is_grad_enabled() && inputs.iter().any(|t| t.inner.requires_grad);
        let node = track.then(|| {
            Rc::new(TapeNode {
                id: next_node_id(),
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                input_versions: inputs.iter().map(|t| t.inner.version.get()).collect(),
            })
        });
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                version: Cell::new(0),
                grad: RefCell::new(None),
                requires_grad: track,
                name: None,
                node,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1 && self.inner.shape.iter().all(|&d| d == 1)
    }

    pub fn name(&self) -> Option<&str> {
        self.inner.name.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn node_id(&self) -> Option<NodeId> {
        self.inner.node.as_ref().map(|n| n.id)
    }

    pub fn node(&self) -> Option<&TapeNode<T>> {
        self.inner.node.as_deref()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    /// First element; convenient for scalar losses.
    pub fn item(&self) -> T {
        self.inner.data.borrow()[0]
    }

    /// Mutable access to the data. Bumps the version so a graph that already
    /// consumed this tensor refuses to backpropagate through stale values.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.version.set(self.inner.version.get() + 1);
        self.inner.data.borrow_mut()
    }

    pub fn set_data(&self, values: &[T]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: self.inner.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        self.data_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<T>>> {
        self.inner.grad.borrow()
    }

    /// Overwrites the gradient slot.
    pub fn set_grad(&self, values: &[T]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape {
                op: "set_grad",
                lhs: self.inner.shape.clone(),
                rhs: vec![values.len()],
            });
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g.copy_from_slice(values),
            None => *slot = Some(values.to_vec()),
        }
        Ok(())
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g = *g + *d),
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Backpropagates from this scalar, accumulating into every reachable
    /// leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.requires_grad {
            return Err(Error::contract(
                "backward called on a tensor that is not connected to the tape",
            ));
        }
        let seed = vec![T::one()];
        let Some(root) = self.inner.node.clone() else {
            // A scalar leaf differentiated with respect to itself.
            self.accumulate_grad(&seed);
            return Ok(());
        };

        // Every node reachable from the root, visited once.
        let mut nodes: Vec<Rc<TapeNode<T>>> = Vec::new();
        let mut seen: HashSet<NodeId> = HashSet::new();
        let mut stack = vec![root.clone()];
        seen.insert(root.id);
        while let Some(node) = stack.pop() {
            for input in &node.inputs {
                if let Some(child) = &input.inner.node {
                    if seen.insert(child.id) {
                        stack.push(child.clone());
                    }
                }
            }
            nodes.push(node);
        }
        // Reverse creation order is a valid topological order.
        nodes.sort_unstable_by_key(|n| std::cmp::Reverse(n.id));

        let mut pending: HashMap<NodeId, Vec<T>> = HashMap::new();
        pending.insert(root.id, seed);
        for node in nodes {
            let Some(upstream) = pending.remove(&node.id) else {
                continue;
            };
            for (input, &version) in node.inputs.iter().zip(&node.input_versions) {
                if input.inner.requires_grad && input.inner.version.get() != version {
                    return Err(Error::contract(format!(
                        "{} input {:?} was modified in place after the forward pass",
                        node.op.kind(),
                        input.name().unwrap_or("<unnamed>")
                    )));
                }
            }
            let input_grads = ops::backward_rule(&node.op, &node.inputs, &upstream);
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                if !input.inner.requires_grad {
                    continue;
                }
                match &input.inner.node {
                    Some(child) => match pending.get_mut(&child.id) {
                        Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a = *a + *g),
                        None => {
                            pending.insert(child.id, grad);
                        }
                    },
                    None => input.accumulate_grad(&grad),
                }
            }
        }
        Ok(())
    }
}
