//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle onto a shared buffer. Tensors produced by
//! operations carry a backpointer (`node`) into the computation graph; leaves
//! (parameters, constants) carry none. Node ids grow strictly with creation
//! order, so the inputs of any node always have smaller ids than the node
//! itself and sorting by id yields a topological order.
//!
//! Gradients accumulate across `backward` calls; [`Tensor::zero_grad`] resets
//! them. Graph construction and backward are single-threaded; tensors without
//! a graph attachment are plain immutable buffers.

mod gradcheck;
mod ops;

pub use gradcheck::{check_gradients, finite_diff, GradCheckReport};
pub use ops::{
    add_to_row, batchnorm_eval, batchnorm_train, concat_cols, gather_rows, pool, PoolMethod,
};

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use ops::Op;

/// Errors from tensor construction and operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the shape.
    InvalidShape { shape: Vec<usize>, data_len: usize },
    /// Two operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An operation required a different rank than it was given.
    RankError {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    /// `backward` was called on a non-scalar tensor.
    NotScalar { shape: Vec<usize> },
    /// A pooling operation received an empty stack.
    EmptyStack,
    /// Batch normalization in train mode needs a batch of at least 2.
    DegenerateBatch { batch: usize },
    /// A reduction was asked to run over zero rows.
    EmptyInput { op: &'static str },
    /// An index-based operation went out of bounds.
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    /// A label outside {0, 1} was passed to a binary loss.
    InvalidLabel { label: f64 },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidShape { shape, data_len } => {
                write!(f, "shape {shape:?} does not match data length {data_len}")
            }
            Self::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Self::RankError { op, expected, shape } => {
                write!(f, "{op}: expected rank {expected}, got shape {shape:?}")
            }
            Self::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Self::EmptyStack => write!(f, "pool: empty stack"),
            Self::DegenerateBatch { batch } => {
                write!(f, "batchnorm: train mode needs batch >= 2, got {batch}")
            }
            Self::EmptyInput { op } => write!(f, "{op}: empty input"),
            Self::IndexOutOfBounds { op, index, bound } => {
                write!(f, "{op}: index {index} out of bounds {bound}")
            }
            Self::InvalidLabel { label } => write!(f, "label must be 0 or 1, got {label}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    /// Backpointer into the computation graph; `None` for leaves.
    node: Option<Node>,
}

/// One recorded operation: the op tag plus the saved activations its
/// backward pass needs. Inputs are held as tensor handles.
pub(crate) struct Node {
    pub(crate) op: Op,
}

/// Handle onto a dense n-dimensional array of f64 in row-major order.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("leaf", &self.inner.node.is_none())
            .finish()
    }
}

impl Tensor {
    /// A leaf tensor. Pass `requires_grad = true` for trainable parameters.
    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                data_len: data.len(),
            });
        }
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node: None,
            }),
        })
    }

    /// A constant leaf (no gradient tracking).
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Self::leaf(data, shape, false)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::constant(vec![v], &[1]).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Tensor {
        let numel: usize = shape.iter().product();
        Self::leaf(vec![0.0; numel], shape, requires_grad).expect("zeros shape")
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        let requires_grad = op.inputs().iter().any(|t| t.inner.requires_grad);
        let node = if requires_grad { Some(Node { op }) } else { None };
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                node,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor. Panics on anything else; use only
    /// where the shape is known by construction.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar_value on shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Overwrite the buffer in place (optimizer updates, checkpoint load).
    pub fn set_data(&self, values: &[f64]) {
        let mut data = self.inner.data.borrow_mut();
        assert_eq!(data.len(), values.len(), "set_data length mismatch");
        data.copy_from_slice(values);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn node(&self) -> Option<&Node> {
        self.inner.node.as_ref()
    }

    /// Reverse-mode sweep from a scalar loss. Visits each reachable graph
    /// node exactly once in reverse topological order and accumulates
    /// gradients into every `requires_grad` leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.shape().to_vec(),
            });
        }
        if !self.inner.requires_grad {
            return Ok(());
        }

        // Iterative DFS postorder: inputs land before their consumers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = t.node() {
                for input in node.op.inputs() {
                    if input.inner.requires_grad && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let g = match grads.remove(&t.id()) {
                Some(g) => g,
                None => continue,
            };
            match t.node() {
                Some(node) => node.op.backward(&g, &mut grads),
                None => {
                    let mut slot = t.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(buf) => {
                            for (b, v) in buf.iter_mut().zip(&g) {
                                *b += v;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, target: &Tensor, contribution: Vec<f64>) {
    if !target.requires_grad() {
        return;
    }
    match grads.entry(target.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (b, v) in e.get_mut().iter_mut().zip(&contribution) {
                *b += v;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contribution);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
