//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! A [`Tensor`] is plain data: a shape and a row-major value buffer. A
//! [`DiffTensor`] wraps a tensor and, optionally, a handle to the node that
//! produced it on a [`Tape`]. Tensors without a tape handle behave as
//! constants. Every op records a node as soon as one of its inputs is tracked,
//! and the backward sweep expresses each vector-Jacobian product with the
//! same ops, so a backward pass can itself be recorded (see
//! [`backward_graph`]) and differentiated again.
//!
//! ```
//! use selftpt_core::tensor::{backward, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = x.mul(&x).unwrap().sum();
//! let g = backward(&y, &[&x]).unwrap();
//! assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
//! ```

mod backward;
mod hvp;
mod ops;

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::{backward, backward_graph, gradient};
pub use hvp::{hessian_vector_product, HvpBackend};
pub use ops::{apply, OpKind};

/// Errors raised by tensor construction and tensor ops.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {got} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: input has a non-positive entry {value}")]
    NonPositive { op: &'static str, value: f64 },
    #[error("{op}: input has zero norm")]
    ZeroNorm { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: inputs are recorded on different tapes")]
    TapeMismatch { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense array of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count of a matrix; a vector's length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected: n,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Scale(f64),
    Mul,
    Div,
    MatMul { ta: bool, tb: bool },
    Tanh,
    Relu,
    Exp,
    Log,
    Sqrt,
    Sum,
    Broadcast(Vec<usize>),
    RowSum,
    ExpandCols(usize),
    ColSum,
    ExpandRows(usize),
    ConcatRows,
    SliceRows { start: usize, end: usize },
    PadRows { start: usize, total: usize },
    Reshape(Vec<usize>),
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) inputs: Vec<usize>,
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of tracked operations for one computation context.
///
/// Cloning a tape clones the handle; both clones append to the same record.
#[derive(Clone, Default)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> DiffTensor {
        let value = Rc::new(value);
        let id = self.push(Op::Leaf, Vec::new(), value.clone(), true);
        DiffTensor {
            value,
            node: Some(NodeRef { tape: self.clone(), id }),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.nodes, &other.nodes)
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<usize>, value: Rc<Tensor>, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        nodes.len() - 1
    }

    pub(crate) fn with_node<R>(&self, id: usize, f: impl FnOnce(&Node) -> R) -> R {
        f(&self.nodes.borrow()[id])
    }

    pub(crate) fn tracked(&self, id: usize) -> DiffTensor {
        let value = self.with_node(id, |n| n.value.clone());
        DiffTensor {
            value,
            node: Some(NodeRef { tape: self.clone(), id }),
        }
    }
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

/// A tensor value plus an optional handle into a gradient tape.
#[derive(Clone)]
pub struct DiffTensor {
    value: Rc<Tensor>,
    node: Option<NodeRef>,
}

impl fmt::Debug for DiffTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffTensor")
            .field("shape", &self.value.shape)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}

impl From<Tensor> for DiffTensor {
    fn from(t: Tensor) -> Self {
        Self::constant(t)
    }
}

impl DiffTensor {
    /// An untracked tensor; it receives no gradient.
    pub fn constant(value: Tensor) -> Self {
        Self {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        &self.value.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.value.data
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn tape(&self) -> Option<&Tape> {
        self.node.as_ref().map(|n| &n.tape)
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> DiffTensor {
        Self {
            value: self.value.clone(),
            node: None,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }

    pub(crate) fn from_parts(value: Rc<Tensor>, node: Option<NodeRef>) -> Self {
        Self { value, node }
    }
}
