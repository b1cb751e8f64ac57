use std::rc::Rc;
use std::sync::Arc;

use super::graph::{run_backward, Node, Op};
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Dense N-dimensional array, optionally attached to a gradient graph.
///
/// Data is shared (`Arc`), so cloning and detaching are cheap. A tensor
/// with no node is a plain value; only such tensors cross thread
/// boundaries. Leaf tensors (parameters) own a gradient slot that
/// `backward` accumulates into.
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    pub(crate) node: Option<Rc<Node<T>>>,
    requires_grad: bool,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: self.node.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("has_node", &self.node.is_some())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    /// Plain value tensor (no gradient tracking).
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
            requires_grad: false,
        })
    }

    /// Trainable leaf: owns a gradient slot that backward accumulates into.
    pub fn parameter(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let mut t = Tensor::from_vec(shape, data)?;
        t.node = Some(Rc::new(Node {
            op: Op::Leaf {
                grad: std::cell::RefCell::new(None),
                numel: t.numel(),
            },
        }));
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
            node: None,
            requires_grad: false,
        }
    }

    /// Wraps an already-shared buffer without copying.
    pub(crate) fn from_shared(shape: Vec<usize>, data: Arc<Vec<T>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            node: None,
            requires_grad: false,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.node.as_deref(), Some(Node { op: Op::Leaf { .. } }))
    }

    pub fn has_node(&self) -> bool {
        self.node.is_some()
    }

    /// Mutable access to the underlying buffer (copy-on-write if shared).
    /// Intended for parameter updates; the graph must already be dropped.
    pub fn data_mut(&mut self) -> &mut Vec<T> {
        Arc::make_mut(&mut self.data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Shares the data, drops the graph reference. The detached view never
    /// requires grad; releasing the original handle releases its subgraph.
    pub fn detach(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
            requires_grad: false,
        }
    }

    /// Accumulated gradient of a leaf tensor, if any.
    pub fn grad(&self) -> Option<Vec<T>> {
        match self.node.as_deref() {
            Some(Node {
                op: Op::Leaf { grad, .. },
            }) => grad.borrow().clone(),
            _ => None,
        }
    }

    /// Clears the gradient slot of a leaf tensor.
    pub fn zero_grad(&self) {
        if let Some(Node {
            op: Op::Leaf { grad, .. },
        }) = self.node.as_deref()
        {
            *grad.borrow_mut() = None;
        }
    }

    /// Reverse-mode gradient accumulation from this scalar-shaped tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar-shaped loss, got shape {:?}",
                self.shape
            )));
        }
        match &self.node {
            None => Err(Error::Graph(
                "backward on a detached or graph-free tensor".into(),
            )),
            Some(node) => run_backward(node),
        }
    }

    pub fn shape4(&self) -> Result<[usize; 4]> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok([b, c, h, w]),
            other => Err(Error::Shape(format!("expected 4-D tensor, got {other:?}"))),
        }
    }
}

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
