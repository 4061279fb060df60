//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every differentiable path in the crate flows through this module: the
//! augmenter parameters, the segmentation networks, text-fusion attention
//! and all loss terms. Ops are recorded eagerly on a [`Graph`] tape;
//! [`Tensor::backward`] replays the tape in reverse exactly once.
//!
//! A `Graph` and its tensors are confined to one thread (`Rc` interior);
//! independent graphs may run on independent threads.

mod backward;
mod gradcheck;
mod ops;

pub use gradcheck::{
    analytic_gradients, check_gradients, check_gradients_sampled, numeric_gradients,
    relative_error, GradCheckReport,
};
pub use ops::{loss_bce, loss_mse};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Clamp floor used inside the binary cross-entropy loss.
pub const BCE_EPS: f64 = 1e-7;

/// One recorded operation. Input nodes are referenced by tape index; the
/// backward pass reads input values straight from the tape, so ops only
/// store what the forward values cannot reconstruct.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sigmoid(usize),
    Tanh(usize),
    Sin(usize),
    Cos(usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    /// Elementwise multiply by a `[1]` tensor.
    ScaleBy {
        x: usize,
        s: usize,
    },
    /// Elementwise add of a `[1]` tensor.
    OffsetBy {
        x: usize,
        s: usize,
    },
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2 {
        x: usize,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    Sum(usize),
    Mean(usize),
    /// Max over all elements; `argmax` is the flat index that won.
    MaxReduce {
        x: usize,
        argmax: usize,
    },
    Reshape(usize),
    /// Concatenation along axis 0.
    Concat0(Vec<usize>),
    /// `out[c,h,w] = scale[c] * x[c,h,w] + offset[c]`.
    ChannelAffine {
        x: usize,
        scale: usize,
        offset: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
    },
    /// `out[c,h,w] = x[c,h,w] + b[c]`.
    AddChannelBias {
        x: usize,
        b: usize,
    },
    AvgPool2(usize),
    UpsampleNearest2(usize),
    BilinearSample {
        x: usize,
        grid: usize,
    },
    /// Zip two `[n]` tensors into `[n, 2]`.
    Interleave2 {
        a: usize,
        b: usize,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    /// True when this node is a grad leaf or depends on one.
    pub(crate) requires_grad: bool,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Op,
}

#[derive(Debug, Default)]
pub(crate) struct GraphInner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) consumed: bool,
}

/// Recording tape for one forward/backward cycle. Cloning the handle is
/// cheap and shares the tape.
#[derive(Clone, Default)]
pub struct Graph {
    pub(crate) inner: Rc<RefCell<GraphInner>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf tensor. `requires_grad` leaves receive gradients in
    /// `backward`; others are constants.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf data length does not match shape"
        );
        self.push(
            Node {
                shape: shape.to_vec(),
                value: data,
                requires_grad,
                grad: None,
                op: Op::Leaf,
            },
            shape.to_vec(),
        )
    }

    /// Insert a constant (non-differentiable) tensor.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.leaf(data, shape, false)
    }

    /// Constant scalar, shape `[1]`.
    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], &[1])
    }

    pub(crate) fn push(&self, node: Node, shape: Vec<usize>) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Tensor {
            graph: self.clone(),
            id: inner.nodes.len() - 1,
            shape,
        }
    }

    pub(crate) fn same_graph(&self, other: &Graph) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.inner) {
            Ok(())
        } else {
            Err(Error::GraphMismatch)
        }
    }
}

/// Handle to one node on a [`Graph`]. Cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.id, self.shape)
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    /// Forward value of a `[1]` (or single-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.id].value;
        debug_assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient of the last `backward` target w.r.t. this tensor, if one
    /// was recorded.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    /// Re-insert this tensor's value as a constant, cutting it out of the
    /// differentiable path.
    pub fn detach(&self) -> Tensor {
        self.graph.constant(self.value(), &self.shape)
    }

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf (zeros where the leaf is unreachable). A graph
    /// can be walked backward only once.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        backward::run(&self.graph, self.id)
    }
}
