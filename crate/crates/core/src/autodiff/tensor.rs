use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

use super::array::Array;
use super::kernels::ConvGeom;
use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Whether newly created tensors record their producing operation.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Restores the previous recording mode when dropped.
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

/// The operation that produced a tensor, with whatever it needs to build its
/// vector-Jacobian product out of further differentiable ops.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar,
    Exp,
    Ln,
    Sqrt,
    Sigmoid,
    Softplus,
    /// Elementwise product with a constant mask (relu and friends).
    MaskMul(Rc<[f64]>),
    MatMul,
    Transpose,
    Reshape,
    ExpandTo,
    ReduceTo,
    Slice {
        axis: usize,
        start: usize,
    },
    Pad {
        axis: usize,
        start: usize,
    },
    Conv2d(ConvGeom),
    ConvInputGrad(ConvGeom),
    ConvWeightGrad(ConvGeom),
    AvgPool(usize),
    AvgPoolAdjoint(usize),
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Sqrt => "sqrt",
            Op::Sigmoid => "sigmoid",
            Op::Softplus => "softplus",
            Op::MaskMul(_) => "mask_mul",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape => "reshape",
            Op::ExpandTo => "expand_to",
            Op::ReduceTo => "reduce_to",
            Op::Slice { .. } => "slice_axis",
            Op::Pad { .. } => "pad_axis",
            Op::Conv2d(_) => "conv2d",
            Op::ConvInputGrad(_) => "conv2d_input_grad",
            Op::ConvWeightGrad(_) => "conv2d_weight_grad",
            Op::AvgPool(_) => "avg_pool2d",
            Op::AvgPoolAdjoint(_) => "avg_pool2d_adjoint",
        }
    }
}

pub(crate) struct GradFn {
    pub op: Op,
    pub inputs: Vec<Tensor>,
}

pub(crate) struct Node {
    pub value: Array,
    pub requires_grad: bool,
    pub grad_fn: Option<GradFn>,
}

/// A value in the computation graph.
///
/// Cloning is cheap (reference counted). Tensors are single-threaded; use
/// [`Tensor::to_array`] to move values across threads.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.op.name()))
            .finish()
    }
}

impl Tensor {
    fn leaf(value: Array, requires_grad: bool) -> Self {
        Tensor {
            node: Rc::new(Node {
                value,
                requires_grad,
                grad_fn: None,
            }),
        }
    }

    /// Leaf that gradients are taken with respect to.
    pub fn param(value: Array) -> Self {
        Self::leaf(value, true)
    }

    pub fn constant(value: Array) -> Self {
        Self::leaf(value, false)
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Array::scalar(value))
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        Ok(Self::constant(Array::new(shape.to_vec(), data)?))
    }

    /// Wraps a freshly computed value. The result joins the graph when
    /// recording is on and some input requires grad.
    pub(crate) fn from_op(value: Array, op: Op, inputs: Vec<Tensor>) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let track = is_grad_enabled() && inputs.iter().any(Tensor::requires_grad);
        if !track {
            return Ok(Self::leaf(value, false));
        }
        Ok(Tensor {
            node: Rc::new(Node {
                value,
                requires_grad: true,
                grad_fn: Some(GradFn { op, inputs }),
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.node.value.data()
    }

    pub fn value(&self) -> &Array {
        &self.node.value
    }

    pub fn numel(&self) -> usize {
        self.node.value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.node.value.item()
    }

    pub fn to_array(&self) -> Array {
        self.node.value.clone()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::constant(self.to_array())
    }

    pub(crate) fn id(&self) -> usize {
        Rc::as_ptr(&self.node) as usize
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.node, &other.node)
    }
}
