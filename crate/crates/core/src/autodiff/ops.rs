use std::rc::Rc;

use super::array::{numel, Array};
use super::kernels::{self, ConvGeom};
use super::tensor::{Op, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn invalid_shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Error {
    Error::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op.name(), self, other)?;
        let value = self.value().zip_map(other.value(), f)?;
        Tensor::from_op(value, op, vec![self.clone(), other.clone()])
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let value = self.value().map(f);
        Tensor::from_op(value, op, vec![self.clone()])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(Op::Neg, |a| -a)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.unary(Op::AddScalar, |a| a + c)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Result<Tensor> {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Tensor> {
        self.unary(Op::Softplus, |a| a.max(0.0) + (-a.abs()).exp().ln_1p())
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    pub(crate) fn mask_mul(&self, mask: Rc<[f64]>) -> Result<Tensor> {
        debug_assert_eq!(mask.len(), self.numel());
        let value = Array::new(
            self.shape().to_vec(),
            self.data()
                .iter()
                .zip(mask.iter())
                .map(|(a, m)| a * m)
                .collect(),
        )?;
        Tensor::from_op(value, Op::MaskMul(mask), vec![self.clone()])
    }

    pub fn relu(&self) -> Result<Tensor> {
        let mask: Rc<[f64]> = self
            .data()
            .iter()
            .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
            .collect();
        self.mask_mul(mask)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let data = kernels::matmul(self.data(), other.data(), m, k, n);
        Tensor::from_op(
            Array::new(vec![m, n], data)?,
            Op::MatMul,
            vec![self.clone(), other.clone()],
        )
    }

    /// Transpose of a 2-D tensor.
    pub fn t(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid_shape("transpose", s, "expects a 2-D tensor"));
        }
        let data = kernels::transpose(self.data(), s[0], s[1]);
        Tensor::from_op(
            Array::new(vec![s[1], s[0]], data)?,
            Op::Transpose,
            vec![self.clone()],
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = self.to_array().reshaped(shape)?;
        Tensor::from_op(value, Op::Reshape, vec![self.clone()])
    }

    /// Broadcasts size-1 axes up to `shape` (ranks must agree).
    pub fn expand_to(&self, shape: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        let ok = s.len() == shape.len() && s.iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "expand_to",
                lhs: s.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = kernels::expand(self.data(), s, shape);
        Tensor::from_op(
            Array::new(shape.to_vec(), data)?,
            Op::ExpandTo,
            vec![self.clone()],
        )
    }

    /// Sums over the axes where `shape` has size 1 (ranks must agree).
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        let ok = s.len() == shape.len() && s.iter().zip(shape).all(|(&a, &b)| a == b || b == 1);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "reduce_to",
                lhs: s.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = kernels::reduce(self.data(), s, shape);
        Tensor::from_op(
            Array::new(shape.to_vec(), data)?,
            Op::ReduceTo,
            vec![self.clone()],
        )
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(invalid_shape(
                "slice_axis",
                s,
                format!("cannot take [{start}, {}) on axis {axis}", start + len),
            ));
        }
        let data = kernels::slice_axis(self.data(), s, axis, start, len);
        let mut shape = s.to_vec();
        shape[axis] = len;
        Tensor::from_op(
            Array::new(shape, data)?,
            Op::Slice { axis, start },
            vec![self.clone()],
        )
    }

    /// Embeds `self` at `start` along `axis` inside zeros of length `total`.
    pub fn pad_axis(&self, axis: usize, start: usize, total: usize) -> Result<Tensor> {
        let s = self.shape();
        if axis >= s.len() || start + s[axis] > total {
            return Err(invalid_shape(
                "pad_axis",
                s,
                format!("cannot place at {start} within {total} on axis {axis}"),
            ));
        }
        let data = kernels::pad_axis(self.data(), s, axis, start, total);
        let mut shape = s.to_vec();
        shape[axis] = total;
        Tensor::from_op(
            Array::new(shape, data)?,
            Op::Pad { axis, start },
            vec![self.clone()],
        )
    }

    /// 2-D cross-correlation, `self` shaped `[B, C, H, W]`, `weight`
    /// `[O, C, KH, KW]`, symmetric zero padding.
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (x, w) = (self.shape(), weight.shape());
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            });
        }
        if stride == 0 || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
            return Err(invalid_shape(
                "conv2d",
                x,
                format!("kernel {w:?} does not fit with stride {stride}, pad {pad}"),
            ));
        }
        let geom = ConvGeom {
            batch: x[0],
            in_c: x[1],
            in_h: x[2],
            in_w: x[3],
            out_c: w[0],
            k_h: w[2],
            k_w: w[3],
            out_h: (x[2] + 2 * pad - w[2]) / stride + 1,
            out_w: (x[3] + 2 * pad - w[3]) / stride + 1,
            stride,
            pad,
        };
        conv_forward(self, weight, geom)
    }

    /// Non-overlapping `k`×`k` average pooling over the trailing two axes.
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2
            || k == 0
            || !s[s.len() - 2].is_multiple_of(k)
            || !s[s.len() - 1].is_multiple_of(k)
        {
            return Err(invalid_shape(
                "avg_pool2d",
                s,
                format!("trailing axes must be divisible by {k}"),
            ));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = numel(&s[..s.len() - 2]);
        let data = kernels::avg_pool(self.data(), planes, h, w, k);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = h / k;
        shape[r - 1] = w / k;
        Tensor::from_op(Array::new(shape, data)?, Op::AvgPool(k), vec![self.clone()])
    }

    pub(crate) fn avg_pool2d_adjoint(&self, k: usize) -> Result<Tensor> {
        let s = self.shape();
        let (h, w) = (s[s.len() - 2] * k, s[s.len() - 1] * k);
        let planes = numel(&s[..s.len() - 2]);
        let data = kernels::avg_pool_adjoint(self.data(), planes, h, w, k);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = h;
        shape[r - 1] = w;
        Tensor::from_op(
            Array::new(shape, data)?,
            Op::AvgPoolAdjoint(k),
            vec![self.clone()],
        )
    }

    pub fn sum(&self) -> Result<Tensor> {
        let ones = vec![1; self.shape().len()];
        self.reduce_to(&ones)?.reshape(&[])
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel().max(1) as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        self.mul(other)?.sum()
    }

    /// Euclidean norm of all elements.
    pub fn norm(&self) -> Result<Tensor> {
        self.dot(self)?.sqrt()
    }

    /// `[B, C, H, W]` → `[B, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(invalid_shape("global_avg_pool", s, "expects [B, C, H, W]"));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        self.reduce_to(&[b, c, 1, 1])?
            .reshape(&[b, c])?
            .scale(1.0 / hw as f64)
    }

    /// Adds a per-channel bias (`bias` of length `shape[1]`).
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() < 2 || bias.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_channel_bias",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let mut bshape = vec![1; s.len()];
        bshape[1] = s[1];
        self.add(&bias.reshape(&bshape)?.expand_to(s)?)
    }

    /// Row-wise log-softmax of a `[B, N]` tensor.
    pub fn log_softmax(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(invalid_shape("log_softmax", s, "expects [B, N]"));
        }
        let (b, n) = (s[0], s[1]);
        let row_max: Vec<f64> = self
            .data()
            .chunks(n)
            .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = Tensor::from_vec(&[b, 1], row_max)?.expand_to(s)?;
        let shifted = self.sub(&shift)?;
        let lse = shifted.exp()?.reduce_to(&[b, 1])?.ln()?;
        shifted.sub(&lse.expand_to(s)?)
    }

    pub fn softmax(&self) -> Result<Tensor> {
        self.log_softmax()?.exp()
    }

    /// Mean cross-entropy of `[B, N]` logits against class indices.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(invalid_shape(
                "cross_entropy",
                s,
                format!("expects [{}, N] logits", labels.len()),
            ));
        }
        let n = s[1];
        let mut onehot = vec![0.0; s[0] * n];
        for (row, &y) in labels.iter().enumerate() {
            if y >= n {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    classes: n,
                });
            }
            onehot[row * n + y] = 1.0;
        }
        let target = Tensor::from_vec(s, onehot)?;
        self.log_softmax()?
            .mul(&target)?
            .sum()?
            .scale(-1.0 / labels.len() as f64)
    }
}

pub(crate) fn conv_forward(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let data = kernels::conv2d(x.data(), w.data(), &geom);
    Tensor::from_op(
        Array::new(vec![geom.batch, geom.out_c, geom.out_h, geom.out_w], data)?,
        Op::Conv2d(geom),
        vec![x.clone(), w.clone()],
    )
}

pub(crate) fn conv_input_grad(grad: &Tensor, w: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let data = kernels::conv2d_input_grad(grad.data(), w.data(), &geom);
    Tensor::from_op(
        Array::new(vec![geom.batch, geom.in_c, geom.in_h, geom.in_w], data)?,
        Op::ConvInputGrad(geom),
        vec![grad.clone(), w.clone()],
    )
}

pub(crate) fn conv_weight_grad(x: &Tensor, grad: &Tensor, geom: ConvGeom) -> Result<Tensor> {
    let data = kernels::conv2d_weight_grad(x.data(), grad.data(), &geom);
    Tensor::from_op(
        Array::new(vec![geom.out_c, geom.in_c, geom.k_h, geom.k_w], data)?,
        Op::ConvWeightGrad(geom),
        vec![x.clone(), grad.clone()],
    )
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}
