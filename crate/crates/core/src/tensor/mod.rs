//! Dense multi-dimensional `f64` arrays with reverse-mode automatic
//! differentiation.
//!
//! The operation set covers exactly what the registration network needs:
//! 3D convolutions (plain and transposed), instance normalization, LeakyReLU,
//! sigmoid, softmax, elementwise arithmetic with leading-1 broadcasting,
//! reductions, concatenation/slicing, a fully-connected layer, global average
//! pooling, differentiable trilinear grid sampling and spatial forward
//! differences.
//!
//! Feature maps use the layout `[C, D, H, W]` (channel, depth, height, width,
//! row-major with W fastest). A computation graph is a DAG of reference-counted
//! nodes; it is confined to one thread of control, but distinct graphs may run
//! on distinct threads. Tensor data is immutable after construction; only the
//! gradient cell is written, and gradient accumulation is additive across
//! fan-out and across repeated `backward` calls.

mod backward;
mod gradcheck;
mod nn;

pub use gradcheck::grad_check;
pub use nn::{
    affine_field_op, conv3d, forward_diff, global_avg_pool, grid_sample_trilinear, instance_norm,
    leaky_relu, linear, sigmoid, softmax, transposed_conv3d,
};

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{DregError, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// How a tensor was produced; holds the parent nodes of the graph.
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    Square(Tensor),
    Sqrt(Tensor),
    Sum(Tensor),
    Mean(Tensor),
    Reshape(Tensor),
    Concat {
        axis: usize,
        inputs: Vec<Tensor>,
    },
    Slice {
        input: Tensor,
        start: Vec<usize>,
    },
    LeakyRelu {
        input: Tensor,
        slope: f64,
    },
    Sigmoid(Tensor),
    Softmax {
        input: Tensor,
        axis: usize,
    },
    InstanceNorm {
        input: Tensor,
        eps: f64,
    },
    Conv3d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    ConvTranspose3d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    Linear {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
    },
    GlobalAvgPool(Tensor),
    GridSample {
        volume: Tensor,
        locations: Tensor,
    },
    ForwardDiff {
        input: Tensor,
        axis: usize,
    },
    AffineField {
        theta: Tensor,
    },
}

pub(crate) struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Op,
}

/// A node of the autodiff graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

impl Tensor {
    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            other => op_parents(other).iter().any(|p| p.requires_grad()),
        };
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// A leaf node. `requires_grad` marks it as a parameter to differentiate.
    pub fn leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DregError::InvalidArgument(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        let mut t = Tensor::from_op(data, shape.to_vec(), Op::Leaf);
        Rc::get_mut(&mut t.inner).unwrap().requires_grad = requires_grad;
        Ok(t)
    }

    /// A leaf that never tracks gradients (grids, generated data, constants).
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::leaf(data, shape, false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_op(vec![0.0; shape.iter().product()], shape.to_vec(), Op::Leaf)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_op(
            vec![value; shape.iter().product()],
            shape.to_vec(),
            Op::Leaf,
        )
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_op(vec![value], vec![1], Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item() on tensor of shape {:?}",
            self.shape()
        );
        self.inner.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.iter().all(|v| v.is_finite())
    }

    /// Detached copy: same data, fresh constant leaf outside any graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_op(self.inner.data.clone(), self.inner.shape.clone(), Op::Leaf)
    }

    // ---- elementwise arithmetic with leading-1 broadcasting ----

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary(self, other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary(self, other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary(self, other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        ew_binary(self, other, "div", |a, b| a / b, Op::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::MulScalar(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().iter().map(|v| v * v).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Square(self.clone()))
    }

    /// Elementwise square root. The derivative at exactly 0 is defined as 0
    /// so that eps-guarded denominators never poison gradients with NaN.
    pub fn sqrt(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.sqrt()).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Sqrt(self.clone()))
    }

    /// Sum of all elements; sequential accumulation in index order.
    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    /// Mean of all elements.
    pub fn mean(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let m = s / self.numel() as f64;
        Tensor::from_op(vec![m], vec![1], Op::Mean(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(DregError::ShapeMismatch {
                context: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            self.inner.data.clone(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Concatenate along `axis`. All non-axis extents must agree.
    pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
        if inputs.is_empty() {
            return Err(DregError::InvalidArgument("concat of zero tensors".into()));
        }
        let rank = inputs[0].shape().len();
        if axis >= rank {
            return Err(DregError::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {rank}"
            )));
        }
        let mut out_shape = inputs[0].shape().to_vec();
        for t in &inputs[1..] {
            if t.shape().len() != rank {
                return Err(DregError::ShapeMismatch {
                    context: "concat rank",
                    lhs: inputs[0].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != out_shape[d] {
                    return Err(DregError::ShapeMismatch {
                        context: "concat non-axis extents",
                        lhs: inputs[0].shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
            out_shape[axis] += t.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner_per: Vec<usize> = inputs
            .iter()
            .map(|t| t.shape()[axis..].iter().product())
            .collect();
        let out_inner: usize = out_shape[axis..].iter().product();
        let mut data = vec![0.0; outer * out_inner];
        for o in 0..outer {
            let mut at = o * out_inner;
            for (t, &block) in inputs.iter().zip(&inner_per) {
                data[at..at + block].copy_from_slice(&t.data()[o * block..(o + 1) * block]);
                at += block;
            }
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::Concat {
                axis,
                inputs: inputs.to_vec(),
            },
        ))
    }

    /// Rectangular sub-block starting at `start` with extents `size`.
    pub fn slice(&self, start: &[usize], size: &[usize]) -> Result<Tensor> {
        let rank = self.shape().len();
        if start.len() != rank || size.len() != rank {
            return Err(DregError::InvalidArgument(format!(
                "slice start/size rank must be {rank}"
            )));
        }
        for d in 0..rank {
            if size[d] == 0 || start[d] + size[d] > self.shape()[d] {
                return Err(DregError::InvalidArgument(format!(
                    "slice [{:?}+{:?}] out of bounds for shape {:?}",
                    start,
                    size,
                    self.shape()
                )));
            }
        }
        let src_strides = strides_of(self.shape());
        let mut data = vec![0.0; size.iter().product()];
        copy_block(self.data(), &src_strides, start, size, &mut data);
        Ok(Tensor::from_op(
            data,
            size.to_vec(),
            Op::Slice {
                input: self.clone(),
                start: start.to_vec(),
            },
        ))
    }

    /// Slice of a single range along one axis (helper over `slice`).
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let mut s = vec![0; self.shape().len()];
        let mut z = self.shape().to_vec();
        s[axis] = start;
        z[axis] = len;
        self.slice(&s, &z)
    }
}

/// Copy a rectangular block out of `src` (row-major, `src_strides`) into `dst`.
fn copy_block(
    src: &[f64],
    src_strides: &[usize],
    start: &[usize],
    size: &[usize],
    dst: &mut [f64],
) {
    let rank = size.len();
    let inner = size[rank - 1];
    let outer: usize = size[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut base = start[rank - 1] * src_strides[rank - 1];
        for d in 0..rank - 1 {
            base += (start[d] + idx[d]) * src_strides[d];
        }
        dst[o * inner..(o + 1) * inner].copy_from_slice(&src[base..base + inner]);
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < size[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn scatter_block_add(
    dst: &mut [f64],
    dst_strides: &[usize],
    start: &[usize],
    size: &[usize],
    src: &[f64],
) {
    let rank = size.len();
    let inner = size[rank - 1];
    let outer: usize = size[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for o in 0..outer {
        let mut base = start[rank - 1] * dst_strides[rank - 1];
        for d in 0..rank - 1 {
            base += (start[d] + idx[d]) * dst_strides[d];
        }
        for i in 0..inner {
            dst[base + i] += src[o * inner + i];
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < size[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn op_parents(op: &Op) -> Vec<&Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
        Op::AddScalar(a)
        | Op::MulScalar(a, _)
        | Op::Square(a)
        | Op::Sqrt(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a)
        | Op::Sigmoid(a)
        | Op::GlobalAvgPool(a) => vec![a],
        Op::Concat { inputs, .. } => inputs.iter().collect(),
        Op::Slice { input, .. } => vec![input],
        Op::LeakyRelu { input, .. } => vec![input],
        Op::Softmax { input, .. } => vec![input],
        Op::InstanceNorm { input, .. } => vec![input],
        Op::Conv3d {
            input,
            weight,
            bias,
            ..
        } => vec![input, weight, bias],
        Op::ConvTranspose3d {
            input,
            weight,
            bias,
        } => vec![input, weight, bias],
        Op::Linear {
            input,
            weight,
            bias,
        } => vec![input, weight, bias],
        Op::GridSample { volume, locations } => vec![volume, locations],
        Op::ForwardDiff { input, .. } => vec![input],
        Op::AffineField { theta } => vec![theta],
    }
}

/// Broadcast rule: equal rank, each extent equal or 1 on one side.
pub(crate) fn broadcast_shape(
    a: &[usize],
    b: &[usize],
    context: &'static str,
) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(DregError::ShapeMismatch {
            context,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    let mut out = Vec::with_capacity(a.len());
    for d in 0..a.len() {
        let (x, y) = (a[d], b[d]);
        if x == y || x == 1 || y == 1 {
            out.push(x.max(y));
        } else {
            return Err(DregError::ShapeMismatch {
                context,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    Ok(out)
}

fn ew_binary(
    a: &Tensor,
    b: &Tensor,
    context: &'static str,
    f: impl Fn(f64, f64) -> f64,
    make_op: impl Fn(Tensor, Tensor) -> Op,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape(), context)?;
    let n: usize = out_shape.iter().product();
    let mut data = vec![0.0; n];
    if a.shape() == b.shape() {
        for (o, (x, y)) in data.iter_mut().zip(a.data().iter().zip(b.data())) {
            *o = f(*x, *y);
        }
    } else {
        let sa = effective_strides(a.shape(), &out_shape);
        let sb = effective_strides(b.shape(), &out_shape);
        let mut idx = vec![0usize; out_shape.len()];
        let (mut off_a, mut off_b) = (0usize, 0usize);
        for o in data.iter_mut() {
            *o = f(a.data()[off_a], b.data()[off_b]);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                off_a += sa[d];
                off_b += sb[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off_a -= sa[d] * out_shape[d];
                off_b -= sb[d] * out_shape[d];
                idx[d] = 0;
            }
        }
    }
    Ok(Tensor::from_op(
        data,
        out_shape,
        make_op(a.clone(), b.clone()),
    ))
}

/// Strides of `shape` viewed under `out_shape`: 0 where broadcast.
pub(crate) fn effective_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let real = strides_of(shape);
    shape
        .iter()
        .zip(out_shape)
        .zip(real)
        .map(|((&s, &o), r)| {
            if s == o {
                r
            } else {
                debug_assert_eq!(s, 1);
                0
            }
        })
        .collect()
}

/// Sum `grad` (shaped `out_shape`) down to `shape` along broadcast axes.
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    if out_shape == shape {
        return grad.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let s = effective_strides(shape, out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for g in grad {
        out[off] += g;
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            off += s[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= s[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

/// Ordered map of named parameters. Iteration order equals registration order
/// and is the canonical order for checkpoints and optimizer state.
#[derive(Clone, Default)]
pub struct ParamSet {
    order: Vec<String>,
    map: HashMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.map.contains_key(name) {
            return Err(DregError::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.order.push(name.to_string());
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| DregError::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    /// Swap in an updated value (same shape) after an optimizer step.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != tensor.shape() {
            return Err(DregError::ShapeMismatch {
                context: "ParamSet::replace",
                lhs: old.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        self.map.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.order.iter().map(|n| (n.as_str(), &self.map[n]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|n| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.iter() {
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_small_vector() {
        let t = Tensor::constant(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(t.mean().item(), 2.0);
    }

    #[test]
    fn broadcast_channel_scale() {
        // (C,1,1,1) * (C,D,H,W) scales each channel
        let scale = Tensor::constant(vec![2.0, 3.0], &[2, 1, 1, 1]).unwrap();
        let x = Tensor::constant(vec![1.0; 2 * 8], &[2, 2, 2, 2]).unwrap();
        let y = scale.mul(&x).unwrap();
        assert!(y.data()[..8].iter().all(|&v| v == 2.0));
        assert!(y.data()[8..].iter().all(|&v| v == 3.0));
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        match a.add(&b) {
            Err(DregError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 4]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn concat_channels_and_identity() {
        let a = Tensor::full(&[8, 4, 4, 4], 1.0);
        let b = Tensor::full(&[8, 4, 4, 4], 2.0);
        let c = Tensor::full(&[16, 4, 4, 4], 3.0);
        let out = Tensor::concat(&[a.clone(), b, c], 0).unwrap();
        assert_eq!(out.shape(), &[32, 4, 4, 4]);
        let single = Tensor::concat(&[a.clone()], 0).unwrap();
        assert_eq!(single.data(), a.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[8, 4, 4, 4]);
        let b = Tensor::zeros(&[8, 4, 4, 2]);
        assert!(Tensor::concat(&[a, b], 0).is_err());
    }

    #[test]
    fn slice_recovers_concat_inputs() {
        let a = Tensor::constant((0..16).map(f64::from).collect(), &[2, 2, 2, 2]).unwrap();
        let b = Tensor::constant((16..32).map(f64::from).collect(), &[2, 2, 2, 2]).unwrap();
        let cat = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
        let a2 = cat.narrow(0, 0, 2).unwrap();
        let b2 = cat.narrow(0, 2, 2).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn paramset_rejects_duplicates_and_orders() {
        let mut ps = ParamSet::new();
        ps.register("b", Tensor::zeros(&[1])).unwrap();
        ps.register("a", Tensor::zeros(&[2])).unwrap();
        assert!(ps.register("a", Tensor::zeros(&[2])).is_err());
        let names: Vec<_> = ps.names().collect();
        assert_eq!(names, vec!["b", "a"]);
        assert_eq!(ps.total_elements(), 3);
    }
}
