use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{linalg::general_mat_mul, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};

use crate::{kernels, Float};

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    MatMul(usize, usize),
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Silu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Powf(usize, f64),
    SumAll(usize),
    SumAxis {
        x: usize,
        axis: usize,
        keepdim: bool,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm(usize),
    L2Normalize(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
        end: usize,
        step: usize,
    },
    Unfold {
        x: usize,
        kernel: usize,
    },
    DepthwiseConv {
        x: usize,
        w: usize,
    },
    RelBias {
        table: usize,
        len: usize,
    },
}

pub(crate) struct Node<T> {
    pub(crate) value: ArrayD<T>,
    /// Saved forward quantity some backward rules need (normalizer scales).
    pub(crate) aux: Option<ArrayD<T>>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only tape of tensor operations.
pub struct Graph<T: Float> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Float> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Float> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, None, Op::Leaf, true)
    }

    /// Input excluded from gradient computation.
    pub fn constant(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, None, Op::Leaf, false)
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn push(
        &self,
        value: ArrayD<T>,
        aux: Option<ArrayD<T>>,
        op: Op,
        requires_grad: bool,
    ) -> Var<'_, T> {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            aux,
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn val(&self, id: usize) -> Ref<'_, ArrayD<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn unary(&self, x: usize, op: Op, f: impl Fn(T) -> T) -> Var<'_, T> {
        let out = self.val(x).mapv(f);
        let rg = self.rg(&[x]);
        self.push(out, None, op, rg)
    }
}

pub(crate) fn std_layout<T: Clone>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Concatenates along `axis`. All parts must share every other dimension.
pub fn concat<'g, T: Float>(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let g = parts[0].graph;
    let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
    let out = {
        let nodes = g.nodes.borrow();
        let views: Vec<_> = ids.iter().map(|&i| nodes[i].value.view()).collect();
        ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes")
    };
    let rg = g.rg(&ids);
    g.push(std_layout(out), None, Op::Concat { parts: ids, axis }, rg)
}

impl<'g, T: Float> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Ref<'g, ArrayD<T>> {
        self.graph.val(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Copy of the value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        let v = self.value().clone();
        self.graph.constant(v)
    }

    fn binary(
        self,
        rhs: Var<'g, T>,
        op: Op,
        f: impl Fn(&ArrayD<T>, &ArrayD<T>) -> ArrayD<T>,
    ) -> Var<'g, T> {
        let out = {
            let a = self.value();
            let b = rhs.value();
            std_layout(f(&a, &b))
        };
        let rg = self.graph.rg(&[self.id, rhs.id]);
        self.graph.push(out, None, op, rg)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::cst(c);
        self.graph
            .unary(self.id, Op::AddScalar(self.id), move |v| v + c)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'g, T> {
        let k = T::cst(c);
        self.graph
            .unary(self.id, Op::MulScalar(self.id, c), move |v| v * k)
    }

    /// `self[..., K] x w[K, M] -> [..., M]`.
    pub fn matmul(self, w: Var<'g, T>) -> Var<'g, T> {
        let out = {
            let a = self.value();
            let b = w.value();
            assert_eq!(b.ndim(), 2, "matmul rhs must be 2-D, got {:?}", b.shape());
            let k = *a.shape().last().expect("matmul lhs must have rank >= 1");
            assert_eq!(
                k,
                b.shape()[0],
                "matmul inner dims {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            let rows = a.len() / k.max(1);
            let a2 = a.view().into_shape_with_order((rows, k)).unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = b2.ncols();
            a2.dot(&b2)
                .into_dyn()
                .into_shape_with_order(IxDyn(&shape))
                .unwrap()
        };
        let rg = self.graph.rg(&[self.id, w.id]);
        self.graph.push(out, None, Op::MatMul(self.id, w.id), rg)
    }

    /// Batched matrix product over matching leading dims:
    /// `[.., M, K] x [.., K, N]`, or `[.., M, K] x [.., N, K]^T` when `trans_b`.
    pub fn bmm(self, b: Var<'g, T>, trans_b: bool) -> Var<'g, T> {
        let out = {
            let a = self.value();
            let bv = b.value();
            let nd = a.ndim();
            assert!(
                nd >= 2 && bv.ndim() == nd,
                "bmm rank mismatch {:?} {:?}",
                a.shape(),
                bv.shape()
            );
            assert_eq!(
                a.shape()[..nd - 2],
                bv.shape()[..nd - 2],
                "bmm batch dims differ"
            );
            let (m, k) = (a.shape()[nd - 2], a.shape()[nd - 1]);
            let (bk, n) = if trans_b {
                (bv.shape()[nd - 1], bv.shape()[nd - 2])
            } else {
                (bv.shape()[nd - 2], bv.shape()[nd - 1])
            };
            assert_eq!(k, bk, "bmm inner dims {:?} x {:?}", a.shape(), bv.shape());
            let groups: usize = a.shape()[..nd - 2].iter().product();
            let a3 = a.view().into_shape_with_order((groups, m, k)).unwrap();
            let b3 = if trans_b {
                bv.view().into_shape_with_order((groups, n, k)).unwrap()
            } else {
                bv.view().into_shape_with_order((groups, k, n)).unwrap()
            };
            let mut out = ndarray::Array3::<T>::zeros((groups, m, n));
            for gi in 0..groups {
                let ag = a3.index_axis(Axis(0), gi);
                let bg = b3.index_axis(Axis(0), gi);
                let mut og = out.index_axis_mut(Axis(0), gi);
                if trans_b {
                    general_mat_mul(T::one(), &ag, &bg.t(), T::zero(), &mut og);
                } else {
                    general_mat_mul(T::one(), &ag, &bg, T::zero(), &mut og);
                }
            }
            let mut shape = a.shape().to_vec();
            shape[nd - 1] = n;
            out.into_dyn().into_shape_with_order(IxDyn(&shape)).unwrap()
        };
        let rg = self.graph.rg(&[self.id, b.id]);
        self.graph.push(
            out,
            None,
            Op::Bmm {
                a: self.id,
                b: b.id,
                trans_b,
            },
            rg,
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let out = self
            .value()
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape to {shape:?}: {e}"));
        let rg = self.requires_grad();
        self.graph.push(out, None, Op::Reshape(self.id), rg)
    }

    pub fn permute(self, axes: &[usize]) -> Var<'g, T> {
        let out = std_layout(self.value().clone().permuted_axes(IxDyn(axes)));
        let rg = self.requires_grad();
        self.graph
            .push(out, None, Op::Permute(self.id, axes.to_vec()), rg)
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.graph.unary(self.id, Op::Sigmoid(self.id), |v| {
            T::one() / (T::one() + (-v).exp())
        })
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.graph.unary(self.id, Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn relu(self) -> Var<'g, T> {
        self.graph.unary(self.id, Op::Relu(self.id), |v| {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        })
    }

    /// `x * sigmoid(x)`, a.k.a. swish.
    pub fn silu(self) -> Var<'g, T> {
        self.graph
            .unary(self.id, Op::Silu(self.id), |v| v / (T::one() + (-v).exp()))
    }

    pub fn exp(self) -> Var<'g, T> {
        self.graph.unary(self.id, Op::Exp(self.id), |v| v.exp())
    }

    pub fn ln(self) -> Var<'g, T> {
        self.graph.unary(self.id, Op::Log(self.id), |v| v.ln())
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.graph.unary(self.id, Op::Sqrt(self.id), |v| v.sqrt())
    }

    pub fn powf(self, p: f64) -> Var<'g, T> {
        let e = T::cst(p);
        self.graph
            .unary(self.id, Op::Powf(self.id, p), move |v| v.powf(e))
    }

    pub fn square(self) -> Var<'g, T> {
        self * self
    }

    pub fn sum_all(self) -> Var<'g, T> {
        let s = self.value().sum();
        let rg = self.requires_grad();
        self.graph.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            None,
            Op::SumAll(self.id),
            rg,
        )
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().len();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Var<'g, T> {
        let mut out = self.value().sum_axis(Axis(axis));
        if keepdim {
            out.insert_axis_inplace(Axis(axis));
        }
        let rg = self.requires_grad();
        self.graph.push(
            std_layout(out),
            None,
            Op::SumAxis {
                x: self.id,
                axis,
                keepdim,
            },
            rg,
        )
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Var<'g, T> {
        let n = self.value().shape()[axis];
        self.sum_axis(axis, keepdim).mul_scalar(1.0 / n as f64)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let out = kernels::softmax_last(&self.value(), false);
        let rg = self.requires_grad();
        self.graph.push(out, None, Op::Softmax(self.id), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'g, T> {
        let out = kernels::softmax_last(&self.value(), true);
        let rg = self.requires_grad();
        self.graph.push(out, None, Op::LogSoftmax(self.id), rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_norm(self, eps: f64) -> Var<'g, T> {
        let (out, inv_std) = kernels::layer_norm_last(&self.value(), T::cst(eps));
        let rg = self.requires_grad();
        self.graph
            .push(out, Some(inv_std), Op::LayerNorm(self.id), rg)
    }

    /// Divides each last-axis vector by its Euclidean norm (floored at `min_norm`).
    pub fn l2_normalize(self, min_norm: f64) -> Var<'g, T> {
        let (out, norms) = {
            let x = self.value();
            let mut norms = x.mapv(|v| v * v).sum_axis(Axis(x.ndim() - 1));
            norms.mapv_inplace(|s| s.sqrt().max(T::cst(min_norm)));
            let norms = norms.insert_axis(Axis(x.ndim() - 1));
            (std_layout(&*x / &norms), std_layout(norms))
        };
        let rg = self.requires_grad();
        self.graph
            .push(out, Some(norms), Op::L2Normalize(self.id), rg)
    }

    /// `x[start..end; step]` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize, step: usize) -> Var<'g, T> {
        let out = std_layout(
            self.value()
                .slice_axis(
                    Axis(axis),
                    Slice::new(start as isize, Some(end as isize), step as isize),
                )
                .to_owned(),
        );
        let rg = self.requires_grad();
        self.graph.push(
            out,
            None,
            Op::Slice {
                x: self.id,
                axis,
                start,
                end,
                step,
            },
            rg,
        )
    }

    /// `[B, T, C] -> [B, T, K*C]` centered sliding windows, zero outside `[0, T)`.
    /// Column `k*C + c` holds channel `c` at time `t + k - K/2`.
    pub fn unfold_time(self, kernel: usize) -> Var<'g, T> {
        assert!(kernel % 2 == 1, "unfold kernel must be odd, got {kernel}");
        let out = kernels::unfold(&self.value(), kernel);
        let rg = self.requires_grad();
        self.graph
            .push(out, None, Op::Unfold { x: self.id, kernel }, rg)
    }

    /// Per-channel centered ("same") convolution over time: `x[B, T, C]`, `w[K, C]`.
    pub fn depthwise_conv_time(self, w: Var<'g, T>) -> Var<'g, T> {
        let out = kernels::depthwise_forward(&self.value(), &w.value());
        let rg = self.graph.rg(&[self.id, w.id]);
        self.graph.push(
            out,
            None,
            Op::DepthwiseConv {
                x: self.id,
                w: w.id,
            },
            rg,
        )
    }

    /// Expands a `[H, 2R+1]` table of relative-position scores into `[H, len, len]`,
    /// where entry `(h, i, j)` reads column `clamp(j - i, -R, R) + R`.
    pub fn rel_bias(self, len: usize) -> Var<'g, T> {
        let out = kernels::rel_bias_forward(&self.value(), len);
        let rg = self.requires_grad();
        self.graph.push(
            out,
            None,
            Op::RelBias {
                table: self.id,
                len,
            },
            rg,
        )
    }

    /// Elementwise product with a constant mask, broadcasting as needed.
    pub fn mask(self, mask: &ArrayD<T>) -> Var<'g, T> {
        let m = self.graph.constant(mask.clone());
        self * m
    }
}

pub(crate) fn zip_map<T: Float>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    let mut out = ArrayD::<T>::zeros(a.raw_dim());
    Zip::from(&mut out)
        .and(a)
        .and(b)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl<'g, T: Float> Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'g, T: Float> Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'g, T: Float> Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'g, T: Float> Div for Var<'g, T> {
    type Output = Var<'g, T>;
    fn div(self, rhs: Self) -> Self::Output {
        self.binary(rhs, Op::Div(self.id, rhs.id), |a, b| a / b)
    }
}

impl<'g, T: Float> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        self.mul_scalar(-1.0)
    }
}
