use ndarray::{linalg::general_mat_mul, ArrayD, Axis, Ix2, IxDyn, Slice};

use crate::graph::{std_layout, zip_map, Op};
use crate::{kernels, Float, Graph, Var};

/// Adjoints of the leaves of a graph after a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` if it does not
    /// influence the loss or is not a differentiable leaf.
    pub fn get(&self, var: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<ArrayD<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
fn unbroadcast<T: Float>(mut g: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g;
    }
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    std_layout(g)
}

fn accumulate<T: Float>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(std_layout(g)),
    }
}

impl<T: Float> Graph<T> {
    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.id].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::from_elem(nodes[loss.id].value.raw_dim(), T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let g = std_layout(g);
            // Slices add into the parent's slot directly; per-step slicing of a
            // long sequence would otherwise allocate a full-size gradient per step.
            if let Op::Slice {
                x,
                axis,
                start,
                end,
                step,
            } = node.op
            {
                if nodes[x].requires_grad {
                    let slot =
                        grads[x].get_or_insert_with(|| ArrayD::zeros(nodes[x].value.raw_dim()));
                    let mut view = slot.slice_axis_mut(
                        Axis(axis),
                        Slice::new(start as isize, Some(end as isize), step as isize),
                    );
                    view += &g;
                }
                continue;
            }
            let val = |i: usize| &nodes[i].value;
            let wants = |i: usize| nodes[i].requires_grad;
            let mut send = |i: usize, d: ArrayD<T>| {
                if nodes[i].requires_grad {
                    accumulate(&mut grads[i], d);
                }
            };
            let y = &node.value;

            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(g.clone(), val(*a).shape()));
                    }
                    if wants(*b) {
                        send(*b, unbroadcast(g, val(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(g.clone(), val(*a).shape()));
                    }
                    if wants(*b) {
                        send(*b, unbroadcast(-g, val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        send(*a, unbroadcast(&g * val(*b), val(*a).shape()));
                    }
                    if wants(*b) {
                        send(*b, unbroadcast(&g * val(*a), val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if wants(*a) {
                        send(*a, unbroadcast(&g / bv, val(*a).shape()));
                    }
                    if wants(*b) {
                        // d(a/b)/db = -(a/b)/b = -y/b
                        let d = -(&g * y) / bv;
                        send(*b, unbroadcast(d, bv.shape()));
                    }
                }
                Op::AddScalar(x) => send(*x, g),
                Op::MulScalar(x, c) => send(*x, g * T::cst(*c)),
                Op::MatMul(a, w) => {
                    let av = val(*a);
                    let wv = val(*w).view().into_dimensionality::<Ix2>().unwrap();
                    let (k, m) = wv.dim();
                    let rows = av.len() / k.max(1);
                    let g2 = g.view().into_shape_with_order((rows, m)).unwrap();
                    if wants(*a) {
                        let ga = g2.dot(&wv.t());
                        send(
                            *a,
                            ga.into_dyn().into_shape_with_order(av.raw_dim()).unwrap(),
                        );
                    }
                    if wants(*w) {
                        let a2 = av.view().into_shape_with_order((rows, k)).unwrap();
                        send(*w, a2.t().dot(&g2).into_dyn());
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let av = val(*a);
                    let bv = val(*b);
                    let nd = av.ndim();
                    let (m, k) = (av.shape()[nd - 2], av.shape()[nd - 1]);
                    let n = g.shape()[nd - 1];
                    let groups = av.len() / (m * k).max(1);
                    let a3 = av.view().into_shape_with_order((groups, m, k)).unwrap();
                    let b3 = bv
                        .view()
                        .into_shape_with_order((groups, bv.shape()[nd - 2], bv.shape()[nd - 1]))
                        .unwrap();
                    let g3 = g.view().into_shape_with_order((groups, m, n)).unwrap();
                    if wants(*a) {
                        let mut ga = ndarray::Array3::<T>::zeros((groups, m, k));
                        for gi in 0..groups {
                            let gg = g3.index_axis(Axis(0), gi);
                            let bg = b3.index_axis(Axis(0), gi);
                            let mut out = ga.index_axis_mut(Axis(0), gi);
                            if *trans_b {
                                // b: [N, K]
                                general_mat_mul(T::one(), &gg, &bg, T::zero(), &mut out);
                            } else {
                                general_mat_mul(T::one(), &gg, &bg.t(), T::zero(), &mut out);
                            }
                        }
                        send(
                            *a,
                            ga.into_dyn().into_shape_with_order(av.raw_dim()).unwrap(),
                        );
                    }
                    if wants(*b) {
                        let mut gb = ndarray::Array3::<T>::zeros(b3.raw_dim());
                        for gi in 0..groups {
                            let gg = g3.index_axis(Axis(0), gi);
                            let ag = a3.index_axis(Axis(0), gi);
                            let mut out = gb.index_axis_mut(Axis(0), gi);
                            if *trans_b {
                                general_mat_mul(T::one(), &gg.t(), &ag, T::zero(), &mut out);
                            } else {
                                general_mat_mul(T::one(), &ag.t(), &gg, T::zero(), &mut out);
                            }
                        }
                        send(
                            *b,
                            gb.into_dyn().into_shape_with_order(bv.raw_dim()).unwrap(),
                        );
                    }
                }
                Op::Reshape(x) => {
                    let shape = val(*x).raw_dim();
                    send(*x, g.into_shape_with_order(shape).unwrap());
                }
                Op::Permute(x, axes) => {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    send(*x, std_layout(g.permuted_axes(IxDyn(&inv))));
                }
                Op::Sigmoid(x) => send(*x, zip_map(&g, y, |g, y| g * y * (T::one() - y))),
                Op::Tanh(x) => send(*x, zip_map(&g, y, |g, y| g * (T::one() - y * y))),
                Op::Relu(x) => send(
                    *x,
                    zip_map(
                        &g,
                        val(*x),
                        |g, x| if x > T::zero() { g } else { T::zero() },
                    ),
                ),
                Op::Silu(x) => send(
                    *x,
                    zip_map(&g, val(*x), |g, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        g * s * (T::one() + x * (T::one() - s))
                    }),
                ),
                Op::Exp(x) => send(*x, &g * y),
                Op::Log(x) => send(*x, &g / val(*x)),
                Op::Sqrt(x) => send(*x, zip_map(&g, y, |g, y| g / (y + y))),
                Op::Powf(x, p) => {
                    let p = T::cst(*p);
                    send(
                        *x,
                        zip_map(&g, val(*x), |g, x| {
                            let d = p * x.powf(p - T::one());
                            // 0^(p-1) blows up for p < 1; the subgradient 0 is used there.
                            if d.is_finite() {
                                g * d
                            } else {
                                T::zero()
                            }
                        }),
                    )
                }
                Op::SumAll(x) => {
                    let s = *g.iter().next().unwrap();
                    send(*x, ArrayD::from_elem(val(*x).raw_dim(), s));
                }
                Op::SumAxis { x, axis, keepdim } => {
                    let g = if *keepdim {
                        g
                    } else {
                        g.insert_axis(Axis(*axis))
                    };
                    let full = g.broadcast(val(*x).raw_dim()).unwrap().to_owned();
                    send(*x, full);
                }
                Op::Softmax(x) => {
                    let last = Axis(y.ndim() - 1);
                    let dot = (&g * y).sum_axis(last).insert_axis(last);
                    send(*x, y * &(&g - &dot));
                }
                Op::LogSoftmax(x) => {
                    let last = Axis(y.ndim() - 1);
                    let gs = g.sum_axis(last).insert_axis(last);
                    send(*x, &g - &(y.mapv(|v| v.exp()) * &gs));
                }
                Op::LayerNorm(x) => {
                    let inv = node.aux.as_ref().unwrap();
                    let last = Axis(y.ndim() - 1);
                    let mg = g.mean_axis(last).unwrap().insert_axis(last);
                    let mgy = (&g * y).mean_axis(last).unwrap().insert_axis(last);
                    send(*x, (&g - &mg - &(y * &mgy)) * inv);
                }
                Op::L2Normalize(x) => {
                    let norms = node.aux.as_ref().unwrap();
                    let last = Axis(y.ndim() - 1);
                    let dot = (&g * y).sum_axis(last).insert_axis(last);
                    send(*x, (&g - &(y * &dot)) / norms);
                }
                Op::Concat { parts, axis } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if wants(p) {
                            let piece = g
                                .slice_axis(Axis(*axis), Slice::from(off..off + len))
                                .to_owned();
                            send(p, std_layout(piece));
                        }
                        off += len;
                    }
                }
                Op::Slice { .. } => unreachable!(),
                Op::Unfold { x, kernel } => {
                    send(*x, kernels::fold(&g, val(*x).shape(), *kernel));
                }
                Op::DepthwiseConv { x, w } => {
                    let (gx, gw) = kernels::depthwise_backward(&g, val(*x), val(*w));
                    send(*x, gx);
                    send(*w, gw);
                }
                Op::RelBias { table, len } => {
                    send(
                        *table,
                        kernels::rel_bias_backward(&g, val(*table).shape(), *len),
                    );
                }
            }
        }
        Gradients { grads }
    }
}
