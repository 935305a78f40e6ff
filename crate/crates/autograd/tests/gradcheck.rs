use facedyn_autograd::check::{check_gradients, GradCheckOptions};
use facedyn_autograd::{concat, Graph, Var};
use ndarray::{ArrayD, IxDyn};

fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut s = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn assert_grad<F>(inputs: &[ArrayD<f64>], build: F)
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let report = check_gradients(inputs, build, &GradCheckOptions::default());
    assert!(report.checked > 0);
    assert!(
        report.max_rel_error <= 1e-6,
        "rel err {} worst {:?}",
        report.max_rel_error,
        report.worst
    );
}

/// Weighted sum so every output entry gets a distinct adjoint.
fn probe<'g>(y: Var<'g, f64>, seed: u64) -> Var<'g, f64> {
    let w = y.graph().constant(rand_array(&y.shape(), seed));
    (y * w).sum_all()
}

#[test]
fn broadcast_arithmetic() {
    let a = rand_array(&[2, 3, 4], 1);
    let b = rand_array(&[3, 1], 2).mapv(|v| v + 2.5);
    assert_grad(&[a.clone(), b.clone()], |_, v| probe(v[0] + v[1], 9));
    assert_grad(&[a.clone(), b.clone()], |_, v| probe(v[0] - v[1], 9));
    assert_grad(&[a.clone(), b.clone()], |_, v| probe(v[0] * v[1], 9));
    assert_grad(&[a, b], |_, v| probe(v[0] / v[1], 9));
}

#[test]
fn matmul_and_bmm() {
    let a = rand_array(&[2, 3, 4], 3);
    let w = rand_array(&[4, 5], 4);
    assert_grad(&[a, w], |_, v| probe(v[0].matmul(v[1]), 5));
    let x = rand_array(&[2, 2, 3, 4], 6);
    let y = rand_array(&[2, 2, 4, 5], 7);
    assert_grad(&[x.clone(), y], |_, v| probe(v[0].bmm(v[1], false), 8));
    let z = rand_array(&[2, 2, 5, 4], 9);
    assert_grad(&[x, z], |_, v| probe(v[0].bmm(v[1], true), 8));
}

#[test]
fn unary_ops() {
    let x = rand_array(&[3, 4], 10);
    let pos = x.mapv(|v| v.abs() + 0.5);
    assert_grad(&[x.clone()], |_, v| probe(v[0].sigmoid(), 1));
    assert_grad(&[x.clone()], |_, v| probe(v[0].tanh(), 1));
    assert_grad(&[x.clone()], |_, v| probe(v[0].silu(), 1));
    assert_grad(&[x.clone()], |_, v| probe(v[0].exp(), 1));
    assert_grad(&[x.clone()], |_, v| probe(v[0].relu(), 1));
    assert_grad(&[pos.clone()], |_, v| probe(v[0].ln(), 1));
    assert_grad(&[pos.clone()], |_, v| probe(v[0].sqrt(), 1));
    assert_grad(&[pos], |_, v| probe(v[0].powf(2.5), 1));
    assert_grad(&[x.clone()], |_, v| {
        probe(v[0].add_scalar(3.0).mul_scalar(-2.0), 1)
    });
    assert_grad(&[x], |_, v| probe(-v[0].square(), 1));
}

#[test]
fn reductions_and_shapes() {
    let x = rand_array(&[2, 3, 4], 11);
    assert_grad(&[x.clone()], |_, v| probe(v[0].sum_axis(1, false), 2));
    assert_grad(&[x.clone()], |_, v| probe(v[0].mean_axis(2, true), 2));
    assert_grad(&[x.clone()], |_, v| v[0].mean_all());
    assert_grad(&[x.clone()], |_, v| probe(v[0].reshape(&[6, 4]), 2));
    assert_grad(&[x.clone()], |_, v| probe(v[0].permute(&[2, 0, 1]), 2));
    assert_grad(&[x.clone()], |_, v| probe(v[0].slice(1, 0, 3, 2), 2));
    let y = rand_array(&[2, 3, 2], 12);
    assert_grad(&[x, y], |_, v| probe(concat(&[v[0], v[1]], 2), 2));
}

#[test]
fn normalizers() {
    let x = rand_array(&[3, 5], 13);
    assert_grad(&[x.clone()], |_, v| probe(v[0].softmax(), 3));
    assert_grad(&[x.clone()], |_, v| probe(v[0].log_softmax(), 3));
    assert_grad(&[x.clone()], |_, v| probe(v[0].layer_norm(1e-5), 3));
    assert_grad(&[x], |_, v| probe(v[0].l2_normalize(1e-12), 3));
}

#[test]
fn temporal_kernels() {
    let x = rand_array(&[2, 6, 3], 14);
    assert_grad(&[x.clone()], |_, v| probe(v[0].unfold_time(3), 4));
    let w = rand_array(&[5, 3], 15);
    assert_grad(&[x, w], |_, v| probe(v[0].depthwise_conv_time(v[1]), 4));
    let table = rand_array(&[2, 5], 16);
    assert_grad(&[table], |_, v| probe(v[0].rel_bias(6), 4));
}

#[test]
fn shared_subexpressions_accumulate() {
    let x = rand_array(&[4], 17);
    assert_grad(&[x], |_, v| {
        let a = v[0].tanh();
        probe(a * a + a, 5)
    });
}

#[test]
fn unfold_layout_is_centered() {
    let g = Graph::<f64>::new();
    let x =
        g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 4, 1]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let u = x.unfold_time(3);
    let v = u.value();
    assert_eq!(v.shape(), &[1, 4, 3]);
    assert_eq!(
        v.as_slice().unwrap(),
        &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 3.0, 4.0, 0.0]
    );
}

#[test]
fn rel_bias_reads_clamped_offsets() {
    let g = Graph::<f64>::new();
    let t = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![-1.0, 0.0, 1.0]).unwrap());
    let b = t.rel_bias(3);
    let v = b.value();
    // entry (i, j) reads clamp(j - i, -1, 1)
    assert_eq!(
        v.as_slice().unwrap(),
        &[0.0, 1.0, 1.0, -1.0, 0.0, 1.0, -1.0, -1.0, 0.0]
    );
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::<f64>::new();
    let c = g.constant(rand_array(&[3], 1));
    let x = g.leaf(rand_array(&[3], 2));
    let y = (c * x).sum_all();
    let grads = g.backward(y);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap(), &*c.value());
}
