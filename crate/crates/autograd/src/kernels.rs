//! Hand-written loops for the ops that don't map onto ndarray primitives.

use ndarray::{ArrayD, IxDyn};

use crate::Float;

pub(crate) fn softmax_last<T: Float>(x: &ArrayD<T>, log: bool) -> ArrayD<T> {
    let n = *x.shape().last().expect("softmax on a scalar");
    let mut out = x.as_standard_layout().into_owned();
    for row in out.as_slice_mut().unwrap().chunks_mut(n.max(1)) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        if log {
            for v in row.iter_mut() {
                *v = *v - m;
                z += v.exp();
            }
            let lz = z.ln();
            row.iter_mut().for_each(|v| *v = *v - lz);
        } else {
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            let inv = T::one() / z;
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    out
}

/// Returns the normalized tensor and `1/sqrt(var + eps)` with a kept last axis.
pub(crate) fn layer_norm_last<T: Float>(x: &ArrayD<T>, eps: T) -> (ArrayD<T>, ArrayD<T>) {
    let n = *x.shape().last().expect("layer_norm on a scalar");
    let mut out = x.as_standard_layout().into_owned();
    let mut stat_shape = x.shape().to_vec();
    *stat_shape.last_mut().unwrap() = 1;
    let mut inv = ArrayD::<T>::zeros(IxDyn(&stat_shape));
    let nf = T::cst(n as f64);
    for (row, r) in out
        .as_slice_mut()
        .unwrap()
        .chunks_mut(n)
        .zip(inv.as_slice_mut().unwrap().iter_mut())
    {
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let s = T::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        *r = s;
    }
    (out, inv)
}

fn dims3<T>(x: &ArrayD<T>) -> (usize, usize, usize) {
    assert_eq!(x.ndim(), 3, "expected [B, T, C], got {:?}", x.shape());
    (x.shape()[0], x.shape()[1], x.shape()[2])
}

pub(crate) fn unfold<T: Float>(x: &ArrayD<T>, k: usize) -> ArrayD<T> {
    let (b, t, c) = dims3(x);
    let pad = k / 2;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[b, t, k * c]));
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ti in 0..t {
            let orow = &mut os[(bi * t + ti) * k * c..(bi * t + ti + 1) * k * c];
            for ki in 0..k {
                let src = ti as isize + ki as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let s = (bi * t + src as usize) * c;
                orow[ki * c..(ki + 1) * c].copy_from_slice(&xs[s..s + c]);
            }
        }
    }
    out
}

pub(crate) fn fold<T: Float>(g: &ArrayD<T>, shape: &[usize], k: usize) -> ArrayD<T> {
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let pad = k / 2;
    let mut out = ArrayD::<T>::zeros(IxDyn(shape));
    let gs = g.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ti in 0..t {
            let grow = &gs[(bi * t + ti) * k * c..(bi * t + ti + 1) * k * c];
            for ki in 0..k {
                let src = ti as isize + ki as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let s = (bi * t + src as usize) * c;
                for (o, &v) in os[s..s + c].iter_mut().zip(&grow[ki * c..(ki + 1) * c]) {
                    *o += v;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_forward<T: Float>(x: &ArrayD<T>, w: &ArrayD<T>) -> ArrayD<T> {
    let (b, t, c) = dims3(x);
    assert_eq!(w.ndim(), 2, "depthwise weight must be [K, C]");
    let k = w.shape()[0];
    assert_eq!(
        w.shape()[1],
        c,
        "depthwise weight channels {:?} vs input {:?}",
        w.shape(),
        x.shape()
    );
    assert!(k % 2 == 1, "depthwise kernel must be odd, got {k}");
    let pad = k / 2;
    let mut out = ArrayD::<T>::zeros(x.raw_dim());
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        for ti in 0..t {
            let orow = &mut os[(bi * t + ti) * c..(bi * t + ti + 1) * c];
            for ki in 0..k {
                let src = ti as isize + ki as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xrow = &xs[(bi * t + src as usize) * c..(bi * t + src as usize + 1) * c];
                let wrow = &ws[ki * c..(ki + 1) * c];
                for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Float>(
    g: &ArrayD<T>,
    x: &ArrayD<T>,
    w: &ArrayD<T>,
) -> (ArrayD<T>, ArrayD<T>) {
    let (b, t, c) = dims3(x);
    let k = w.shape()[0];
    let pad = k / 2;
    let mut gx = ArrayD::<T>::zeros(x.raw_dim());
    let mut gw = ArrayD::<T>::zeros(w.raw_dim());
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gs = g.as_slice().unwrap();
    {
        let gxs = gx.as_slice_mut().unwrap();
        let gws = gw.as_slice_mut().unwrap();
        for bi in 0..b {
            for ti in 0..t {
                let grow = &gs[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for ki in 0..k {
                    let src = ti as isize + ki as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let off = (bi * t + src as usize) * c;
                    let xrow = &xs[off..off + c];
                    let wrow = &ws[ki * c..(ki + 1) * c];
                    let gwrow = &mut gws[ki * c..(ki + 1) * c];
                    for j in 0..c {
                        gwrow[j] += grow[j] * xrow[j];
                    }
                    let gxrow = &mut gxs[off..off + c];
                    for j in 0..c {
                        gxrow[j] += grow[j] * wrow[j];
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn rel_index(i: usize, j: usize, radius: usize) -> usize {
    let d = (j as isize - i as isize).clamp(-(radius as isize), radius as isize);
    (d + radius as isize) as usize
}

pub(crate) fn rel_bias_forward<T: Float>(table: &ArrayD<T>, len: usize) -> ArrayD<T> {
    assert_eq!(table.ndim(), 2, "relative bias table must be [H, 2R+1]");
    let (h, w) = (table.shape()[0], table.shape()[1]);
    assert!(w % 2 == 1, "relative bias table width must be odd");
    let radius = w / 2;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[h, len, len]));
    let ts = table.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for hi in 0..h {
        for i in 0..len {
            for j in 0..len {
                os[(hi * len + i) * len + j] = ts[hi * w + rel_index(i, j, radius)];
            }
        }
    }
    out
}

pub(crate) fn rel_bias_backward<T: Float>(
    g: &ArrayD<T>,
    table_shape: &[usize],
    len: usize,
) -> ArrayD<T> {
    let (h, w) = (table_shape[0], table_shape[1]);
    let radius = w / 2;
    let mut gt = ArrayD::<T>::zeros(IxDyn(table_shape));
    let gs = g.as_slice().unwrap();
    let ts = gt.as_slice_mut().unwrap();
    for hi in 0..h {
        for i in 0..len {
            for j in 0..len {
                ts[hi * w + rel_index(i, j, radius)] += gs[(hi * len + i) * len + j];
            }
        }
    }
    gt
}
