use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn keepdim_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

pub(crate) fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split("sum_axis", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let row = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    Tensor::new(&keepdim_shape(x.shape(), axis), out)
}

/// Broadcasts a keepdim gradient back along `axis`, scaled by `scale`.
pub(crate) fn expand_axis(g: &Tensor, shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let (outer, len, inner) = split("expand_axis", shape, axis).unwrap();
    let gd = g.data();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                out[(o * len + k) * inner + i] = gd[o * inner + i] * scale;
            }
        }
    }
    Tensor::new(shape, out).unwrap()
}

pub(crate) fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split("softmax", x.shape(), axis)?;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let m = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..len {
                let e = (d[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..len {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split("softmax", y.shape(), axis).unwrap();
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| yd[at(k)] * gd[at(k)]).sum();
            for k in 0..len {
                out[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out).unwrap()
}
