//! Layout ops: concatenation, nearest upsampling, flips, forward differences
//! and the reflect-padded 3x3 box filter.

use crate::error::{Result, TensorError};
use crate::ops::reduce::split;
use crate::tensor::Tensor;

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
    let (outer, _, inner) = split("concat", first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let ok = p.ndim() == first.ndim()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(TensorError::shape(
                "concat",
                format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
            ));
        }
        total += p.shape()[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis];
            out.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

/// Slices the gradient of a concatenation back into per-input pieces.
pub(crate) fn concat_backward(g: &Tensor, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor> {
    let (outer, total, inner) = split("concat", g.shape(), axis).unwrap();
    let mut out: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    for o in 0..outer {
        let mut off = 0;
        for (buf, s) in out.iter_mut().zip(shapes) {
            let len = s[axis];
            let start = (o * total + off) * inner;
            buf.extend_from_slice(&g.data()[start..start + len * inner]);
            off += len;
        }
    }
    out.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s, d).unwrap())
        .collect()
}

pub(crate) fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let d = x.data();
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * h2 * w2];
    for p in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h2 + y) * w2 + xx] = d[(p * h + y / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

pub(crate) fn upsample2_backward(g: &Tensor, input_shape: &[usize]) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (h2, w2) = (2 * h, 2 * w);
    let gd = g.data();
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                out[(p * h + y / 2) * w + xx / 2] += gd[(p * h2 + y) * w2 + xx];
            }
        }
    }
    Tensor::new(input_shape, out).unwrap()
}

/// Reverses the last axis.
pub(crate) fn hflip(x: &Tensor) -> Result<Tensor> {
    let w = *x
        .shape()
        .last()
        .ok_or_else(|| TensorError::shape("hflip", "scalar input"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(w.max(1)) {
        row.reverse();
    }
    Tensor::new(x.shape(), out)
}

/// `out[.., i, ..] = x[.., i + 1, ..] - x[.., i, ..]` along `axis`.
pub(crate) fn diff(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = split("diff", x.shape(), axis)?;
    if len < 2 {
        return Err(TensorError::shape("diff", format!("axis {axis} has extent {len}")));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(outer * (len - 1) * inner);
    for o in 0..outer {
        for k in 0..len - 1 {
            for i in 0..inner {
                out.push(d[(o * len + k + 1) * inner + i] - d[(o * len + k) * inner + i]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len - 1;
    Tensor::new(&shape, out)
}

pub(crate) fn diff_backward(g: &Tensor, input_shape: &[usize], axis: usize) -> Tensor {
    let (outer, len, inner) = split("diff", input_shape, axis).unwrap();
    let gd = g.data();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        for k in 0..len - 1 {
            for i in 0..inner {
                let gv = gd[(o * (len - 1) + k) * inner + i];
                out[(o * len + k + 1) * inner + i] += gv;
                out[(o * len + k) * inner + i] -= gv;
            }
        }
    }
    Tensor::new(input_shape, out).unwrap()
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// 3x3 mean over each spatial plane with one pixel of reflection padding.
pub(crate) fn box3(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h < 2 || w < 2 {
        return Err(TensorError::shape("box3", format!("plane {h}x{w} below 2x2")));
    }
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..n * c {
        let plane = &d[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for dy in -1..=1isize {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        s += plane[yy * w + reflect(xx as isize + dx, w)];
                    }
                }
                out[p * h * w + y * w + xx] = s / 9.0;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn box3_backward(g: &Tensor) -> Tensor {
    let (n, c, h, w) = g.dims4().unwrap();
    let gd = g.data();
    let mut out = vec![0.0; gd.len()];
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let gv = gd[base + y * w + xx] / 9.0;
                for dy in -1..=1isize {
                    let yy = reflect(y as isize + dy, h);
                    for dx in -1..=1isize {
                        out[base + yy * w + reflect(xx as isize + dx, w)] += gv;
                    }
                }
            }
        }
    }
    Tensor::new(g.shape(), out).unwrap()
}
