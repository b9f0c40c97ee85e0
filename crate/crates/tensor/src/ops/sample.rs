//! Bilinear sampling at continuous pixel coordinates with border clamping.
//!
//! Grid entries are `(x, y)` pairs in source pixel units: `x` indexes width,
//! `y` indexes height, and integer values land exactly on pixel centers.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Per-axis interpolation footprint: two taps, the weight on the upper tap,
/// and whether the coordinate was clamped (zero coordinate gradient).
#[derive(Clone, Copy)]
struct Axis {
    lo: usize,
    hi: usize,
    frac: f64,
    clamped: bool,
}

fn axis(coord: f64, extent: usize) -> Axis {
    let max = (extent - 1) as f64;
    let clamped = !(0.0..=max).contains(&coord);
    let c = coord.clamp(0.0, max);
    if extent == 1 {
        return Axis {
            lo: 0,
            hi: 0,
            frac: 0.0,
            clamped,
        };
    }
    let lo = (c.floor() as usize).min(extent - 2);
    Axis {
        lo,
        hi: lo + 1,
        frac: c - lo as f64,
        clamped,
    }
}

pub(crate) fn check(source: &Tensor, grid: &Tensor) -> Result<()> {
    let (n, _, _, _) = source.dims4()?;
    match grid.shape() {
        [gn, _, _, 2] if *gn == n => Ok(()),
        s => Err(TensorError::shape(
            "grid_sample",
            format!("grid must be {n}xHxWx2, got {s:?}"),
        )),
    }
}

pub(crate) fn forward(source: &Tensor, grid: &Tensor) -> Tensor {
    let (n, c, h, w) = source.dims4().unwrap();
    let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
    let (src, gd) = (source.data(), grid.data());
    let mut out = vec![0.0; n * c * ho * wo];
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let ax = axis(gd[gi], w);
            let ay = axis(gd[gi + 1], h);
            for ch in 0..c {
                let plane = &src[(b * c + ch) * h * w..];
                let v00 = plane[ay.lo * w + ax.lo];
                let v01 = plane[ay.lo * w + ax.hi];
                let v10 = plane[ay.hi * w + ax.lo];
                let v11 = plane[ay.hi * w + ax.hi];
                let top = v00 * (1.0 - ax.frac) + v01 * ax.frac;
                let bottom = v10 * (1.0 - ax.frac) + v11 * ax.frac;
                out[(b * c + ch) * ho * wo + p] = top * (1.0 - ay.frac) + bottom * ay.frac;
            }
        }
    }
    Tensor::new(&[n, c, ho, wo], out).unwrap()
}

pub(crate) fn backward(
    source: &Tensor,
    grid: &Tensor,
    grad: &Tensor,
    want: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c, h, w) = source.dims4().unwrap();
    let (ho, wo) = (grid.shape()[1], grid.shape()[2]);
    let (src, gd, gout) = (source.data(), grid.data(), grad.data());
    let mut dsrc = want.0.then(|| vec![0.0; source.len()]);
    let mut dgrid = want.1.then(|| vec![0.0; grid.len()]);
    for b in 0..n {
        for p in 0..ho * wo {
            let gi = (b * ho * wo + p) * 2;
            let ax = axis(gd[gi], w);
            let ay = axis(gd[gi + 1], h);
            let (mut gx, mut gy) = (0.0, 0.0);
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let g = gout[(b * c + ch) * ho * wo + p];
                let i00 = base + ay.lo * w + ax.lo;
                let i01 = base + ay.lo * w + ax.hi;
                let i10 = base + ay.hi * w + ax.lo;
                let i11 = base + ay.hi * w + ax.hi;
                if let Some(ds) = dsrc.as_mut() {
                    ds[i00] += g * (1.0 - ax.frac) * (1.0 - ay.frac);
                    ds[i01] += g * ax.frac * (1.0 - ay.frac);
                    ds[i10] += g * (1.0 - ax.frac) * ay.frac;
                    ds[i11] += g * ax.frac * ay.frac;
                }
                if dgrid.is_some() {
                    let (v00, v01, v10, v11) = (src[i00], src[i01], src[i10], src[i11]);
                    gx += g * ((v01 - v00) * (1.0 - ay.frac) + (v11 - v10) * ay.frac);
                    gy += g * ((v10 - v00) * (1.0 - ax.frac) + (v11 - v01) * ax.frac);
                }
            }
            if let Some(dg) = dgrid.as_mut() {
                dg[gi] = if ax.clamped { 0.0 } else { gx };
                dg[gi + 1] = if ay.clamped { 0.0 } else { gy };
            }
        }
    }
    (
        dsrc.map(|v| Tensor::new(source.shape(), v).unwrap()),
        dgrid.map(|v| Tensor::new(grid.shape(), v).unwrap()),
    )
}
