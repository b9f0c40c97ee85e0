//! 2-D cross-correlation through im2col and a dense matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oc: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = input.dims4()?;
        let (oc, kc, kh, kw) = kernel.dims4()?;
        if kc != c {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {h}x{w} too small for kernel {kh}x{kw} (pad {pad}, stride {stride})"),
            ));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            oc,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source offset for (channel, ky, kx, oy, ox) or `None` in the zero halo.
    #[inline]
    fn source(&self, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let ncol = self.cols();
        for ci in 0..self.c {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            dst[oy * self.ow + ox] = match self.source(ky, kx, oy, ox) {
                                Some((y, x)) => plane[y * self.w + x],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let ncol = self.cols();
        for ci in 0..self.c {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.source(ky, kx, oy, ox) {
                                plane[y * self.w + x] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn view(d: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), d).expect("gemm operand shape")
}

fn view_mut(d: &mut [f64], r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), d).expect("gemm output shape")
}

pub(crate) fn forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    g: &ConvGeom,
) -> Tensor {
    let (rows, ncol) = (g.rows(), g.cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; g.n * g.oc * ncol];
    let in_stride = g.c * g.h * g.w;
    let wk = view(kernel.data(), g.oc, rows);
    for b in 0..g.n {
        g.im2col(&input.data()[b * in_stride..(b + 1) * in_stride], &mut cols);
        let dst = &mut out[b * g.oc * ncol..(b + 1) * g.oc * ncol];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(ncol).enumerate() {
                chunk.fill(bias.data()[o]);
            }
        }
        general_mat_mul(1.0, &wk, &view(&cols, rows, ncol), 1.0, &mut view_mut(dst, g.oc, ncol));
    }
    Tensor::new(&[g.n, g.oc, g.oh, g.ow], out).expect("conv output shape")
}

/// Returns (d input, d kernel, d bias) for the requested operands.
pub(crate) fn backward(
    input: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (rows, ncol) = (g.rows(), g.cols());
    let in_stride = g.c * g.h * g.w;
    let mut cols = vec![0.0; rows * ncol];
    let mut dcols = vec![0.0; rows * ncol];
    let mut dinput = want.0.then(|| vec![0.0; input.len()]);
    let mut dkernel = want.1.then(|| vec![0.0; kernel.len()]);
    let mut dbias = want.2.then(|| vec![0.0; g.oc]);
    let wk = view(kernel.data(), g.oc, rows);
    for b in 0..g.n {
        let gout = view(&grad.data()[b * g.oc * ncol..(b + 1) * g.oc * ncol], g.oc, ncol);
        if let Some(db) = dbias.as_mut() {
            for (o, row) in gout.rows().into_iter().enumerate() {
                db[o] += row.sum();
            }
        }
        if let Some(dk) = dkernel.as_mut() {
            g.im2col(&input.data()[b * in_stride..(b + 1) * in_stride], &mut cols);
            general_mat_mul(
                1.0,
                &gout,
                &view(&cols, rows, ncol).t(),
                1.0,
                &mut view_mut(dk, g.oc, rows),
            );
        }
        if let Some(di) = dinput.as_mut() {
            general_mat_mul(1.0, &wk.t(), &gout, 0.0, &mut view_mut(&mut dcols, rows, ncol));
            g.col2im(&dcols, &mut di[b * in_stride..(b + 1) * in_stride]);
        }
    }
    (
        dinput.map(|v| Tensor::new(input.shape(), v).unwrap()),
        dkernel.map(|v| Tensor::new(kernel.shape(), v).unwrap()),
        dbias.map(|v| Tensor::new(&[g.oc], v).unwrap()),
    )
}
