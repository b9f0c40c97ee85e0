//! Per-channel batch normalization over NCHW activations.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Running statistics owned by the model, updated on training-mode forwards.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// What the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub training: bool,
}

pub(crate) fn forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    training: bool,
) -> Result<(Tensor, BnSaved)> {
    let (n, c, h, w) = x.dims4()?;
    if gamma.len() != c || beta.len() != c || stats.channels() != c {
        return Err(TensorError::shape(
            "batch_norm",
            format!("{c} channels, affine {} / {}, stats {}", gamma.len(), beta.len(), stats.channels()),
        ));
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    if training {
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += d[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
            }
            mean[ch] = s / count;
            let mut v = 0.0;
            for b in 0..n {
                for &e in &d[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    v += (e - mean[ch]) * (e - mean[ch]);
                }
            }
            var[ch] = v / count;
            let unbiased = if count > 1.0 { v / (count - 1.0) } else { var[ch] };
            let m = stats.momentum;
            stats.running_mean[ch] = (1.0 - m) * stats.running_mean[ch] + m * mean[ch];
            stats.running_var[ch] = (1.0 - m) * stats.running_var[ch] + m * unbiased;
        }
    } else {
        mean.copy_from_slice(&stats.running_mean);
        var.copy_from_slice(&stats.running_var);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + stats.eps).sqrt()).collect();
    let mut xhat = vec![0.0; d.len()];
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
                out[i] = gamma.data()[ch] * xhat[i] + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        BnSaved {
            xhat,
            inv_std,
            training,
        },
    ))
}

pub(crate) fn backward(
    shape: &[usize],
    gamma: &Tensor,
    saved: &BnSaved,
    g: &Tensor,
    want: (bool, bool, bool),
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * hw) as f64;
    let gd = g.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                dgamma[ch] += gd[i] * saved.xhat[i];
                dbeta[ch] += gd[i];
            }
        }
    }
    let dx = want.0.then(|| {
        let mut dx = vec![0.0; gd.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                let scale = gamma.data()[ch] * saved.inv_std[ch];
                for i in off..off + hw {
                    dx[i] = if saved.training {
                        scale * (gd[i] - dbeta[ch] / count - saved.xhat[i] * dgamma[ch] / count)
                    } else {
                        scale * gd[i]
                    };
                }
            }
        }
        Tensor::new(shape, dx).unwrap()
    });
    (
        dx,
        want.1.then(|| Tensor::new(&[c], dgamma).unwrap()),
        want.2.then(|| Tensor::new(&[c], dbeta).unwrap()),
    )
}
