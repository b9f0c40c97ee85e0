//! Training objectives: weighted cross-entropy for segmentation, and the
//! photometric + edge-aware smoothness objective for self-supervised depth.
//!
//! Every loss is built on a [`Tape`] so it can be differentiated with respect
//! to network outputs and, for attacks, the input image.

use mtl_tensor::{Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Offset `c` in the class-weight formula `1 / ln(c + p_s)`.
pub const CLASS_WEIGHT_OFFSET: f64 = 1.02;
/// Probabilities are clamped here before the logarithm.
pub const LOG_CLAMP: f64 = 1e-7;
/// SSIM stabilizers on the [0, 1] intensity scale.
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Weight of the SSIM term against L1 in the photometric error.
pub const PHOTOMETRIC_ALPHA: f64 = 0.85;
/// Weight of the smoothness term in the depth loss.
pub const SMOOTHNESS_BETA: f64 = 1e-3;
/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Contract(format!(
                "class weights must be finite and positive: {weights:?}"
            )));
        }
        Ok(Self(weights))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Frequency-balanced weights `1 / ln(1.02 + p_s)` from per-class pixel counts.
pub fn class_weights(histogram: &[u64]) -> Result<ClassWeights> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(Error::Contract("class histogram is empty".into()));
    }
    ClassWeights::new(
        histogram
            .iter()
            .map(|&c| 1.0 / (CLASS_WEIGHT_OFFSET + c as f64 / total as f64).ln())
            .collect(),
    )
}

/// `N x S x H x W` one-hot encoding of `N x H x W` labels; ignored labels
/// become all-zero rows.
pub fn one_hot(labels: &[u8], n: usize, classes: usize, h: usize, w: usize) -> Result<Tensor> {
    if labels.len() != n * h * w {
        return Err(Error::Contract(format!(
            "{} labels for a {n}x{h}x{w} batch",
            labels.len()
        )));
    }
    let mut out = vec![0.0; n * classes * h * w];
    for b in 0..n {
        for p in 0..h * w {
            let l = labels[b * h * w + p];
            if l == IGNORE_LABEL {
                continue;
            }
            if l as usize >= classes {
                return Err(Error::Contract(format!("label {l} with {classes} classes")));
            }
            out[(b * classes + l as usize) * h * w + p] = 1.0;
        }
    }
    Ok(Tensor::new(&[n, classes, h, w], out)?)
}

/// Weighted cross-entropy of `N x S x H x W` probabilities against one-hot
/// targets, averaged over labelled pixels.
pub fn weighted_cross_entropy(
    tape: &Tape,
    probs: Var,
    target: &Tensor,
    weights: &ClassWeights,
) -> Result<Var> {
    let shape = tape.shape(probs);
    if shape.as_slice() != target.shape() || shape.len() != 4 {
        return Err(Error::Tensor(mtl_tensor::TensorError::Shape {
            op: "weighted_cross_entropy",
            detail: format!("probs {shape:?} vs target {:?}", target.shape()),
        }));
    }
    let (n, s, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if weights.len() != s {
        return Err(Error::Contract(format!("{} weights for {s} classes", weights.len())));
    }
    let mut weighted = target.clone();
    let mut labelled = 0usize;
    for b in 0..n {
        for p in 0..h * w {
            let mut hot = false;
            for c in 0..s {
                let i = (b * s + c) * h * w + p;
                hot |= weighted.data()[i] != 0.0;
                weighted.data_mut()[i] *= weights.as_slice()[c];
            }
            labelled += hot as usize;
        }
    }
    let logp = tape.log(tape.clamp(probs, LOG_CLAMP, 1.0));
    let wt = tape.constant(weighted);
    let total = tape.sum(tape.mul(logp, wt)?);
    Ok(tape.mul_scalar(total, -1.0 / labelled.max(1) as f64))
}

/// Per-pixel SSIM of two `N x C x H x W` images on the [0, 1] scale with 3x3
/// local statistics, clipped to [0, 1] and averaged over channels
/// (result `N x 1 x H x W`).
pub fn ssim_index(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let mu_a = tape.box_filter3(a)?;
    let mu_b = tape.box_filter3(b)?;
    let aa = tape.box_filter3(tape.mul(a, a)?)?;
    let bb = tape.box_filter3(tape.mul(b, b)?)?;
    let ab = tape.box_filter3(tape.mul(a, b)?)?;
    let mu_aa = tape.mul(mu_a, mu_a)?;
    let mu_bb = tape.mul(mu_b, mu_b)?;
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(aa, mu_aa)?;
    let var_b = tape.sub(bb, mu_bb)?;
    let cov = tape.sub(ab, mu_ab)?;
    let num = tape.mul(
        tape.add_scalar(tape.mul_scalar(mu_ab, 2.0), SSIM_C1),
        tape.add_scalar(tape.mul_scalar(cov, 2.0), SSIM_C2),
    )?;
    let den = tape.mul(
        tape.add_scalar(tape.add(mu_aa, mu_bb)?, SSIM_C1),
        tape.add_scalar(tape.add(var_a, var_b)?, SSIM_C2),
    )?;
    let ssim = tape.clamp(tape.div(num, den)?, 0.0, 1.0);
    Ok(tape.mean_axis(ssim, 1)?)
}

/// Per-pixel photometric error `(a/2)(1 - SSIM) + (1 - a) mean_c |x - y|`,
/// shape `N x 1 x H x W`.
pub fn photometric_error(tape: &Tape, target: Var, warped: Var) -> Result<Var> {
    let ssim = ssim_index(tape, target, warped)?;
    let dssim = tape.mul_scalar(tape.add_scalar(tape.neg(ssim), 1.0), PHOTOMETRIC_ALPHA / 2.0);
    let l1 = tape.mean_axis(tape.abs(tape.sub(target, warped)?), 1)?;
    Ok(tape.add(dssim, tape.mul_scalar(l1, 1.0 - PHOTOMETRIC_ALPHA))?)
}

/// Per-pixel minimum of the photometric error over the warped candidates,
/// averaged over all pixels.
pub fn photometric_loss(tape: &Tape, target: Var, warped: &[Var]) -> Result<Var> {
    let (first, rest) = warped
        .split_first()
        .ok_or_else(|| Error::Contract("photometric loss needs at least one warped frame".into()))?;
    let mut best = photometric_error(tape, target, *first)?;
    for &w in rest {
        let e = photometric_error(tape, target, w)?;
        best = tape.min(best, e)?;
    }
    Ok(tape.mean(best))
}

/// Edge weights `exp(-mean_c |d x|)` along height and width for an
/// `N x C x H x W` image on the [0, 1] scale.
pub fn edge_weights(image: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = image.dims4()?;
    let d = image.data();
    let at = |b: usize, ch: usize, y: usize, x: usize| d[((b * c + ch) * h + y) * w + x];
    let mut wh = vec![0.0; n * (h - 1) * w];
    let mut ww = vec![0.0; n * h * (w - 1)];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                if y + 1 < h {
                    let g: f64 = (0..c).map(|ch| (at(b, ch, y + 1, x) - at(b, ch, y, x)).abs()).sum();
                    wh[(b * (h - 1) + y) * w + x] = (-g / c as f64).exp();
                }
                if x + 1 < w {
                    let g: f64 = (0..c).map(|ch| (at(b, ch, y, x + 1) - at(b, ch, y, x)).abs()).sum();
                    ww[(b * h + y) * (w - 1) + x] = (-g / c as f64).exp();
                }
            }
        }
    }
    Ok((
        Tensor::new(&[n, 1, h - 1, w], wh)?,
        Tensor::new(&[n, 1, h, w - 1], ww)?,
    ))
}

/// Edge-aware smoothness of an `N x 1 x H x W` inverse-depth map, normalized
/// by its per-image mean. Each direction is averaged over its valid forward
/// differences.
pub fn smoothness_loss(tape: &Tape, disparity: Var, image: &Tensor) -> Result<Var> {
    let dshape = tape.shape(disparity);
    let (n, c, h, w) = image.dims4()?;
    if dshape != [n, 1, h, w] {
        return Err(Error::Tensor(mtl_tensor::TensorError::Shape {
            op: "smoothness_loss",
            detail: format!("disparity {dshape:?} vs image {:?} ({c} channels)", image.shape()),
        }));
    }
    let mean = tape.mean_axis(tape.mean_axis(disparity, 3)?, 2)?;
    let norm = tape.div(disparity, mean)?;
    let (wh, ww) = edge_weights(image)?;
    let dh = tape.abs(tape.diff(norm, 2)?);
    let dw = tape.abs(tape.diff(norm, 3)?);
    let th = tape.mean(tape.mul(dh, tape.constant(wh))?);
    let tw = tape.mean(tape.mul(dw, tape.constant(ww))?);
    Ok(tape.add(th, tw)?)
}

/// `photometric + beta * smoothness`.
pub fn depth_loss(tape: &Tape, photometric: Var, smoothness: Var, beta: f64) -> Result<Var> {
    Ok(tape.add(photometric, tape.mul_scalar(smoothness, beta))?)
}

/// One scale's contribution to the depth objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTerms {
    pub scale: usize,
    pub photometric: f64,
    /// Smoothness including the `1 / 2^scale` weight.
    pub smoothness: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub j_ce: f64,
    pub j_ph: f64,
    pub j_sm: f64,
    pub j_depth: f64,
    pub per_scale: Vec<ScaleTerms>,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "epoch,step,j_ce,j_ph,j_sm,j_depth";

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        format!(
            "{epoch},{step},{:.9},{:.9},{:.9},{:.9}",
            self.j_ce, self.j_ph, self.j_sm, self.j_depth
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[50, 50]).unwrap();
        for v in w.as_slice() {
            assert!((v - 1.0 / 1.52f64.ln()).abs() < 1e-12);
            assert!((v - 2.38829).abs() < 1e-5);
        }
        let w = class_weights(&[7]).unwrap();
        assert!((w.as_slice()[0] - 1.42228).abs() < 1e-5);
        let w = class_weights(&[3, 0]).unwrap();
        assert!((w.as_slice()[1] - 1.0 / 1.02f64.ln()).abs() < 1e-12);
        let w = class_weights(&[10; 5]).unwrap();
        assert!(w.as_slice().windows(2).all(|p| p[0] == p[1]));
        assert!(class_weights(&[0, 0]).is_err());
    }

    #[test]
    fn one_hot_skips_ignored_labels() {
        let t = one_hot(&[0, 1, IGNORE_LABEL, 1], 1, 2, 2, 2).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(one_hot(&[0, 3], 1, 2, 1, 2).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        // One-hot prediction equal to the labels.
        let y = one_hot(&[0, 2, 1, 3], 1, 4, 2, 2).unwrap();
        let p = tape.constant(y.clone());
        let l = weighted_cross_entropy(&tape, p, &y, &ClassWeights::uniform(4)).unwrap();
        assert!(tape.value(l).item().unwrap().abs() <= 1e-6);

        let uniform = tape.constant(Tensor::full(&[1, 4, 2, 2], 0.25));
        let l = weighted_cross_entropy(&tape, uniform, &y, &ClassWeights::uniform(4)).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);

        // Two pixels laid out as a 1x2 image.
        let probs = Tensor::new(&[1, 2, 1, 2], vec![0.8, 0.3, 0.2, 0.7]).unwrap();
        let target = one_hot(&[0, 1], 1, 2, 1, 2).unwrap();
        let w = ClassWeights::new(vec![1.0, 2.0]).unwrap();
        let l = weighted_cross_entropy(&tape, tape.constant(probs), &target, &w).unwrap();
        let expected = -(0.8f64.ln() + 2.0 * 0.7f64.ln()) / 2.0;
        assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.468).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_rejects_mismatched_shapes() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::full(&[1, 3, 2, 2], 1.0 / 3.0));
        let y = one_hot(&[0, 1, 0, 1], 1, 2, 2, 2).unwrap();
        assert!(weighted_cross_entropy(&tape, p, &y, &ClassWeights::uniform(2)).is_err());
    }

    #[test]
    fn ssim_identical_images_is_one() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[1, 3, 5, 6], |i| (i as f64 * 0.37).sin().abs()));
        let s = tape.value(ssim_index(&tape, a, a).unwrap());
        assert!(s.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_constant_patches_closed_form() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::full(&[1, 3, 4, 4], 0.5));
        let b = tape.constant(Tensor::full(&[1, 3, 4, 4], 0.6));
        let s = tape.value(ssim_index(&tape, a, b).unwrap());
        let expected = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        assert!((expected - 0.98361).abs() < 1e-5);
        assert!(s.data().iter().all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn photometric_examples() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[1, 3, 6, 6], |i| ((i * 7919) % 101) as f64 / 100.0);
        let noise = Tensor::from_fn(&[1, 3, 6, 6], |i| ((i * 104729) % 97) as f64 / 96.0);
        let xv = tape.constant(x.clone());
        let same = tape.constant(x.clone());
        let nv = tape.constant(noise);
        let l = photometric_loss(&tape, xv, &[same, same]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
        let l = photometric_loss(&tape, xv, &[nv, same]).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-12);
        assert!(photometric_loss(&tape, xv, &[]).is_err());

        let a = tape.constant(Tensor::full(&[1, 3, 4, 4], 0.5));
        let b = tape.constant(Tensor::full(&[1, 3, 4, 4], 0.6));
        let l = tape.value(photometric_loss(&tape, a, &[b]).unwrap()).item().unwrap();
        let ssim = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        let expected = 0.85 / 2.0 * (1.0 - ssim) + 0.15 * 0.1;
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.02197).abs() < 1e-5);
    }

    #[test]
    fn smoothness_examples() {
        let tape = Tape::new();
        let flat = tape.constant(Tensor::full(&[1, 1, 4, 4], 2.0));
        let img = Tensor::full(&[1, 3, 4, 4], 0.3);
        let l = smoothness_loss(&tape, flat, &img).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);

        // Ramp 1..4 along width: normalized by mean 2.5 the slope is 0.4.
        let ramp = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 4) as f64 + 1.0);
        let rv = tape.constant(ramp);
        let l = tape.value(smoothness_loss(&tape, rv, &img).unwrap()).item().unwrap();
        assert!((l - 0.4).abs() < 1e-12);

        // Checkerboard: every neighbour differs by 1 in each channel.
        let checker = Tensor::from_fn(&[1, 3, 4, 4], |i| (((i % 16) / 4 + i % 4) % 2) as f64);
        let l2 = tape.value(smoothness_loss(&tape, rv, &checker).unwrap()).item().unwrap();
        assert!((l2 - 0.4 * (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn depth_loss_examples() {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        let v = |x: Var| tape.value(x).item().unwrap();
        assert_eq!(v(depth_loss(&tape, c(0.0), c(7.0), 0.0).unwrap()), 0.0);
        assert!((v(depth_loss(&tape, c(0.02197), c(0.5), SMOOTHNESS_BETA).unwrap()) - 0.022470).abs() < 1e-9);
        assert!((v(depth_loss(&tape, c(1.0), c(1.0), SMOOTHNESS_BETA).unwrap()) - 1.001).abs() < 1e-12);
    }

    #[test]
    fn loss_report_csv_row() {
        let r = LossReport {
            j_ce: 1.5,
            j_ph: 0.25,
            j_sm: 2.0,
            j_depth: 0.252,
            per_scale: vec![],
        };
        assert_eq!(r.csv_row(3, 17), "3,17,1.500000000,0.250000000,2.000000000,0.252000000");
    }
}
