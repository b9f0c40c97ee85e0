//! Optimization loop: Adam, step learning-rate schedule, augmentation and the
//! joint segmentation + self-supervised depth objective.

use mtl_tensor::{BnStats, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{self, Intrinsics};
use crate::losses::{self, ClassWeights, LossReport, ScaleTerms};
use crate::network::{Arch, Bound, Model, ScaleJunction};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// RNG stream ids derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SEG: u64 = 2;
const STREAM_DEPTH: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Segmentation and depth batches every step.
    Multi,
    /// Segmentation only; no depth batches are drawn.
    Single,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Self::Multi),
            "single" => Ok(Self::Single),
            _ => Err(Error::Config(format!("unknown mode {s:?} (multi|single)"))),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Multi => "multi",
            Self::Single => "single",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda: f64,
    pub lr: f64,
    pub decayed_lr: f64,
    pub epochs: usize,
    /// First epoch at the decayed rate; `None` means three quarters of `epochs`.
    pub decay_epoch: Option<usize>,
    pub seg_batch: usize,
    pub depth_batch: usize,
    pub seed: u64,
    pub scales: usize,
    pub beta: f64,
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub arch: Arch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Multi,
            lambda: 0.2,
            lr: 1e-4,
            decayed_lr: 1e-5,
            epochs: 8,
            decay_epoch: None,
            seg_batch: 6,
            depth_batch: 6,
            seed: 0,
            scales: 4,
            beta: losses::SMOOTHNESS_BETA,
            flip: true,
            brightness: 0.2,
            contrast: 0.2,
            arch: Arch::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ScaleJunction::new(self.lambda)?;
        let positive = [self.lr, self.decayed_lr];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.epochs == 0 || self.seg_batch == 0 || self.depth_batch == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(1..=4).contains(&self.scales) {
            return Err(Error::Config(format!("scales must be in 1..=4, got {}", self.scales)));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config("jitter ranges must be in [0, 1)".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn decay_epoch(&self) -> usize {
        self.decay_epoch.unwrap_or(self.epochs * 3 / 4)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_epoch() {
        cfg.lr
    } else {
        cfg.decayed_lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl Iterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts the step
/// before anything is modified.
pub fn adam_step<'a>(
    params: impl Iterator<Item = &'a mut Tensor>,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            step: state.step as usize,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let mut count = 0;
    for (i, p) in params.enumerate() {
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient {:?} for parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        count += 1;
    }
    if count != grads.len() {
        return Err(Error::Contract("parameter count changed".into()));
    }
    Ok(())
}

/// A labelled `3 x H x W` gray-value image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub labels: Vec<u8>,
}

/// Frames `(t-1, t, t+1)`, each `3 x H x W` gray values.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTriplet {
    pub frames: [Tensor; 3],
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainData {
    pub labeled: Vec<LabeledImage>,
    pub triplets: Vec<FrameTriplet>,
    pub classes: usize,
}

impl TrainData {
    pub fn histogram(&self) -> Vec<u64> {
        let mut h = vec![0u64; self.classes];
        for s in &self.labeled {
            for &l in &s.labels {
                if (l as usize) < self.classes {
                    h[l as usize] += 1;
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegBatch {
    /// `N x 3 x H x W` gray values.
    pub images: Tensor,
    /// One-hot `N x S x H x W`.
    pub target: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthBatch {
    /// Network inputs `(t-1, t, t+1)`, gray values, possibly jittered.
    pub inputs: [Tensor; 3],
    /// Photometric targets `(t-1, t, t+1)` on the [0, 1] scale, never jittered.
    pub targets: [Tensor; 3],
    pub intrinsics: Vec<Intrinsics>,
}

/// Stacks `3 x H x W` images into `N x 3 x H x W`.
pub fn stack(images: &[&Tensor]) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Contract("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(first.len() * images.len());
    for im in images {
        if im.shape() != shape.as_slice() {
            return Err(Error::Contract(format!("mixed image sizes {:?} and {shape:?}", im.shape())));
        }
        data.extend_from_slice(im.data());
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data)?)
}

/// Horizontal mirror of a `C x H x W` tensor.
pub fn flip_image(t: &Tensor) -> Tensor {
    let s = t.shape();
    let w = s[s.len() - 1];
    let mut out = t.clone();
    for (row_out, row) in out.data_mut().chunks_mut(w).zip(t.data().chunks(w)) {
        for (x, v) in row_out.iter_mut().enumerate() {
            *v = row[w - 1 - x];
        }
    }
    out
}

fn flip_labels(labels: &[u8], w: usize) -> Vec<u8> {
    labels
        .chunks(w)
        .flat_map(|row| row.iter().rev().copied())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        brightness: 1.0,
        contrast: 1.0,
    };

    fn sample<R: Rng>(rng: &mut R, cfg: &TrainConfig) -> Self {
        let mut draw = |r: f64| if r > 0.0 { rng.random_range(1.0 - r..=1.0 + r) } else { 1.0 };
        Self {
            brightness: draw(cfg.brightness),
            contrast: draw(cfg.contrast),
        }
    }

    /// Brightness scaling, then contrast about the image mean, clipped to
    /// the gray range.
    pub fn apply(&self, image: &Tensor) -> Tensor {
        if *self == Self::NONE {
            return image.clone();
        }
        let bright = image.map(|v| v * self.brightness);
        let mean = bright.mean();
        bright.map(|v| ((v - mean) * self.contrast + mean).clamp(0.0, 255.0))
    }
}

pub fn make_seg_batch<R: Rng>(
    samples: &[&LabeledImage],
    classes: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<SegBatch> {
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::new();
    for s in samples {
        let w = s.image.shape()[2];
        let flip = cfg.flip && rng.random_bool(0.5);
        let jitter = Jitter::sample(rng, cfg);
        let (img, lab) = if flip {
            (flip_image(&s.image), flip_labels(&s.labels, w))
        } else {
            (s.image.clone(), s.labels.clone())
        };
        images.push(jitter.apply(&img));
        labels.extend(lab);
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    let images = stack(&refs)?;
    let (n, _, h, w) = images.dims4()?;
    let target = losses::one_hot(&labels, n, classes, h, w)?;
    Ok(SegBatch { images, target })
}

pub fn make_depth_batch<R: Rng>(
    triplets: &[&FrameTriplet],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<DepthBatch> {
    let mut inputs: [Vec<Tensor>; 3] = Default::default();
    let mut targets: [Vec<Tensor>; 3] = Default::default();
    let mut intrinsics = Vec::with_capacity(triplets.len());
    for t in triplets {
        let w = t.frames[0].shape()[2];
        let flip = cfg.flip && rng.random_bool(0.5);
        let jitter = Jitter::sample(rng, cfg);
        for (j, f) in t.frames.iter().enumerate() {
            let f = if flip { flip_image(f) } else { f.clone() };
            inputs[j].push(jitter.apply(&f));
            targets[j].push(f.map(|v| v / 255.0));
        }
        intrinsics.push(if flip { t.intrinsics.flipped(w) } else { t.intrinsics });
    }
    let st = |v: &Vec<Tensor>| stack(&v.iter().collect::<Vec<_>>());
    Ok(DepthBatch {
        inputs: [st(&inputs[0])?, st(&inputs[1])?, st(&inputs[2])?],
        targets: [st(&targets[0])?, st(&targets[1])?, st(&targets[2])?],
        intrinsics,
    })
}

/// Average-pools an NCHW tensor by `2^scale`.
pub fn downsample(t: &Tensor, scale: usize) -> Result<Tensor> {
    let f = 1 << scale;
    let (n, c, h, w) = t.dims4()?;
    if h % f != 0 || w % f != 0 {
        return Err(Error::Contract(format!("{h}x{w} not divisible by {f}")));
    }
    let (oh, ow) = (h / f, w / f);
    let norm = 1.0 / (f * f) as f64;
    let d = t.data();
    let out = Tensor::from_fn(&[n, c, oh, ow], |i| {
        let (plane, rest) = (i / (oh * ow), i % (oh * ow));
        let (y, x) = (rest / ow, rest % ow);
        let base = plane * h * w;
        let mut s = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                s += d[base + (y * f + dy) * w + x * f + dx];
            }
        }
        s * norm
    });
    Ok(out)
}

/// Sampling grid for a batch whose samples may carry different intrinsics.
pub fn batch_grid(tape: &Tape, depth: Var, pose: Var, intrinsics: &[Intrinsics]) -> Result<Var> {
    let shape = tape.shape(depth);
    if shape[0] != intrinsics.len() {
        return Err(Error::Contract(format!(
            "{} intrinsics for a batch of {}",
            intrinsics.len(),
            shape[0]
        )));
    }
    if intrinsics.iter().all(|k| *k == intrinsics[0]) {
        return Ok(geometry::reproject_grid(tape, depth, pose, intrinsics[0])?.0);
    }
    let (h, w) = (shape[2], shape[3]);
    let depth_rows = tape.reshape(depth, &[shape[0], 1, h * w])?;
    let mut grids = Vec::with_capacity(shape[0]);
    for (i, k) in intrinsics.iter().enumerate() {
        let d = select_row(tape, depth_rows, i, shape[0])?;
        let d = tape.reshape(d, &[1, 1, h, w])?;
        let p = select_row(tape, tape.reshape(pose, &[shape[0], 1, 6])?, i, shape[0])?;
        let p = tape.reshape(p, &[1, 6])?;
        grids.push(geometry::reproject_grid(tape, d, p, *k)?.0);
    }
    Ok(tape.concat(&grids, 0)?)
}

/// Row `i` of an `N x 1 x K` variable, as `1 x 1 x K`.
fn select_row(tape: &Tape, v: Var, i: usize, n: usize) -> Result<Var> {
    let k = tape.shape(v)[2];
    let mut mask = vec![0.0; n];
    mask[i] = 1.0;
    let m = tape.constant(Tensor::new(&[n, 1, 1], mask)?);
    let picked = tape.mul(v, m)?;
    let summed = tape.sum_axis(picked, 0)?;
    Ok(tape.reshape(summed, &[1, 1, k])?)
}

/// Per-pixel-minimum photometric loss of the target frame against both
/// neighbours warped with full-resolution `depth` and the two poses.
pub fn warp_photometric(
    tape: &Tape,
    targets: [Var; 3],
    depth: Var,
    poses: [Var; 2],
    intrinsics: &[Intrinsics],
) -> Result<Var> {
    let mut warped = Vec::with_capacity(2);
    for (src, pose) in [(targets[0], poses[0]), (targets[2], poses[1])] {
        let grid = batch_grid(tape, depth, pose, intrinsics)?;
        warped.push(tape.grid_sample(src, grid)?);
    }
    losses::photometric_loss(tape, targets[1], &warped)
}

/// Terms of the depth objective for one forward pass.
pub struct DepthTerms {
    pub j_ph: Var,
    pub j_sm: Var,
    pub j_depth: Var,
    pub per_scale: Vec<(Var, Var)>,
}

/// Multi-scale self-supervised depth objective. Each scale's depth is
/// upsampled to full resolution for the photometric term; smoothness is
/// taken at the native scale against a pooled image and weighted `1/2^s`.
/// Both terms are averaged over scales.
pub fn depth_objective(
    tape: &Tape,
    model: &Model,
    bound: &Bound,
    bn: &mut [BnStats],
    batch: &DepthBatch,
    junction: ScaleJunction,
    cfg: &TrainConfig,
    training: bool,
) -> Result<DepthTerms> {
    let inputs = batch.inputs.clone().map(|t| tape.constant(t));
    let targets = batch.targets.clone().map(|t| tape.constant(t));
    let feats = model.encode(tape, bound, bn, inputs[1], training)?;
    let sigmas = model.depth_head(tape, bound, &feats, junction)?;
    let poses = [
        model.pose(tape, bound, inputs[1], inputs[0], junction)?,
        model.pose(tape, bound, inputs[1], inputs[2], junction)?,
    ];
    let mut per_scale = Vec::with_capacity(cfg.scales);
    for (s, &sigma) in sigmas.iter().enumerate().take(cfg.scales) {
        let disp = geometry::sigmoid_to_disparity(tape, sigma);
        let mut depth = tape.recip(disp);
        for _ in 0..s {
            depth = tape.upsample2(depth)?;
        }
        let ph = warp_photometric(tape, targets, depth, poses, &batch.intrinsics)?;
        let pooled = downsample(&batch.targets[1], s)?;
        let sm = losses::smoothness_loss(tape, disp, &pooled)?;
        per_scale.push((ph, tape.mul_scalar(sm, 1.0 / (1 << s) as f64)));
    }
    let k = 1.0 / per_scale.len() as f64;
    let mut j_ph = per_scale[0].0;
    let mut j_sm = per_scale[0].1;
    for &(ph, sm) in &per_scale[1..] {
        j_ph = tape.add(j_ph, ph)?;
        j_sm = tape.add(j_sm, sm)?;
    }
    let j_ph = tape.mul_scalar(j_ph, k);
    let j_sm = tape.mul_scalar(j_sm, k);
    let j_depth = losses::depth_loss(tape, j_ph, j_sm, cfg.beta)?;
    Ok(DepthTerms {
        j_ph,
        j_sm,
        j_depth,
        per_scale,
    })
}

/// Segmentation objective for one forward pass.
pub fn seg_objective(
    tape: &Tape,
    model: &Model,
    bound: &Bound,
    bn: &mut [BnStats],
    batch: &SegBatch,
    weights: &ClassWeights,
    junction: ScaleJunction,
    training: bool,
) -> Result<Var> {
    let x = tape.constant(batch.images.clone());
    let feats = model.encode(tape, bound, bn, x, training)?;
    let probs = model.seg_head(tape, bound, &feats, junction)?;
    losses::weighted_cross_entropy(tape, probs, &batch.target, weights)
}

/// Gradients of the combined objective with respect to every parameter, in
/// model order, plus the loss values. Running statistics are updated.
pub fn compute_gradients(
    model: &mut Model,
    seg: Option<&SegBatch>,
    depth: Option<&DepthBatch>,
    weights: &ClassWeights,
    cfg: &TrainConfig,
) -> Result<(Vec<Tensor>, LossReport)> {
    if seg.is_none() && depth.is_none() {
        return Err(Error::Contract("a step needs at least one batch".into()));
    }
    // single-task runs train segmentation alone at full weight
    let lambda = match cfg.mode {
        TrainMode::Single => 1.0,
        TrainMode::Multi => cfg.lambda,
    };
    let junction = ScaleJunction::new(lambda)?;
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let mut bn = std::mem::take(&mut model.bn);
    let mut report = LossReport::default();
    let mut total: Option<Var> = None;
    let result = (|| -> Result<()> {
        if let Some(b) = seg {
            let ce = seg_objective(&tape, model, &bound, &mut bn, b, weights, junction, true)?;
            report.j_ce = tape.value(ce).item()?;
            total = Some(ce);
        }
        if let Some(b) = depth {
            let terms = depth_objective(&tape, model, &bound, &mut bn, b, junction, cfg, true)?;
            report.j_ph = tape.value(terms.j_ph).item()?;
            report.j_sm = tape.value(terms.j_sm).item()?;
            report.j_depth = tape.value(terms.j_depth).item()?;
            report.per_scale = terms
                .per_scale
                .iter()
                .enumerate()
                .map(|(s, &(ph, sm))| {
                    Ok(ScaleTerms {
                        scale: s,
                        photometric: tape.value(ph).item()?,
                        smoothness: tape.value(sm).item()?,
                    })
                })
                .collect::<Result<_>>()?;
            total = Some(match total {
                Some(t) => tape.add(t, terms.j_depth)?,
                None => terms.j_depth,
            });
        }
        Ok(())
    })();
    model.bn = bn;
    result?;
    let total = total.expect("at least one batch");
    let value = tape.value(total).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "loss".into(),
            step: 0,
        });
    }
    tape.backward(total)?;
    let grads = bound
        .vars()
        .iter()
        .map(|&v| tape.grad(v).expect("parameter gradient"))
        .collect();
    Ok((grads, report))
}

/// One optimizer step on a segmentation batch and/or a depth batch.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    seg: Option<&SegBatch>,
    depth: Option<&DepthBatch>,
    weights: &ClassWeights,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    let step = adam.step as usize;
    let (grads, report) = compute_gradients(model, seg, depth, weights, cfg).map_err(|e| match e {
        Error::NonFinite { what, .. } => Error::NonFinite { what, step },
        e => e,
    })?;
    adam_step(model.params_mut(), &grads, adam, lr)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub class_weights: ClassWeights,
    pub log: Vec<StepLog>,
}

/// Full training run. `on_step` sees every step's losses as they happen.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.labeled.is_empty() {
        return Err(Error::Contract("no labelled images to train on".into()));
    }
    if cfg.mode == TrainMode::Multi && data.triplets.is_empty() {
        return Err(Error::Contract("multi-task training needs triplets".into()));
    }
    if data.classes != cfg.arch.classes {
        return Err(Error::Config(format!(
            "data has {} classes, architecture {}",
            data.classes, cfg.arch.classes
        )));
    }
    let weights = losses::class_weights(&data.histogram())?;
    let mut model = Model::new(cfg.arch.clone(), &mut cfg.rng(STREAM_INIT))?;
    let mut adam = AdamState::new(model.params());
    let mut seg_rng = cfg.rng(STREAM_SEG);
    let mut depth_rng = cfg.rng(STREAM_DEPTH);
    let mut seg_order: Vec<usize> = (0..data.labeled.len()).collect();
    let mut depth_order: Vec<usize> = (0..data.triplets.len()).collect();
    let mut depth_cursor = depth_order.len();
    let mut log = Vec::new();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        seg_order.shuffle(&mut seg_rng);
        for chunk in seg_order.chunks(cfg.seg_batch) {
            let samples: Vec<&LabeledImage> = chunk.iter().map(|&i| &data.labeled[i]).collect();
            let seg = make_seg_batch(&samples, data.classes, cfg, &mut seg_rng)?;
            let depth = match cfg.mode {
                TrainMode::Single => None,
                TrainMode::Multi => {
                    if depth_cursor + cfg.depth_batch > depth_order.len() {
                        depth_order.shuffle(&mut depth_rng);
                        depth_cursor = 0;
                    }
                    let end = (depth_cursor + cfg.depth_batch).min(depth_order.len());
                    let picked: Vec<&FrameTriplet> = depth_order[depth_cursor..end]
                        .iter()
                        .map(|&i| &data.triplets[i])
                        .collect();
                    depth_cursor = end;
                    Some(make_depth_batch(&picked, cfg, &mut depth_rng)?)
                }
            };
            let report = train_step(&mut model, &mut adam, Some(&seg), depth.as_ref(), &weights, cfg, lr)?;
            let entry = StepLog {
                epoch,
                step: global,
                report,
            };
            on_step(&entry);
            log.push(entry);
            global += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        class_weights: weights,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig {
            epochs: 40,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 1e-4);
        assert_eq!(lr_schedule(29, &cfg), 1e-4);
        assert_eq!(lr_schedule(30, &cfg), 1e-5);
        let high = (0..40).filter(|&e| lr_schedule(e, &cfg) == 1e-4).count();
        assert_eq!((high, 40 - high), (30, 10));
        let toy = TrainConfig::default();
        assert_eq!(toy.decay_epoch(), 6);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -2.0]).unwrap()];
        let mut st = AdamState::new(p.iter());
        adam_step(p.iter_mut(), &[Tensor::zeros(&[2])], &mut st, 1e-3).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        for g in [3.0, -0.02, 1e3] {
            let mut p = vec![Tensor::scalar(0.5)];
            let mut st = AdamState::new(p.iter());
            adam_step(p.iter_mut(), &[Tensor::scalar(g)], &mut st, 1e-3).unwrap();
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            let expected = 0.5 - 1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((p[0].item().unwrap() - expected).abs() < 1e-15);
            assert!((p[0].item().unwrap() - (0.5 - 1e-3 * g.signum())).abs() < 1e-9);
        }
    }

    #[test]
    fn adam_constant_gradient_tends_to_lr_sign() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut st = AdamState::new(p.iter());
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..5000 {
            adam_step(p.iter_mut(), &[Tensor::scalar(-0.7)], &mut st, 1e-3).unwrap();
            let now = p[0].item().unwrap();
            last = now - prev;
            prev = now;
        }
        assert!((last - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut st = AdamState::new(p.iter());
        let err = adam_step(p.iter_mut(), &[Tensor::scalar(f64::NAN)], &mut st, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert_eq!(p[0].item().unwrap(), 1.0);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn downsample_averages_blocks() {
        let t = Tensor::from_fn(&[1, 1, 2, 4], |i| i as f64);
        let d = downsample(&t, 1).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5]);
        assert_eq!(downsample(&t, 0).unwrap(), t);
    }

    #[test]
    fn jitter_none_is_identity_and_flip_involutes() {
        let t = Tensor::from_fn(&[3, 2, 5], |i| (i * 17 % 255) as f64);
        assert_eq!(Jitter::NONE.apply(&t), t);
        assert_eq!(flip_image(&flip_image(&t)), t);
        assert_eq!(flip_labels(&[1, 2, 3, 4, 5, 6], 3), vec![3, 2, 1, 6, 5, 4]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            seg_batch: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
