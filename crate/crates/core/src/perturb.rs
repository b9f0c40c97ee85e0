//! Input perturbations on raw gray values and their strength measurement.
//!
//! Families are trait objects registered by name in a
//! [`PerturbationRegistry`]; the sweep and the CLI select them at runtime.

use mtl_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::evaluation::argmax_mask;
use crate::losses::{self, ClassWeights};
use crate::network::{Model, ScaleJunction};

pub const DEFAULT_PGD_ITERS: usize = 10;

/// Which labels the gradient attacks differentiate against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMode {
    #[default]
    GroundTruth,
    /// The model's own clean prediction.
    Predicted,
}

impl std::str::FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" | "ground-truth" => Ok(Self::GroundTruth),
            "predicted" => Ok(Self::Predicted),
            _ => Err(Error::Config(format!("unknown label mode {s:?} (truth|predicted)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    /// Salt-and-pepper pixel fraction. When unset it is derived from the
    /// strength with [`salt_pepper_fraction`].
    pub fraction: Option<f64>,
    pub pgd_iters: usize,
    /// PGD step; `None` means a quarter of the strength.
    pub pgd_step: Option<f64>,
    /// Clip adversarial images to the gray range (PGD only).
    pub clip: bool,
    pub label_mode: LabelMode,
    /// Multiplies the attacked loss; the sign attacks do not depend on it.
    pub loss_scale: f64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            fraction: None,
            pgd_iters: DEFAULT_PGD_ITERS,
            pgd_step: None,
            clip: false,
            label_mode: LabelMode::GroundTruth,
            loss_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    /// Strength in gray values.
    pub eps: f64,
    pub seed: u64,
    pub options: Options,
}

impl PerturbationSpec {
    pub fn new(eps: f64, seed: u64) -> Self {
        Self {
            eps,
            seed,
            options: Options::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("strength must be >= 0, got {}", self.eps)));
        }
        if let Some(f) = self.options.fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("pixel fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedImage {
    pub x_adv: Tensor,
    pub residual: Tensor,
    pub eps_measured: f64,
    pub snr: f64,
}

impl PerturbedImage {
    /// `x_adv = x + r`, with strength and SNR measured from `r`.
    pub fn from_residual(x: &Tensor, residual: Tensor) -> Result<Self> {
        let x_adv = x.zip_map(&residual, |a, r| a + r)?;
        let (eps_measured, snr) = measure_epsilon(x, &x_adv)?;
        Ok(Self {
            x_adv,
            residual,
            eps_measured,
            snr,
        })
    }
}

/// Root-mean-square perturbation and signal-to-noise ratio `sum x^2 / sum r^2`
/// (infinite when nothing changed).
pub fn measure_epsilon(x: &Tensor, x_adv: &Tensor) -> Result<(f64, f64)> {
    let r = x_adv.zip_map(x, |a, b| a - b)?;
    let r2: f64 = r.data().iter().map(|v| v * v).sum();
    let x2: f64 = x.data().iter().map(|v| v * v).sum();
    let eps = (r2 / x.len() as f64).sqrt();
    let snr = if r2 == 0.0 { f64::INFINITY } else { x2 / r2 };
    Ok((eps, snr))
}

/// Per-image seed for the `index`-th image of a sweep.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// A model the gradient attacks can query.
pub trait AttackTarget {
    /// Class probabilities `1 x S x H x W` for a `3 x H x W` gray image.
    fn predict(&self, image: &Tensor) -> Result<Tensor>;

    /// Gradient with respect to the gray image of `loss_scale` times the
    /// weighted cross-entropy against `labels`.
    fn loss_gradient(&self, image: &Tensor, labels: &[u8], loss_scale: f64) -> Result<Tensor>;
}

/// A trained model in evaluation mode plus the class weights of its loss.
#[derive(Debug, Clone)]
pub struct ModelTarget {
    pub model: Model,
    pub weights: ClassWeights,
}

fn batched(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Contract(format!("expected a 3 x H x W image, got {s:?}")));
    }
    Ok(image.clone().reshape(&[1, s[0], s[1], s[2]])?)
}

impl AttackTarget for ModelTarget {
    fn predict(&self, image: &Tensor) -> Result<Tensor> {
        self.model.predict_seg(&batched(image)?)
    }

    fn loss_gradient(&self, image: &Tensor, labels: &[u8], loss_scale: f64) -> Result<Tensor> {
        let x = batched(image)?;
        let (_, _, h, w) = x.dims4()?;
        let classes = self.model.arch.classes;
        let target = losses::one_hot(labels, 1, classes, h, w)?;
        let tape = Tape::new();
        let bound = self.model.bind(&tape, false);
        let xv = tape.param(x);
        let mut bn = self.model.bn.clone();
        let feats = self.model.encode(&tape, &bound, &mut bn, xv, false)?;
        let probs = self.model.seg_head(&tape, &bound, &feats, ScaleJunction::new(1.0)?)?;
        let loss = losses::weighted_cross_entropy(&tape, probs, &target, &self.weights)?;
        let loss = tape.mul_scalar(loss, loss_scale);
        tape.backward(loss)?;
        let g = tape.grad(xv).expect("input gradient");
        Ok(g.reshape(image.shape())?)
    }
}

pub trait Perturbation: Send + Sync {
    fn name(&self) -> &'static str;

    fn apply(
        &self,
        x: &Tensor,
        labels: &[u8],
        target: &dyn AttackTarget,
        spec: &PerturbationSpec,
    ) -> Result<PerturbedImage>;
}

/// I.i.d. normal noise with standard deviation `eps`, unclipped.
pub struct Gaussian;

impl Perturbation for Gaussian {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn apply(&self, x: &Tensor, _: &[u8], _: &dyn AttackTarget, spec: &PerturbationSpec) -> Result<PerturbedImage> {
        spec.validate()?;
        gaussian(x, spec.eps, spec.seed)
    }
}

pub fn gaussian(x: &Tensor, eps: f64, seed: u64) -> Result<PerturbedImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(x.shape(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        eps * z
    });
    PerturbedImage::from_residual(x, r)
}

/// Pixel fraction whose expected squared change matches `eps^2` on `x`.
///
/// A flipped value `v` moves by `v` or `255 - v` with equal probability, so
/// the expected squared change of one entry is `(v^2 + (255 - v)^2) / 2`.
pub fn salt_pepper_fraction(x: &Tensor, eps: f64) -> f64 {
    let per_value = x.data().iter().map(|&v| (v * v + (255.0 - v) * (255.0 - v)) / 2.0).sum::<f64>() / x.len() as f64;
    if per_value == 0.0 {
        return 0.0;
    }
    (eps * eps / per_value).clamp(0.0, 1.0)
}

/// Whole pixels (all channels) forced to 0 or 255.
pub struct SaltPepper;

impl Perturbation for SaltPepper {
    fn name(&self) -> &'static str {
        "salt_pepper"
    }

    fn apply(&self, x: &Tensor, _: &[u8], _: &dyn AttackTarget, spec: &PerturbationSpec) -> Result<PerturbedImage> {
        spec.validate()?;
        let f = spec.options.fraction.unwrap_or_else(|| salt_pepper_fraction(x, spec.eps));
        salt_pepper(x, f, spec.seed)
    }
}

/// Sets exactly `round(f * H * W)` pixels of a `C x H x W` image to 0 or 255.
/// For a fixed seed the affected pixels for a larger `f` include those for a
/// smaller one.
pub fn salt_pepper(x: &Tensor, f: f64, seed: u64) -> Result<PerturbedImage> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::Config(format!("pixel fraction {f} outside [0, 1]")));
    }
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Contract(format!("expected a C x H x W image, got {s:?}")));
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..hw).collect();
    order.shuffle(&mut rng);
    let salt: Vec<bool> = (0..hw).map(|_| rng.random_bool(0.5)).collect();
    let k = (f * hw as f64).round() as usize;
    let mut r = Tensor::zeros(s);
    for (rank, &p) in order.iter().take(k).enumerate() {
        let value = if salt[rank] { 255.0 } else { 0.0 };
        for ch in 0..c {
            let i = ch * hw + p;
            r.data_mut()[i] = value - x.data()[i];
        }
    }
    PerturbedImage::from_residual(x, r)
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn attack_labels(x: &Tensor, labels: &[u8], target: &dyn AttackTarget, mode: LabelMode) -> Result<Vec<u8>> {
    match mode {
        LabelMode::GroundTruth => {
            if labels.is_empty() {
                return Err(Error::Contract("gradient attacks need labels".into()));
            }
            Ok(labels.to_vec())
        }
        LabelMode::Predicted => argmax_mask(&target.predict(x)?),
    }
}

/// One signed-gradient step of size `eps`.
pub struct Fgsm;

impl Perturbation for Fgsm {
    fn name(&self) -> &'static str {
        "fgsm"
    }

    fn apply(&self, x: &Tensor, labels: &[u8], target: &dyn AttackTarget, spec: &PerturbationSpec) -> Result<PerturbedImage> {
        spec.validate()?;
        let labels = attack_labels(x, labels, target, spec.options.label_mode)?;
        let g = target.loss_gradient(x, &labels, spec.options.loss_scale)?;
        PerturbedImage::from_residual(x, g.map(|v| spec.eps * sign(v)))
    }
}

/// Iterated signed-gradient steps, each projected onto the `eps` ball in the
/// max norm.
pub struct Pgd;

impl Perturbation for Pgd {
    fn name(&self) -> &'static str {
        "pgd"
    }

    fn apply(&self, x: &Tensor, labels: &[u8], target: &dyn AttackTarget, spec: &PerturbationSpec) -> Result<PerturbedImage> {
        spec.validate()?;
        let o = &spec.options;
        let step = o.pgd_step.unwrap_or(spec.eps / 4.0);
        if o.pgd_step.is_some_and(|s| !(s > 0.0)) {
            return Err(Error::Config(format!("PGD step must be positive, got {step}")));
        }
        if o.pgd_iters == 0 {
            return Err(Error::Config("PGD needs at least one iteration".into()));
        }
        let labels = attack_labels(x, labels, target, o.label_mode)?;
        let eps = spec.eps;
        let mut r = Tensor::zeros(x.shape());
        for _ in 0..o.pgd_iters {
            let x_adv = x.zip_map(&r, |a, b| a + b)?;
            let g = target.loss_gradient(&x_adv, &labels, o.loss_scale)?;
            r = r.zip_map(&g, |ri, gi| (ri + step * sign(gi)).clamp(-eps, eps))?;
            if o.clip {
                r = x.zip_map(&r, |xi, ri| (xi + ri).clamp(0.0, 255.0) - xi)?;
            }
        }
        PerturbedImage::from_residual(x, r)
    }
}

/// Perturbation families by name.
pub struct PerturbationRegistry {
    entries: Vec<Box<dyn Perturbation>>,
}

impl PerturbationRegistry {
    pub fn empty() -> Self {
        Self { entries: Vec::new() }
    }

    /// `gaussian`, `salt_pepper`, `fgsm` and `pgd`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        for p in [
            Box::new(Gaussian) as Box<dyn Perturbation>,
            Box::new(SaltPepper),
            Box::new(Fgsm),
            Box::new(Pgd),
        ] {
            r.register(p).expect("builtin names are unique");
        }
        r
    }

    pub fn register(&mut self, p: Box<dyn Perturbation>) -> Result<()> {
        if self.entries.iter().any(|e| e.name() == p.name()) {
            return Err(Error::Config(format!("perturbation {:?} registered twice", p.name())));
        }
        self.entries.push(p);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&dyn Perturbation> {
        self.entries
            .iter()
            .find(|e| e.name() == name)
            .map(|b| b.as_ref())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown perturbation family {name:?} (known: {})",
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name()).collect()
    }
}

impl Default for PerturbationRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
