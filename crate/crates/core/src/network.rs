//! Shared-encoder segmentation/depth model and the pose network.
//!
//! Parameters live in a flat, ordered list of named tensors so the checkpoint
//! layout is just that list. A forward pass binds every parameter to a tape
//! leaf first (see [`Model::bind`]).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use mtl_tensor::{BnStats, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::losses::ClassWeights;

/// Gray-value normalization applied inside the graph: `(x / 255 - MEAN) / STD`.
pub const INPUT_MEAN: f64 = 0.45;
pub const INPUT_STD: f64 = 0.225;
/// Pose network outputs are multiplied by this before use.
pub const POSE_SCALE: f64 = 0.01;

pub const CHECKPOINT_BIN: &str = "checkpoint.bin";
pub const CHECKPOINT_MANIFEST: &str = "checkpoint.manifest";

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub encoder: [usize; 4],
    pub decoder: [usize; 4],
    pub pose: [usize; 4],
    pub classes: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            encoder: [16, 32, 64, 128],
            decoder: [8, 16, 32, 64],
            pose: [16, 32, 64, 64],
            classes: 4,
        }
    }
}

impl Arch {
    fn validate(&self) -> Result<()> {
        let all = self.encoder.iter().chain(&self.decoder).chain(&self.pose);
        if self.classes < 2 || all.into_iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        Ok(())
    }
}

/// Which decoder a junction feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Seg,
    Depth,
}

/// Identity in the forward pass; scales encoder-bound gradients by `lambda`
/// on the segmentation path and `1 - lambda` on the depth path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleJunction {
    lambda: f64,
}

impl ScaleJunction {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn factor(&self, task: Task) -> f64 {
        match task {
            Task::Seg => self.lambda,
            Task::Depth => 1.0 - self.lambda,
        }
    }

    pub fn apply(&self, tape: &Tape, v: Var, task: Task) -> Var {
        tape.scale_grad(v, self.factor(task))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: Arch,
    params: Vec<Param>,
    index: HashMap<String, usize>,
    /// Running statistics of the encoder batch-norm layers.
    pub bn: Vec<BnStats>,
}

/// Tape leaves for every parameter, in [`Model`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Encoder features from finest (`H/2`) to the bottleneck (`H/16`).
pub type Features = Vec<Var>;

struct Builder<'a, R: Rng> {
    params: Vec<Param>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, oc: usize, ic: usize, k: usize, bias: bool) {
        let std = (2.0 / (ic * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Tensor::from_fn(&[oc, ic, k, k], |_| normal.sample(self.rng));
        self.push(format!("{name}.w"), w);
        if bias {
            self.push(format!("{name}.b"), Tensor::zeros(&[oc]));
        }
    }

    fn push(&mut self, name: String, value: Tensor) {
        self.params.push(Param { name, value });
    }
}

impl Model {
    /// He-initialized model. The pose head starts at zero so the initial
    /// pose prediction is the identity.
    pub fn new<R: Rng>(arch: Arch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut b = Builder {
            params: Vec::new(),
            rng,
        };
        let mut ic = 3;
        for (i, &oc) in arch.encoder.iter().enumerate() {
            b.conv(&format!("enc.{i}"), oc, ic, 3, false);
            b.push(format!("enc.{i}.gamma"), Tensor::ones(&[oc]));
            b.push(format!("enc.{i}.beta"), Tensor::zeros(&[oc]));
            ic = oc;
        }
        for head in ["seg", "depth"] {
            let mut ic = arch.encoder[3];
            for i in (0..4).rev() {
                let oc = arch.decoder[i];
                b.conv(&format!("{head}.up{i}.0"), oc, ic, 3, true);
                let skip = if i > 0 { arch.encoder[i - 1] } else { 0 };
                b.conv(&format!("{head}.up{i}.1"), oc, oc + skip, 3, true);
                ic = oc;
            }
        }
        b.conv("seg.out", arch.classes, arch.decoder[0], 3, true);
        for s in 0..4 {
            b.conv(&format!("depth.out{s}"), 1, arch.decoder[s], 3, true);
        }
        let mut ic = 6;
        for (i, &oc) in arch.pose.iter().enumerate() {
            b.conv(&format!("pose.{i}"), oc, ic, 3, true);
            ic = oc;
        }
        b.push("pose.out.w".into(), Tensor::zeros(&[6, ic, 1, 1]));
        b.push("pose.out.b".into(), Tensor::zeros(&[6]));
        let bn = arch.encoder.iter().map(|&c| BnStats::new(c)).collect();
        Ok(Self::from_parts(arch, b.params, bn))
    }

    fn from_parts(arch: Arch, params: Vec<Param>, bn: Vec<BnStats>) -> Self {
        let index = params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Self {
            arch,
            params,
            index,
            bn,
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.value)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn bind(&self, tape: &Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    fn v(&self, bound: &Bound, name: &str) -> Var {
        bound.vars[self.index[name]]
    }

    fn conv(&self, tape: &Tape, bound: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.v(bound, &format!("{name}.w"));
        let b = self.index.get(&format!("{name}.b")).map(|&i| bound.vars[i]);
        let pad = tape.shape(w)[2] / 2;
        Ok(tape.conv2d(x, w, b, stride, pad)?)
    }

    /// `(x / 255 - mean) / std` for gray-value input.
    pub fn normalize(tape: &Tape, gray: Var) -> Var {
        tape.mul_scalar(tape.add_scalar(tape.mul_scalar(gray, 1.0 / 255.0), -INPUT_MEAN), 1.0 / INPUT_STD)
    }

    /// Encoder features of an `N x 3 x H x W` gray-value batch. `H` and `W`
    /// must be multiples of 16. In training mode `bn` is updated.
    pub fn encode(
        &self,
        tape: &Tape,
        bound: &Bound,
        bn: &mut [BnStats],
        gray: Var,
        training: bool,
    ) -> Result<Features> {
        let shape = tape.shape(gray);
        if shape.len() != 4 || shape[1] != 3 || shape[2] % 16 != 0 || shape[3] % 16 != 0 {
            return Err(Error::Contract(format!(
                "encoder input must be N x 3 x H x W with H, W multiples of 16, got {shape:?}"
            )));
        }
        let mut x = Self::normalize(tape, gray);
        let mut feats = Vec::with_capacity(4);
        for (i, stats) in bn.iter_mut().enumerate() {
            let name = format!("enc.{i}");
            let c = self.conv(tape, bound, &name, x, 2)?;
            let gamma = self.v(bound, &format!("{name}.gamma"));
            let beta = self.v(bound, &format!("{name}.beta"));
            x = tape.relu(tape.batch_norm(c, gamma, beta, stats, training)?);
            feats.push(x);
        }
        Ok(feats)
    }

    /// Decoder trunk shared by both heads. Returns the activation at each
    /// level, index 0 being full resolution.
    fn decode(
        &self,
        tape: &Tape,
        bound: &Bound,
        head: &str,
        feats: &[Var],
        junction: ScaleJunction,
        task: Task,
    ) -> Result<Vec<Var>> {
        let feats: Vec<Var> = feats.iter().map(|&f| junction.apply(tape, f, task)).collect();
        let mut x = feats[3];
        let mut levels = vec![x; 4];
        for i in (0..4).rev() {
            x = tape.elu(self.conv(tape, bound, &format!("{head}.up{i}.0"), x, 1)?);
            x = tape.upsample2(x)?;
            if i > 0 {
                x = tape.concat(&[x, feats[i - 1]], 1)?;
            }
            x = tape.elu(self.conv(tape, bound, &format!("{head}.up{i}.1"), x, 1)?);
            levels[i] = x;
        }
        Ok(levels)
    }

    /// Per-pixel class probabilities, `N x S x H x W`.
    pub fn seg_head(
        &self,
        tape: &Tape,
        bound: &Bound,
        feats: &[Var],
        junction: ScaleJunction,
    ) -> Result<Var> {
        let levels = self.decode(tape, bound, "seg", feats, junction, Task::Seg)?;
        let logits = self.conv(tape, bound, "seg.out", levels[0], 1)?;
        Ok(tape.softmax(logits, 1)?)
    }

    /// Sigmoid disparity maps for scales 0..4; scale `s` is `H/2^s x W/2^s`.
    pub fn depth_head(
        &self,
        tape: &Tape,
        bound: &Bound,
        feats: &[Var],
        junction: ScaleJunction,
    ) -> Result<Vec<Var>> {
        let levels = self.decode(tape, bound, "depth", feats, junction, Task::Depth)?;
        (0..4)
            .map(|s| {
                let c = self.conv(tape, bound, &format!("depth.out{s}"), levels[s], 1)?;
                Ok(tape.sigmoid(c))
            })
            .collect()
    }

    /// `N x 6` relative pose `[rx, ry, rz, tx, ty, tz]` from the target frame
    /// to the source frame, both given in gray values. Gradients reaching the
    /// pose network are scaled with the depth path.
    pub fn pose(
        &self,
        tape: &Tape,
        bound: &Bound,
        target: Var,
        source: Var,
        junction: ScaleJunction,
    ) -> Result<Var> {
        let pair = tape.concat(&[Self::normalize(tape, target), Self::normalize(tape, source)], 1)?;
        let mut x = pair;
        for i in 0..4 {
            x = tape.relu(self.conv(tape, bound, &format!("pose.{i}"), x, 2)?);
        }
        let out = self.conv(tape, bound, "pose.out", x, 1)?;
        let mean = tape.mean_axis(tape.mean_axis(out, 3)?, 2)?;
        let n = tape.shape(mean)[0];
        let pose = tape.mul_scalar(tape.reshape(mean, &[n, 6])?, POSE_SCALE);
        Ok(junction.apply(tape, pose, Task::Depth))
    }

    /// Eval-mode class probabilities for a gray-value batch, without
    /// touching the running statistics.
    pub fn predict_seg(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(images.clone());
        let mut bn = self.bn.clone();
        let feats = self.encode(&tape, &bound, &mut bn, x, false)?;
        let probs = self.seg_head(&tape, &bound, &feats, ScaleJunction::new(1.0)?)?;
        Ok((*tape.value(probs)).clone())
    }

    /// Eval-mode full-resolution depth for a gray-value batch.
    pub fn predict_depth(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(images.clone());
        let mut bn = self.bn.clone();
        let feats = self.encode(&tape, &bound, &mut bn, x, false)?;
        let sig = self.depth_head(&tape, &bound, &feats, ScaleJunction::new(0.0)?)?;
        let depth = crate::geometry::disparity_to_depth(&tape, sig[0]);
        Ok((*tape.value(depth)).clone())
    }

    /// Eval-mode pose between two gray-value frames.
    pub fn predict_pose(&self, target: &Tensor, source: &Tensor) -> Result<Vec<Pose>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let (t, s) = (tape.constant(target.clone()), tape.constant(source.clone()));
        let p = self.pose(&tape, &bound, t, s, ScaleJunction::new(0.0)?)?;
        Ok(tape.value(p).data().chunks(6).map(Pose::from_slice).collect())
    }

    /// Writes `checkpoint.bin` (TNSR records: parameters in order, then each
    /// batch-norm layer's running mean and variance, then class weights) and
    /// `checkpoint.manifest` describing the records.
    pub fn save(&self, dir: &Path, weights: &ClassWeights) -> Result<()> {
        let bin = dir.join(CHECKPOINT_BIN);
        let man = dir.join(CHECKPOINT_MANIFEST);
        let mut out = BufWriter::new(File::create(&bin).map_err(|e| Error::io(&bin, e))?);
        let mut text = String::new();
        text.push_str(&format!(
            "arch encoder={} decoder={} pose={} classes={}\n",
            join_dims(&self.arch.encoder),
            join_dims(&self.arch.decoder),
            join_dims(&self.arch.pose),
            self.arch.classes
        ));
        let write = |out: &mut BufWriter<File>, t: &Tensor| {
            t.write_tnsr(out).map_err(|e| Error::io(&bin, e))
        };
        for p in &self.params {
            write(&mut out, &p.value)?;
            text.push_str(&format!("param {} {}\n", p.name, join_dims(p.value.shape())));
        }
        for (i, s) in self.bn.iter().enumerate() {
            let c = s.channels();
            write(&mut out, &Tensor::new(&[c], s.running_mean.clone())?)?;
            write(&mut out, &Tensor::new(&[c], s.running_var.clone())?)?;
            text.push_str(&format!("bn enc.{i} {c}\n"));
        }
        write(
            &mut out,
            &Tensor::new(&[weights.len()], weights.as_slice().to_vec())?,
        )?;
        text.push_str(&format!("class_weights {}\n", weights.len()));
        out.flush().map_err(|e| Error::io(&bin, e))?;
        std::fs::write(&man, text).map_err(|e| Error::io(&man, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, ClassWeights)> {
        let bin = dir.join(CHECKPOINT_BIN);
        let man = dir.join(CHECKPOINT_MANIFEST);
        let text = std::fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
        let mut lines = text.lines();
        let arch = parse_arch(lines.next().unwrap_or(""))
            .ok_or_else(|| Error::parse(&man, 0, "bad arch line"))?;
        let mut input = BufReader::new(File::open(&bin).map_err(|e| Error::io(&bin, e))?);
        let mut offset = 0usize;
        let mut read = |input: &mut BufReader<File>| -> Result<Tensor> {
            let t = Tensor::read_tnsr(input).map_err(|e| Error::parse(&bin, offset, e.to_string()))?;
            offset += t.len() * 4;
            Ok(t)
        };
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut weights = None;
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(' ').collect();
            let bad = || Error::parse(&man, ln + 1, format!("bad record line {line:?}"));
            match f.as_slice() {
                ["param", name, dims] => {
                    let value = read(&mut input)?;
                    if join_dims(value.shape()) != *dims {
                        return Err(Error::parse(&man, ln + 1, format!("{name} has shape {:?}, manifest says {dims}", value.shape())));
                    }
                    params.push(Param {
                        name: name.to_string(),
                        value,
                    });
                }
                ["bn", _, c] => {
                    let c: usize = c.parse().map_err(|_| bad())?;
                    let mut s = BnStats::new(c);
                    s.running_mean = read(&mut input)?.into_data();
                    s.running_var = read(&mut input)?.into_data();
                    bn.push(s);
                }
                ["class_weights", _] => weights = Some(ClassWeights::new(read(&mut input)?.into_data())?),
                _ => return Err(bad()),
            }
        }
        if input.fill_buf().map_err(|e| Error::io(&bin, e))?.len() > 0 {
            return Err(Error::parse(&bin, offset, "trailing bytes"));
        }
        let reference = Model::new(arch.clone(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let shapes_match = reference.params.len() == params.len()
            && reference
                .params
                .iter()
                .zip(&params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
            && bn.len() == 4;
        if !shapes_match {
            return Err(Error::parse(&man, 0, "parameters do not match the architecture"));
        }
        let weights = weights.ok_or_else(|| Error::parse(&man, 0, "missing class weights"))?;
        Ok((Self::from_parts(arch, params, bn), weights))
    }
}

fn parse_arch(line: &str) -> Option<Arch> {
    let mut f = line.split(' ');
    if f.next()? != "arch" {
        return None;
    }
    let mut arch = Arch::default();
    for kv in f {
        let (k, v) = kv.split_once('=')?;
        let list = || -> Option<[usize; 4]> {
            let v: Vec<usize> = v.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
            v.try_into().ok()
        };
        match k {
            "encoder" => arch.encoder = list()?,
            "decoder" => arch.decoder = list()?,
            "pose" => arch.pose = list()?,
            "classes" => arch.classes = v.parse().ok()?,
            _ => return None,
        }
    }
    Some(arch)
}

fn join_dims(v: &[usize]) -> String {
    v.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

