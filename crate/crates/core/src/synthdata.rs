//! Procedural ray-cast scenes with exact depth, labels and camera motion.
//!
//! Camera coordinates are x right, y down, z forward. A scene is a ground
//! plane, a distant backdrop wall (the "sky" class) and floating boxes and
//! balls. Textures are solid value noise evaluated at world positions, so a
//! surface point has the same color in every frame.
//!
//! On disk a dataset is a directory holding `index.csv` and three
//! subdirectories: `images/` (binary PPM), `labels/` (binary PGM) and
//! `depth/` (`DMAP <H> <W>\n` followed by little-endian f32 rows).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mtl_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{mat_mul, mat_vec, rodrigues, transpose, Intrinsics, Mat3, Pose};
use crate::trainer::{FrameTriplet, LabeledImage, TrainData};

pub const CLASS_GROUND: u8 = 0;
pub const CLASS_SKY: u8 = 1;
pub const CLASS_BOX: u8 = 2;
pub const CLASS_BALL: u8 = 3;
pub const CLASS_NAMES: [&str; 4] = ["ground", "sky", "box", "ball"];

const GROUND_Y: f64 = 1.5;
const BACKDROP_Z: f64 = 40.0;
/// Gap between object bottoms and the ground, so that every object outline
/// is a depth discontinuity.
const HOVER: f64 = 0.3;
const LIGHT: [f64; 3] = [-0.4, -0.8, -0.45];

pub const INDEX_FILE: &str = "index.csv";
pub const INDEX_HEADER: &str = "triplet,frame,split,image,label,depth,fx,fy,cx,cy,rx,ry,rz,tx,ty,tz";

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Noise cycles per scene unit.
    pub texture_frequency: f64,
    /// Scales camera travel and rotation between frames; 0 gives a static camera.
    pub motion: f64,
    /// Train/val/test fractions; the test split takes the remainder.
    pub ratios: [f64; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            width: 128,
            height: 96,
            classes: 4,
            min_objects: 3,
            max_objects: 7,
            texture_frequency: 0.8,
            motion: 1.0,
            ratios: [0.7, 0.15],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 16",
                self.width, self.height
            )));
        }
        if self.classes != CLASS_NAMES.len() {
            return Err(Error::Config(format!("the renderer draws {} classes", CLASS_NAMES.len())));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        let [tr, va] = self.ratios;
        if tr < 0.0 || va < 0.0 || tr + va > 1.0 {
            return Err(Error::Config(format!("bad split ratios {:?}", self.ratios)));
        }
        if !(self.motion >= 0.0 && self.texture_frequency > 0.0) {
            return Err(Error::Config("motion must be >= 0 and frequency > 0".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let f = 0.7 * self.width as f64;
        Intrinsics {
            fx: f,
            fy: f,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Split sizes by the floor rule; the test split takes the remainder.
pub fn split_sizes(count: usize, ratios: [f64; 2]) -> [usize; 3] {
    let train = (count as f64 * ratios[0]).floor() as usize;
    let val = ((count as f64 * ratios[1]).floor() as usize).min(count - train);
    [train, val, count - train - val]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    /// `3 x H x W` gray values in `0..=255`.
    pub image: Tensor,
    pub labels: Vec<u8>,
    /// `1 x H x W` z-depth, f32-representable.
    pub depth: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletRecord {
    pub id: usize,
    pub split: Split,
    /// Frames `t-1, t, t+1`.
    pub frames: [Frame; 3],
    pub intrinsics: Intrinsics,
    /// Pose from the center frame to each frame (identity for the center).
    pub poses: [Pose; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub triplets: Vec<TripletRecord>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Box { min: [f64; 3], max: [f64; 3] },
    Ball { center: [f64; 3], radius: f64 },
}

#[derive(Debug, Clone, Copy)]
struct Object {
    shape: Shape,
    color: [f64; 3],
}

#[derive(Debug, Clone)]
struct Scene {
    objects: Vec<Object>,
    noise_seed: u64,
    frequency: f64,
}

/// Camera-to-world rotation and center.
#[derive(Debug, Clone, Copy)]
struct Camera {
    rotation: Mat3,
    center: [f64; 3],
}

struct Hit {
    t: f64,
    class: u8,
    point: [f64; 3],
    normal: [f64; 3],
    color: [f64; 3],
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn add_scaled(a: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + d[0] * t, a[1] + d[1] * t, a[2] + d[2] * t]
}

fn hash3(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v as u64;
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 29;
    }
    h = h.wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 32;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in `[0, 1)` with smoothstep fade.
fn value_noise(seed: u64, p: [f64; 3]) -> f64 {
    let base = p.map(|v| v.floor());
    let f = [p[0] - base[0], p[1] - base[1], p[2] - base[2]].map(|t| t * t * (3.0 - 2.0 * t));
    let b = base.map(|v| v as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let o = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let w: f64 = (0..3)
            .map(|k| if o[k] == 1 { f[k] } else { 1.0 - f[k] })
            .product();
        acc += w * hash3(seed, b[0] + o[0] as i64, b[1] + o[1] as i64, b[2] + o[2] as i64);
    }
    acc
}

impl Scene {
    fn random<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Self {
        let count = rng.random_range(spec.min_objects..=spec.max_objects);
        let mut objects = Vec::with_capacity(count);
        for _ in 0..count {
            let z = rng.random_range(4.0..25.0);
            let x = rng.random_range(-0.45..0.45) * z;
            let color = [
                rng.random_range(0.15..0.95),
                rng.random_range(0.15..0.95),
                rng.random_range(0.15..0.95),
            ];
            let shape = if rng.random_bool(0.5) {
                let half = [
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.3..0.9),
                    rng.random_range(0.3..1.0),
                ];
                let bottom = GROUND_Y - HOVER;
                Shape::Box {
                    min: [x - half[0], bottom - 2.0 * half[1], z - half[2]],
                    max: [x + half[0], bottom, z + half[2]],
                }
            } else {
                let radius = rng.random_range(0.3..0.9);
                Shape::Ball {
                    center: [x, GROUND_Y - HOVER - radius, z],
                    radius,
                }
            };
            objects.push(Object { shape, color });
        }
        Self {
            objects,
            noise_seed: rng.random(),
            frequency: spec.texture_frequency,
        }
    }

    fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        self.objects.iter().any(|o| match o.shape {
            Shape::Box { min, max } => (0..3).all(|k| p[k] > min[k] - margin && p[k] < max[k] + margin),
            Shape::Ball { center, radius } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                dot(d, d).sqrt() < radius + margin
            }
        })
    }

    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Hit {
        let mut best = Hit {
            t: f64::INFINITY,
            class: CLASS_SKY,
            point: o,
            normal: [0.0, 0.0, -1.0],
            color: [0.55, 0.7, 0.9],
        };
        if d[2] > 0.0 {
            best.t = (BACKDROP_Z - o[2]) / d[2];
        }
        if d[1] > 0.0 {
            let t = (GROUND_Y - o[1]) / d[1];
            if t < best.t {
                best = Hit {
                    t,
                    class: CLASS_GROUND,
                    point: o,
                    normal: [0.0, -1.0, 0.0],
                    color: [0.5, 0.42, 0.32],
                };
            }
        }
        for obj in &self.objects {
            let hit = match obj.shape {
                Shape::Box { min, max } => {
                    let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
                    let mut sign = 1.0;
                    for k in 0..3 {
                        if d[k].abs() < 1e-12 {
                            if o[k] < min[k] || o[k] > max[k] {
                                t0 = f64::INFINITY;
                            }
                            continue;
                        }
                        let (a, b) = ((min[k] - o[k]) / d[k], (max[k] - o[k]) / d[k]);
                        let (near, far) = if a < b { (a, b) } else { (b, a) };
                        if near > t0 {
                            t0 = near;
                            axis = k;
                            sign = if d[k] > 0.0 { -1.0 } else { 1.0 };
                        }
                        t1 = t1.min(far);
                    }
                    (t0 <= t1 && t0 > 0.0).then(|| {
                        let mut n = [0.0; 3];
                        n[axis] = sign;
                        (t0, n, CLASS_BOX)
                    })
                }
                Shape::Ball { center, radius } => {
                    let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
                    let (a, b, c) = (dot(d, d), dot(oc, d), dot(oc, oc) - radius * radius);
                    let disc = b * b - a * c;
                    (disc >= 0.0).then(|| (-b - disc.sqrt()) / a).filter(|&t| t > 0.0).map(|t| {
                        let p = add_scaled(o, d, t);
                        let n = [
                            (p[0] - center[0]) / radius,
                            (p[1] - center[1]) / radius,
                            (p[2] - center[2]) / radius,
                        ];
                        (t, n, CLASS_BALL)
                    })
                }
            };
            if let Some((t, normal, class)) = hit {
                if t < best.t {
                    best = Hit {
                        t,
                        class,
                        point: o,
                        normal,
                        color: obj.color,
                    };
                }
            }
        }
        best.point = add_scaled(o, d, best.t);
        best
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let l = {
            let n = dot(LIGHT, LIGHT).sqrt();
            LIGHT.map(|v| v / n)
        };
        let lambert = if hit.class == CLASS_SKY {
            1.0
        } else {
            0.55 + 0.45 * dot(hit.normal, l).max(0.0)
        };
        let p = hit.point.map(|v| v * self.frequency);
        let n = 0.65 * value_noise(self.noise_seed, p)
            + 0.35 * value_noise(self.noise_seed ^ 0xA5A5, p.map(|v| v * 2.0));
        let tex = 0.6 + 0.8 * n;
        hit.color.map(|c| (c * lambert * tex).clamp(0.0, 1.0))
    }

    fn render(&self, cam: &Camera, spec: &SceneSpec) -> Frame {
        let (w, h) = (spec.width, spec.height);
        let k = spec.intrinsics();
        let mut image = vec![0.0; 3 * h * w];
        let mut labels = vec![0u8; h * w];
        let mut depth = vec![0.0; h * w];
        let ray = |u: f64, v: f64| mat_vec(&cam.rotation, [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0]);
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                let center = self.intersect(cam.center, ray(u as f64, v as f64));
                labels[i] = center.class;
                depth[i] = center.t as f32 as f64;
                let mut rgb = [0.0; 3];
                for (du, dv) in [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)] {
                    let hit = self.intersect(cam.center, ray(u as f64 + du, v as f64 + dv));
                    let c = self.shade(&hit);
                    for ch in 0..3 {
                        rgb[ch] += c[ch] / 4.0;
                    }
                }
                for ch in 0..3 {
                    image[ch * h * w + i] = (rgb[ch] * 255.0).round();
                }
            }
        }
        Frame {
            image: Tensor::new(&[3, h, w], image).expect("image shape"),
            labels,
            depth: Tensor::new(&[1, h, w], depth).expect("depth shape"),
        }
    }
}

fn yaw_pitch(yaw: f64, pitch: f64) -> Mat3 {
    mat_mul(&rodrigues([0.0, yaw, 0.0]), &rodrigues([pitch, 0.0, 0.0]))
}

fn camera_path<R: Rng>(rng: &mut R, motion: f64) -> [Camera; 3] {
    let base = yaw_pitch(rng.random_range(-0.08..0.08), rng.random_range(-0.03..0.03));
    let speed = rng.random_range(0.6..1.2) * motion;
    let dyaw = rng.random_range(-0.03..0.03) * motion;
    let dpitch = rng.random_range(-0.01..0.01) * motion;
    let drift = rng.random_range(-0.4..0.4) * motion;
    let forward = mat_vec(&base, [drift, 0.0, 1.0]);
    [-1.0, 0.0, 1.0].map(|s: f64| Camera {
        rotation: mat_mul(&base, &yaw_pitch(s * dyaw, s * dpitch)),
        center: forward.map(|f| f * s * speed),
    })
}

/// Pose taking points from camera `from` into camera `to`.
fn relative_pose(from: &Camera, to: &Camera) -> Pose {
    let rt = transpose(&to.rotation);
    let r = mat_mul(&rt, &from.rotation);
    let dc = [
        from.center[0] - to.center[0],
        from.center[1] - to.center[1],
        from.center[2] - to.center[2],
    ];
    Pose::from_rotation(&r, mat_vec(&rt, dc))
}

fn render_triplet(spec: &SceneSpec, id: usize, split: Split) -> TripletRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(id as u64 + 1);
    let scene = Scene::random(spec, &mut rng);
    let cams = loop {
        let cams = camera_path(&mut rng, spec.motion);
        if cams.iter().all(|c| !scene.contains(c.center, 0.5)) {
            break cams;
        }
    };
    TripletRecord {
        id,
        split,
        frames: cams.map(|c| scene.render(&c, spec)),
        intrinsics: spec.intrinsics(),
        poses: cams.map(|c| relative_pose(&cams[1], &c)),
    }
}

impl Dataset {
    /// Renders `count` independent triplets in parallel. Output depends only
    /// on `spec`, not on the thread count.
    pub fn generate(spec: &SceneSpec, count: usize) -> Result<Self> {
        spec.validate()?;
        let [train, val, _] = split_sizes(count, spec.ratios);
        let split = |i: usize| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        };
        let triplets = (0..count)
            .into_par_iter()
            .map(|i| render_triplet(spec, i, split(i)))
            .collect();
        Ok(Self {
            width: spec.width,
            height: spec.height,
            classes: spec.classes,
            triplets,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TripletRecord> {
        self.triplets.iter().filter(move |t| t.split == split)
    }

    /// Center frames of `split` as the labelled pool and its triplets as the
    /// unlabelled depth pool.
    pub fn train_data(&self, split: Split) -> TrainData {
        TrainData {
            labeled: self.labeled(split),
            triplets: self
                .split(split)
                .map(|t| FrameTriplet {
                    frames: t.frames.clone().map(|f| f.image),
                    intrinsics: t.intrinsics,
                })
                .collect(),
            classes: self.classes,
        }
    }

    /// Center frames of `split` with their labels.
    pub fn labeled(&self, split: Split) -> Vec<LabeledImage> {
        self.split(split)
            .map(|t| LabeledImage {
                image: t.frames[1].image.clone(),
                labels: t.frames[1].labels.clone(),
            })
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels", "depth"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut index = String::from(INDEX_HEADER);
        index.push('\n');
        for t in &self.triplets {
            for (j, f) in t.frames.iter().enumerate() {
                let stem = format!("{:06}_{j}", t.id);
                let (img, lab, dep) = (
                    format!("images/{stem}.ppm"),
                    format!("labels/{stem}.pgm"),
                    format!("depth/{stem}.dmap"),
                );
                write_file(&dir.join(&img), &encode_ppm(&f.image)?)?;
                write_file(&dir.join(&lab), &encode_pgm(&f.labels, self.width, self.height))?;
                write_file(&dir.join(&dep), &encode_dmap(&f.depth)?)?;
                let k = t.intrinsics;
                let p = t.poses[j].to_array();
                let _ = write!(
                    index,
                    "{},{},{},{img},{lab},{dep},{},{},{},{}",
                    t.id,
                    j as i64 - 1,
                    t.split.as_str(),
                    k.fx,
                    k.fy,
                    k.cx,
                    k.cy
                );
                for v in p {
                    let _ = write!(index, ",{v:e}");
                }
                index.push('\n');
            }
        }
        write_file(&dir.join(INDEX_FILE), index.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(INDEX_HEADER) {
            return Err(Error::parse(&index_path, 0, "unexpected index header"));
        }
        let mut triplets: Vec<TripletRecord> = Vec::new();
        let mut pending: Vec<(Frame, Pose)> = Vec::new();
        let mut size: Option<(usize, usize)> = None;
        let mut offset = INDEX_HEADER.len() + 1;
        for (ln, line) in lines.enumerate() {
            let bad = |d: &str| Error::parse(&index_path, offset, format!("line {}: {d}", ln + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 16 {
                return Err(bad("expected 16 fields"));
            }
            let id: usize = f[0].parse().map_err(|_| bad("bad triplet id"))?;
            let frame: i64 = f[1].parse().map_err(|_| bad("bad frame"))?;
            if frame != pending.len() as i64 - 1 {
                return Err(bad("frames out of order"));
            }
            let split: Split = f[2].parse().map_err(|_| bad("bad split"))?;
            let nums: Vec<f64> = f[6..]
                .iter()
                .map(|s| s.parse().map_err(|_| bad("bad number")))
                .collect::<Result<_>>()?;
            let image = decode_ppm(&dir.join(f[3]))?;
            let (_, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
            if *size.get_or_insert((h, w)) != (h, w) {
                return Err(bad("mixed image sizes"));
            }
            let labels = decode_pgm(&dir.join(f[4]), w, h)?;
            let depth = decode_dmap(&dir.join(f[5]), w, h)?;
            pending.push((
                Frame {
                    image,
                    labels,
                    depth,
                },
                Pose::from_slice(&nums[4..10]),
            ));
            if pending.len() == 3 {
                let k = Intrinsics::new(nums[0], nums[1], nums[2], nums[3])?;
                let mut it = std::mem::take(&mut pending).into_iter();
                let (a, b, c) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                triplets.push(TripletRecord {
                    id,
                    split,
                    poses: [a.1, b.1, c.1],
                    frames: [a.0, b.0, c.0],
                    intrinsics: k,
                });
            }
            offset += line.len() + 1;
        }
        if !pending.is_empty() {
            return Err(Error::parse(&index_path, offset, "incomplete triplet at end of index"));
        }
        let (height, width) = size.unwrap_or((0, 0));
        Ok(Self {
            width,
            height,
            classes: CLASS_NAMES.len(),
            triplets,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for ch in 0..3 {
            let v = d[ch * h * w + i];
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(Error::Contract(format!("gray value {v} is not a byte")));
            }
            out.push(v as u8);
        }
    }
    Ok(out)
}

fn encode_pgm(labels: &[u8], w: usize, h: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    out
}

fn encode_dmap(depth: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = (depth.shape()[1], depth.shape()[2]);
    let mut out = format!("DMAP {h} {w}\n").into_bytes();
    for &v in depth.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a netpbm header (`magic width height maxval`, then one whitespace
/// byte) and returns the dimensions and the payload offset.
fn netpbm_header(path: &Path, bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize)> {
    if !bytes.starts_with(magic) {
        return Err(Error::parse(path, 0, format!("expected {} magic", String::from_utf8_lossy(magic))));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, start, "bad header number"))?;
    }
    if fields[2] != 255 {
        return Err(Error::parse(path, pos, format!("maxval {} unsupported", fields[2])));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(path, pos, "missing separator after header"));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn decode_ppm(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let (w, h, start) = netpbm_header(path, &bytes, b"P6")?;
    let body = &bytes[start..];
    if body.len() != 3 * w * h {
        return Err(Error::parse(path, start, format!("expected {} payload bytes, found {}", 3 * w * h, body.len())));
    }
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        for ch in 0..3 {
            data[ch * h * w + i] = body[3 * i + ch] as f64;
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

pub fn decode_pgm(path: &Path, w: usize, h: usize) -> Result<Vec<u8>> {
    let bytes = read_file(path)?;
    let (fw, fh, start) = netpbm_header(path, &bytes, b"P5")?;
    if (fw, fh) != (w, h) {
        return Err(Error::parse(path, 0, format!("size {fw}x{fh}, expected {w}x{h}")));
    }
    let body = &bytes[start..];
    if body.len() != w * h {
        return Err(Error::parse(path, start, "payload length mismatch"));
    }
    Ok(body.to_vec())
}

pub fn decode_dmap(path: &Path, w: usize, h: usize) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(path, 0, "missing DMAP header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse(path, 0, "header is not UTF-8"))?;
    let f: Vec<&str> = header.split(' ').collect();
    let dims = match f.as_slice() {
        ["DMAP", hh, ww] => hh.parse::<usize>().ok().zip(ww.parse::<usize>().ok()),
        _ => None,
    };
    if dims != Some((h, w)) {
        return Err(Error::parse(path, 0, format!("bad DMAP header {header:?} for {h}x{w}")));
    }
    let body = &bytes[nl + 1..];
    if body.len() != 4 * w * h {
        return Err(Error::parse(path, nl + 1, "payload length mismatch"));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(&[1, h, w], data)?)
}

/// Paths of every file a dataset directory holds, index first.
pub fn dataset_files(dir: &Path, data: &Dataset) -> Vec<PathBuf> {
    let mut out = vec![dir.join(INDEX_FILE)];
    for t in &data.triplets {
        for j in 0..3 {
            let stem = format!("{:06}_{j}", t.id);
            out.push(dir.join(format!("images/{stem}.ppm")));
            out.push(dir.join(format!("labels/{stem}.pgm")));
            out.push(dir.join(format!("depth/{stem}.dmap")));
        }
    }
    out
}
