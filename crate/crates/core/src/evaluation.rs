//! Segmentation scoring and the perturbation sweep.

use std::fmt::Write as _;

use mtl_tensor::Tensor;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::IGNORE_LABEL;
use crate::perturb::{self, AttackTarget, PerturbationRegistry, PerturbationSpec};
use crate::trainer::LabeledImage;

/// The strengths swept by default, in gray values.
pub const DEFAULT_EPS_GRID: [f64; 7] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0];
pub const SWEEP_CSV_HEADER: &str = "family,eps_requested,eps_measured,snr,miou_clean,miou_adv,q";

/// Per-pixel argmax of `N x S x H x W` probabilities; ties go to the lowest
/// class index. Returns `N * H * W` labels.
pub fn argmax_mask(probs: &Tensor) -> Result<Vec<u8>> {
    let (n, s, h, w) = probs.dims4()?;
    if s > 255 {
        return Err(Error::Contract(format!("{s} classes do not fit a byte mask")));
    }
    let d = probs.data();
    let mut out = Vec::with_capacity(n * h * w);
    for b in 0..n {
        for p in 0..h * w {
            let mut best = 0;
            let mut best_v = d[b * s * h * w + p];
            for c in 1..s {
                let v = d[(b * s + c) * h * w + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Pixels counted so far (ignored labels excluded).
    pub pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            pixels: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds one prediction/truth pair. Truth pixels labelled
    /// [`IGNORE_LABEL`] are skipped.
    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Tensor(mtl_tensor::TensorError::Shape {
                op: "accumulate",
                detail: format!("{} predictions for {} labels", pred.len(), truth.len()),
            }));
        }
        let s = self.classes();
        for (&p, &t) in pred.iter().zip(truth) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= s || t >= s {
                return Err(Error::Contract(format!("label {} with {s} classes", p.max(t))));
            }
            if p == t {
                self.tp[t] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[t] += 1;
            }
            self.pixels += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for c in 0..self.classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.pixels += other.pixels;
    }
}

/// Mean over classes of `TP / (TP + FP + FN)`; classes with an empty
/// denominator are left out of the mean.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.pixels == 0 {
        return Err(Error::Contract("mIoU of an empty confusion matrix".into()));
    }
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..cm.classes() {
        let den = cm.tp[c] + cm.fp[c] + cm.fn_[c];
        if den > 0 {
            sum += cm.tp[c] as f64 / den as f64;
            present += 1;
        }
    }
    Ok(sum / present as f64)
}

pub fn q_ratio(miou_adv: f64, miou_clean: f64) -> Result<f64> {
    if !(miou_clean > 0.0) {
        return Err(Error::Contract(format!("clean mIoU must be positive, got {miou_clean}")));
    }
    Ok(miou_adv / miou_clean)
}

/// mIoU of always predicting the most frequent class.
pub fn majority_baseline(images: &[LabeledImage], classes: usize) -> Result<f64> {
    let mut hist = vec![0u64; classes];
    for im in images {
        for &l in &im.labels {
            if l != IGNORE_LABEL {
                hist[l as usize] += 1;
            }
        }
    }
    let major = (0..classes).max_by_key(|&c| (hist[c], std::cmp::Reverse(c))).unwrap_or(0) as u8;
    let mut cm = ConfusionMatrix::new(classes);
    for im in images {
        cm.accumulate(&vec![major; im.labels.len()], &im.labels)?;
    }
    miou(&cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub eps_requested: f64,
    pub eps_measured: f64,
    pub snr: f64,
    pub miou_adv: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub family: String,
    pub miou_clean: f64,
    /// The first row is the clean pass at strength 0.
    pub rows: Vec<SweepRow>,
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.9}")
    }
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(SWEEP_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                self.family,
                r.eps_requested,
                fmt_f(r.eps_measured),
                fmt_f(r.snr),
                fmt_f(self.miou_clean),
                fmt_f(r.miou_adv),
                fmt_f(r.q)
            );
        }
        s
    }

    pub fn q_at(&self, eps: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.eps_requested == eps).map(|r| r.q)
    }
}

/// Parses a sweep CSV back into `(family, eps_requested, q)` points.
pub fn parse_sweep_csv(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(SWEEP_CSV_HEADER) {
        return Err(Error::Contract("not a sweep CSV (header mismatch)".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Contract(format!("bad number {s:?} in {l:?}")))
            };
            if f.len() != 7 {
                return Err(Error::Contract(format!("bad sweep row {l:?}")));
            }
            Ok((f[0].to_string(), num(f[1])?, num(f[6])?))
        })
        .collect()
}

/// Options of a sweep beyond the family and grid.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub seed: u64,
    /// Worker threads; 1 runs in the calling thread.
    pub jobs: usize,
    pub extra: perturb::Options,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            extra: perturb::Options::default(),
        }
    }
}

struct ImageOutcome {
    cm: ConfusionMatrix,
    sum_r2: f64,
    sum_x2: f64,
    values: usize,
}

fn evaluate_images<M: AttackTarget + Sync>(
    model: &M,
    images: &[LabeledImage],
    classes: usize,
    perturbation: Option<(&dyn perturb::Perturbation, f64)>,
    opts: &SweepOptions,
) -> Result<ImageOutcome> {
    let one = |(i, im): (usize, &LabeledImage)| -> Result<ImageOutcome> {
        let (x_adv, r2) = match perturbation {
            None => (im.image.clone(), 0.0),
            Some((p, eps)) => {
                let spec = PerturbationSpec {
                    eps,
                    seed: perturb::image_seed(opts.seed, i),
                    options: opts.extra.clone(),
                };
                let out = p.apply(&im.image, &im.labels, model, &spec)?;
                let r2 = out.residual.data().iter().map(|v| v * v).sum();
                (out.x_adv, r2)
            }
        };
        let probs = model.predict(&x_adv)?;
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&argmax_mask(&probs)?, &im.labels)?;
        Ok(ImageOutcome {
            cm,
            sum_r2: r2,
            sum_x2: im.image.data().iter().map(|v| v * v).sum(),
            values: im.image.len(),
        })
    };
    let outcomes: Vec<ImageOutcome> = if opts.jobs <= 1 {
        images.iter().enumerate().map(one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| images.par_iter().enumerate().map(one).collect::<Result<_>>())?
    };
    // Merge in image order so results do not depend on scheduling.
    let mut total = ImageOutcome {
        cm: ConfusionMatrix::new(classes),
        sum_r2: 0.0,
        sum_x2: 0.0,
        values: 0,
    };
    for o in &outcomes {
        total.cm.merge(&o.cm);
        total.sum_r2 += o.sum_r2;
        total.sum_x2 += o.sum_x2;
        total.values += o.values;
    }
    Ok(total)
}

/// Confusion counts of the unperturbed images, pooled over the set.
pub fn clean_confusion<M: AttackTarget + Sync>(
    model: &M,
    images: &[LabeledImage],
    classes: usize,
    jobs: usize,
) -> Result<ConfusionMatrix> {
    let opts = SweepOptions {
        jobs,
        ..SweepOptions::default()
    };
    Ok(evaluate_images(model, images, classes, None, &opts)?.cm)
}

/// IoU of one class, `None` when the class never occurs in prediction or truth.
pub fn class_iou(cm: &ConfusionMatrix, class: usize) -> Option<f64> {
    let den = cm.tp[class] + cm.fp[class] + cm.fn_[class];
    (den > 0).then(|| cm.tp[class] as f64 / den as f64)
}

/// Clean pass, then one pass per strength: every image is perturbed,
/// confusion counts are pooled over the whole set, and strength and SNR are
/// measured over the whole set.
pub fn run_sweep<M: AttackTarget + Sync>(
    model: &M,
    images: &[LabeledImage],
    classes: usize,
    family: &str,
    grid: &[f64],
    registry: &PerturbationRegistry,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    if images.is_empty() {
        return Err(Error::Contract("sweep over an empty image set".into()));
    }
    let p = registry.get(family)?;
    let clean = evaluate_images(model, images, classes, None, opts)?;
    let miou_clean = miou(&clean.cm)?;
    let mut rows = vec![SweepRow {
        eps_requested: 0.0,
        eps_measured: 0.0,
        snr: f64::INFINITY,
        miou_adv: miou_clean,
        q: 1.0,
    }];
    for &eps in grid {
        let out = evaluate_images(model, images, classes, Some((p, eps)), opts)?;
        let miou_adv = miou(&out.cm)?;
        rows.push(SweepRow {
            eps_requested: eps,
            eps_measured: (out.sum_r2 / out.values as f64).sqrt(),
            snr: if out.sum_r2 == 0.0 {
                f64::INFINITY
            } else {
                out.sum_x2 / out.sum_r2
            },
            miou_adv,
            q: q_ratio(miou_adv, miou_clean)?,
        });
    }
    Ok(SweepResult {
        family: family.to_string(),
        miou_clean,
        rows,
    })
}

/// One SVG line plot of `Q` against strength (log axis), one curve per
/// labelled series. Zero strengths are drawn at the left edge.
pub fn render_svg(series: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let positive: Vec<f64> = points.iter().map(|p| p.0).filter(|&e| e > 0.0).collect();
    if positive.is_empty() {
        return Err(Error::Contract("nothing to plot".into()));
    }
    let lo = positive.iter().copied().fold(f64::INFINITY, f64::min).log2().floor() - 0.5;
    let hi = positive.iter().copied().fold(0.0, f64::max).log2().ceil() + 0.5;
    let (w, h, m) = (640.0, 420.0, 60.0);
    let qmax = points.iter().map(|p| p.1).fold(1.0, f64::max);
    let sx = |e: f64| {
        let l = if e > 0.0 { e.log2() } else { lo };
        m + (l - lo) / (hi - lo) * (w - 2.0 * m)
    };
    let sy = |q: f64| h - m - q / qmax * (h - 2.0 * m);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{m},{} V{} H{}" fill="none" stroke="black"/>"#,
        m,
        h - m,
        w - m
    );
    let mut e = lo.ceil();
    while e <= hi {
        let x = sx(e.exp2());
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
            h - m,
            h - m + 5.0,
            h - m + 20.0,
            e.exp2()
        );
        e += 1.0;
    }
    for i in 0..=4 {
        let q = qmax * i as f64 / 4.0;
        let y = sy(q);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.1}" x2="{m}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{q:.2}</text>"#,
            m - 5.0,
            m - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epsilon (gray values, log scale)</text>"#,
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">Q = mIoU_adv / mIoU_clean</text>"#,
        h / 2.0,
        h / 2.0
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        let mut sorted = pts.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = sorted
            .iter()
            .map(|&(e, q)| format!("{:.1},{:.1}", sx(e), sy(q)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="curve" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        let ly = m + 18.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            w - m - 150.0,
            w - m - 130.0,
            w - m - 125.0,
            ly + 4.0,
            xml_escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_examples() {
        let one_hot = Tensor::new(&[1, 3, 1, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(argmax_mask(&one_hot).unwrap(), vec![2, 1]);
        let uniform = Tensor::full(&[2, 4, 3, 3], 0.25);
        assert!(argmax_mask(&uniform).unwrap().iter().all(|&c| c == 0));
    }

    #[test]
    fn two_pixel_confusion_example() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0], &[0, 1]).unwrap();
        assert_eq!((cm.tp[0], cm.fp[0], cm.fn_[1]), (1, 1, 1));
        assert_eq!(miou(&cm).unwrap(), 0.25);
        assert!(cm.accumulate(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn perfect_prediction_and_empty_matrix() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(miou(&cm).unwrap(), 1.0);
        assert!(cm.fp.iter().chain(&cm.fn_).all(|&v| v == 0));
        assert!(miou(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn ignored_labels_are_skipped() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 0], &[IGNORE_LABEL, 0]).unwrap();
        assert_eq!(cm.pixels, 1);
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn q_examples() {
        assert_eq!(q_ratio(0.5, 0.5).unwrap(), 1.0);
        assert_eq!(q_ratio(0.0, 0.7).unwrap(), 0.0);
        assert!((q_ratio(0.11684, 0.635).unwrap() - 0.184).abs() < 1e-12);
        assert!(q_ratio(0.3, 0.0).is_err());
    }

    #[test]
    fn svg_has_one_curve_per_series() {
        let svg = render_svg(&[
            ("a".into(), vec![(0.0, 1.0), (1.0, 0.9), (16.0, 0.2)]),
            ("b".into(), vec![(0.0, 1.0), (0.25, 0.95), (16.0, 0.5)]),
        ])
        .unwrap();
        assert_eq!(svg.matches("class=\"curve\"").count(), 2);
        assert!(svg.starts_with("<svg"));
    }
}
