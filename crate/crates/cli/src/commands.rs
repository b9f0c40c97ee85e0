//! Subcommand bodies. Each takes fully resolved settings, so a manifest's
//! `config.*` section is enough to run it again.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mtl_core::evaluation::{self, SweepOptions};
use mtl_core::losses::LossReport;
use mtl_core::network::{Arch, Model, CHECKPOINT_BIN, CHECKPOINT_MANIFEST};
use mtl_core::perturb::{LabelMode, ModelTarget, PerturbationRegistry};
use mtl_core::synthdata::{self, Dataset, SceneSpec, Split};
use mtl_core::trainer::{self, TrainConfig, TrainMode};

use crate::manifest::{self, RunManifest};
use crate::settings::{self, parse_auto, parse_list, parse_value, Schema, Settings};
use crate::CliError;

pub const GEN_DATA: Schema = &[
    ("seed", Some("0")),
    ("count", None),
    ("out", None),
    ("width", Some("128")),
    ("height", Some("96")),
    ("min_objects", Some("3")),
    ("max_objects", Some("7")),
    ("texture_frequency", Some("0.8")),
    ("motion", Some("1")),
    ("train_ratio", Some("0.7")),
    ("val_ratio", Some("0.15")),
];

pub const TRAIN: Schema = &[
    ("data", None),
    ("out", None),
    ("split", Some("train")),
    ("mode", Some("multi")),
    ("lambda", Some("0.2")),
    ("lr", Some("0.0001")),
    ("decayed_lr", Some("0.00001")),
    ("epochs", Some("8")),
    ("decay_epoch", Some("auto")),
    ("seg_batch", Some("6")),
    ("depth_batch", Some("6")),
    ("seed", Some("0")),
    ("scales", Some("4")),
    ("beta", Some("0.001")),
    ("flip", Some("true")),
    ("brightness", Some("0.2")),
    ("contrast", Some("0.2")),
    ("encoder", Some("16,32,64,128")),
    ("decoder", Some("8,16,32,64")),
    ("pose", Some("16,32,64,64")),
];

pub const SWEEP: Schema = &[
    ("family", None),
    ("eps_grid", Some("0.25,0.5,1,2,4,8,16")),
    ("checkpoint", None),
    ("data", None),
    ("out", None),
    ("split", Some("val")),
    ("jobs", Some("1")),
    ("clip", Some("false")),
    ("labels", Some("truth")),
    ("seed", Some("0")),
    ("pgd_iters", Some("10")),
    ("pgd_step", Some("auto")),
    ("limit", Some("0")),
];

pub const EVALUATE: Schema = &[
    ("checkpoint", None),
    ("data", None),
    ("out", None),
    ("split", Some("val")),
    ("jobs", Some("1")),
    ("limit", Some("0")),
];

pub const REPORT: Schema = &[("inputs", None), ("out", None)];

pub fn schema(command: &str) -> Result<Schema> {
    Ok(match command {
        "gen-data" => GEN_DATA,
        "train" => TRAIN,
        "attack-sweep" => SWEEP,
        "evaluate" => EVALUATE,
        "report" => REPORT,
        _ => return Err(CliError::Usage(format!("unknown command {command:?}")).into()),
    })
}

fn path(s: &Settings, key: &str) -> Result<PathBuf> {
    Ok(PathBuf::from(settings::get(s, key)?))
}

fn arch_widths(s: &Settings, key: &str) -> Result<[usize; 4]> {
    let v: Vec<usize> = parse_list(s, key)?;
    v.try_into()
        .map_err(|v: Vec<usize>| CliError::Usage(format!("{key} needs 4 widths, got {}", v.len())).into())
}

pub fn scene_spec(s: &Settings) -> Result<SceneSpec> {
    Ok(SceneSpec {
        seed: parse_value(s, "seed")?,
        width: parse_value(s, "width")?,
        height: parse_value(s, "height")?,
        min_objects: parse_value(s, "min_objects")?,
        max_objects: parse_value(s, "max_objects")?,
        texture_frequency: parse_value(s, "texture_frequency")?,
        motion: parse_value(s, "motion")?,
        ratios: [parse_value(s, "train_ratio")?, parse_value(s, "val_ratio")?],
        ..SceneSpec::default()
    })
}

pub fn train_config(s: &Settings, classes: usize) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        mode: parse_value::<TrainMode>(s, "mode")?,
        lambda: parse_value(s, "lambda")?,
        lr: parse_value(s, "lr")?,
        decayed_lr: parse_value(s, "decayed_lr")?,
        epochs: parse_value(s, "epochs")?,
        decay_epoch: parse_auto(s, "decay_epoch")?,
        seg_batch: parse_value(s, "seg_batch")?,
        depth_batch: parse_value(s, "depth_batch")?,
        seed: parse_value(s, "seed")?,
        scales: parse_value(s, "scales")?,
        beta: parse_value(s, "beta")?,
        flip: parse_value(s, "flip")?,
        brightness: parse_value(s, "brightness")?,
        contrast: parse_value(s, "contrast")?,
        arch: Arch {
            encoder: arch_widths(s, "encoder")?,
            decoder: arch_widths(s, "decoder")?,
            pose: arch_widths(s, "pose")?,
            classes,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_digest(dir: &Path, data: &Dataset) -> Result<String> {
    manifest::sha256_files(dir, &synthdata::dataset_files(dir, data))
}

fn checkpoint_digest(dir: &Path) -> Result<String> {
    manifest::sha256_files(dir, &[dir.join(CHECKPOINT_MANIFEST), dir.join(CHECKPOINT_BIN)])
}

fn load_images(s: &Settings) -> Result<(Dataset, Vec<trainer::LabeledImage>)> {
    let dir = path(s, "data")?;
    let data = Dataset::read(&dir)?;
    let split: Split = parse_value(s, "split")?;
    let mut images = data.labeled(split);
    let limit: usize = parse_value(s, "limit")?;
    if limit > 0 {
        images.truncate(limit);
    }
    if images.is_empty() {
        return Err(CliError::Usage(format!("split {} of {} holds no images", split.as_str(), dir.display())).into());
    }
    Ok((data, images))
}

/// Digests of every input a command reads, keyed by setting name.
pub fn input_digests(command: &str, s: &Settings) -> Result<Settings> {
    let mut out = Settings::new();
    match command {
        "gen-data" => {}
        "train" => {
            let dir = path(s, "data")?;
            out.insert("data".into(), dataset_digest(&dir, &Dataset::read(&dir)?)?);
        }
        "attack-sweep" | "evaluate" => {
            let dir = path(s, "data")?;
            out.insert("data".into(), dataset_digest(&dir, &Dataset::read(&dir)?)?);
            out.insert("checkpoint".into(), checkpoint_digest(&path(s, "checkpoint")?)?);
        }
        "report" => {
            for (i, p) in report_inputs(s)?.iter().enumerate() {
                out.insert(format!("inputs.{i}"), manifest::sha256_file(p)?);
            }
        }
        _ => return Err(CliError::Usage(format!("unknown command {command:?}")).into()),
    }
    Ok(out)
}

/// Runs `command` with resolved settings and writes its manifest.
pub fn execute(command: &str, s: &Settings) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, s.clone());
    m.inputs = input_digests(command, s)?;
    let out = path(s, "out")?;
    let is_dir = match command {
        "gen-data" => {
            gen_data(s, &mut m)?;
            true
        }
        "train" => {
            train(s, &mut m)?;
            true
        }
        "attack-sweep" => {
            attack_sweep(s, &mut m)?;
            false
        }
        "evaluate" => {
            evaluate(s)?;
            false
        }
        "report" => {
            report(s)?;
            false
        }
        _ => return Err(CliError::Usage(format!("unknown command {command:?}")).into()),
    };
    if !is_dir {
        m.outputs.insert("file".into(), manifest::sha256_file(&out)?);
    }
    m.write(&manifest::manifest_path(&out, is_dir))?;
    Ok(m)
}

fn gen_data(s: &Settings, m: &mut RunManifest) -> Result<()> {
    let spec = scene_spec(s)?;
    let count: usize = parse_value(s, "count")?;
    if count == 0 {
        return Err(CliError::Usage("count must be positive".into()).into());
    }
    let out = path(s, "out")?;
    let data = Dataset::generate(&spec, count)?;
    data.write(&out)?;
    m.seeds.insert("scene".into(), spec.seed.to_string());
    m.outputs.insert("dataset".into(), dataset_digest(&out, &data)?);
    println!("wrote {count} triplets to {}", out.display());
    Ok(())
}

fn train(s: &Settings, m: &mut RunManifest) -> Result<()> {
    let dir = path(s, "data")?;
    let data = Dataset::read(&dir)?;
    let split: Split = parse_value(s, "split")?;
    let td = data.train_data(split);
    let cfg = train_config(s, data.classes)?;
    let out = path(s, "out")?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut log = String::from(LossReport::CSV_HEADER);
    log.push('\n');
    let mut epoch_ce = (0usize, 0.0, 0usize);
    let outcome = trainer::train(&cfg, &td, |step| {
        log.push_str(&step.report.csv_row(step.epoch, step.step));
        log.push('\n');
        if step.epoch != epoch_ce.0 {
            eprintln!("epoch {}: mean j_ce {:.4}", epoch_ce.0, epoch_ce.1 / epoch_ce.2.max(1) as f64);
            epoch_ce = (step.epoch, 0.0, 0);
        }
        epoch_ce.1 += step.report.j_ce;
        epoch_ce.2 += 1;
    })?;
    eprintln!("epoch {}: mean j_ce {:.4}", epoch_ce.0, epoch_ce.1 / epoch_ce.2.max(1) as f64);
    outcome.model.save(&out, &outcome.class_weights)?;
    let log_path = out.join("train_log.csv");
    std::fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
    m.seeds.insert("base".into(), cfg.seed.to_string());
    m.seeds.insert("streams".into(), "init=1,seg=2,depth=3".into());
    m.outputs.insert("train_log.csv".into(), manifest::sha256_file(&log_path)?);
    m.outputs.insert("checkpoint".into(), checkpoint_digest(&out)?);
    println!("trained {} steps; checkpoint in {}", outcome.log.len(), out.display());
    Ok(())
}

fn attack_sweep(s: &Settings, m: &mut RunManifest) -> Result<()> {
    let (model, weights) = Model::load(&path(s, "checkpoint")?)?;
    let (data, images) = load_images(s)?;
    if data.classes != model.arch.classes {
        return Err(CliError::Invariant(format!(
            "checkpoint predicts {} classes, data has {}",
            model.arch.classes, data.classes
        ))
        .into());
    }
    let grid: Vec<f64> = parse_list(s, "eps_grid")?;
    let mut opts = SweepOptions {
        seed: parse_value(s, "seed")?,
        jobs: parse_value(s, "jobs")?,
        ..SweepOptions::default()
    };
    opts.extra.clip = parse_value(s, "clip")?;
    opts.extra.label_mode = parse_value::<LabelMode>(s, "labels")?;
    opts.extra.pgd_iters = parse_value(s, "pgd_iters")?;
    opts.extra.pgd_step = parse_auto(s, "pgd_step")?;
    let family = settings::get(s, "family")?;
    let registry = PerturbationRegistry::with_builtins();
    let target = ModelTarget { model, weights };
    let result = evaluation::run_sweep(&target, &images, data.classes, family, &grid, &registry, &opts)?;
    let out = path(s, "out")?;
    write_text(&out, &result.to_csv())?;
    m.seeds.insert("sweep".into(), opts.seed.to_string());
    println!("{family}: clean mIoU {:.4}, {} rows -> {}", result.miou_clean, result.rows.len(), out.display());
    Ok(())
}

pub const EVALUATE_HEADER: &str = "split,images,miou,majority_baseline";

fn evaluate(s: &Settings) -> Result<()> {
    let (model, weights) = Model::load(&path(s, "checkpoint")?)?;
    let (data, images) = load_images(s)?;
    let classes = data.classes;
    let target = ModelTarget { model, weights };
    let cm = evaluation::clean_confusion(&target, &images, classes, parse_value(s, "jobs")?)?;
    let miou = evaluation::miou(&cm)?;
    let baseline = evaluation::majority_baseline(&images, classes)?;
    let mut csv = String::from(EVALUATE_HEADER);
    for c in 0..classes {
        let _ = write!(csv, ",iou_{c}");
    }
    let _ = write!(csv, "\n{},{},{miou:.9},{baseline:.9}", settings::get(s, "split")?, images.len());
    for c in 0..classes {
        csv.push(',');
        if let Some(v) = evaluation::class_iou(&cm, c) {
            let _ = write!(csv, "{v:.9}");
        }
    }
    csv.push('\n');
    let out = path(s, "out")?;
    write_text(&out, &csv)?;
    println!("mIoU {miou:.4} (majority baseline {baseline:.4})");
    Ok(())
}

fn report_inputs(s: &Settings) -> Result<Vec<PathBuf>> {
    Ok(settings::get(s, "inputs")?.split(',').map(PathBuf::from).collect())
}

fn report(s: &Settings) -> Result<()> {
    let inputs = report_inputs(s)?;
    let mut series = Vec::new();
    for p in &inputs {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let points = evaluation::parse_sweep_csv(&text).with_context(|| p.display().to_string())?;
        let family = points.first().map(|p| p.0.clone()).unwrap_or_default();
        series.push((family, points.into_iter().map(|(_, e, q)| (e, q)).collect::<Vec<_>>()));
    }
    // Disambiguate repeated families by file name.
    for i in 0..series.len() {
        if series.iter().filter(|s| s.0 == series[i].0).count() > 1 {
            let stem = inputs[i].file_stem().unwrap_or_default().to_string_lossy().into_owned();
            series[i].0 = format!("{} ({stem})", series[i].0);
        }
    }
    let svg = evaluation::render_svg(&series)?;
    let out = path(s, "out")?;
    write_text(&out, &svg)?;
    println!("{} curves -> {}", series.len(), out.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Re-runs a manifest. Inputs must still hash to the recorded digests.
pub fn replay(manifest_path: &Path, out: Option<&Path>) -> Result<RunManifest> {
    let recorded = RunManifest::read(manifest_path)?;
    let schema = schema(&recorded.command)?;
    let mut s = recorded.config.clone();
    for key in s.keys() {
        if !schema.iter().any(|(k, _)| k == key) {
            return Err(CliError::Usage(format!("manifest setting {key:?} unknown to {}", recorded.command)).into());
        }
    }
    if let Some(o) = out {
        s.insert("out".into(), o.display().to_string());
    }
    let now = input_digests(&recorded.command, &s)?;
    if now != recorded.inputs {
        return Err(CliError::Invariant(format!(
            "inputs of {} changed since the recorded run",
            manifest_path.display()
        ))
        .into());
    }
    execute(&recorded.command, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_default_grid_is_the_standard_grid() {
        let s: Settings = SWEEP.iter().filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string()))).collect();
        let grid: Vec<f64> = parse_list(&s, "eps_grid").unwrap();
        assert_eq!(grid, evaluation::DEFAULT_EPS_GRID);
    }

    #[test]
    fn train_defaults_match_the_library() {
        let s: Settings = TRAIN.iter().filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string()))).collect();
        assert_eq!(train_config(&s, 4).unwrap(), TrainConfig::default());
    }
}
