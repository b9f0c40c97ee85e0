//! Command-line driver: synthetic data, training, perturbation sweeps and
//! plots. Every run leaves a manifest that `replay` can re-execute.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod manifest;
pub mod settings;

use settings::Settings;

/// Failures with a dedicated exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invariant(String),
}

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "robust-mtl", version, about = "Multi-task segmentation/depth training and robustness sweeps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic triplet dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Measure mIoU ratio over a grid of perturbation strengths.
    AttackSweep(SweepArgs),
    /// Clean mIoU against the majority-class baseline.
    Evaluate(EvaluateArgs),
    /// Plot sweep CSVs into one SVG.
    Report(ReportArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Args, Debug, Default)]
pub struct Common {
    /// `key = value` settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = settings::parse_assignment)]
    pub set: Vec<(String, String)>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// `multi` or `single`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// gaussian, salt_pepper, fgsm or pgd.
    #[arg(long)]
    pub family: Option<String>,
    /// Comma-separated strengths in gray values.
    #[arg(long)]
    pub eps_grid: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Keep PGD images inside the gray range.
    #[arg(long)]
    pub clip: bool,
    /// `truth` or `predicted`.
    #[arg(long)]
    pub labels: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pgd_iters: Option<usize>,
    #[arg(long)]
    pub pgd_step: Option<f64>,
    /// Use at most this many images (0 = all).
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Sweep CSVs, one curve each.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write outputs here instead of the recorded location.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Default)]
struct Flags(Settings);

impl Flags {
    fn put(&mut self, key: &str, v: Option<impl ToString>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.to_string(), v.to_string());
        }
        self
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) -> &mut Self {
        self.put(key, v.as_ref().map(|p| p.display().to_string()))
    }
}

fn resolve(command: &str, common: &Common, flags: Flags) -> anyhow::Result<Settings> {
    let file = common.config.as_deref().map(settings::read).transpose()?;
    // `--set` sits at flag level; dedicated flags win over it.
    let mut merged: Settings = common.set.iter().cloned().collect();
    merged.extend(flags.0);
    settings::resolve(
        commands::schema(command)?,
        settings::Layers {
            file: file.as_ref(),
            flags: &merged,
            env_seed: settings::env_seed(),
        },
    )
}

/// Resolved settings for a parsed command line (`None` for `replay`).
pub fn resolved_settings(command: &Command) -> anyhow::Result<Option<(&'static str, Settings)>> {
    let mut f = Flags::default();
    let (name, common) = match command {
        Command::GenData(a) => {
            f.put("seed", a.seed).put("count", a.count).put("width", a.width).put("height", a.height);
            f.path("out", &a.out);
            ("gen-data", &a.common)
        }
        Command::Train(a) => {
            f.path("data", &a.data).path("out", &a.out);
            f.put("split", a.split.as_ref()).put("mode", a.mode.as_ref());
            f.put("lambda", a.lambda).put("epochs", a.epochs).put("seed", a.seed);
            ("train", &a.common)
        }
        Command::AttackSweep(a) => {
            f.put("family", a.family.as_ref()).put("eps_grid", a.eps_grid.as_ref());
            f.path("checkpoint", &a.checkpoint).path("data", &a.data).path("out", &a.out);
            f.put("split", a.split.as_ref()).put("jobs", a.jobs).put("labels", a.labels.as_ref());
            f.put("seed", a.seed).put("pgd_iters", a.pgd_iters).put("pgd_step", a.pgd_step);
            f.put("limit", a.limit).put("clip", a.clip.then_some(true));
            ("attack-sweep", &a.common)
        }
        Command::Evaluate(a) => {
            f.path("checkpoint", &a.checkpoint).path("data", &a.data).path("out", &a.out);
            f.put("split", a.split.as_ref()).put("jobs", a.jobs).put("limit", a.limit);
            ("evaluate", &a.common)
        }
        Command::Report(a) => {
            let names: Vec<String> = a.inputs.iter().map(|p| p.display().to_string()).collect();
            if names.iter().any(|n| n.contains(',')) {
                return Err(CliError::Usage("report inputs must not contain commas".into()).into());
            }
            f.put("inputs", Some(names.join(","))).path("out", &Some(a.out.clone()));
            return Ok(Some(("report", resolve("report", &Common::default(), f)?)));
        }
        Command::Replay(_) => return Ok(None),
    };
    Ok(Some((name, resolve(name, common, f)?)))
}

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Replay(a) => {
            commands::replay(&a.manifest, a.out.as_deref())?;
        }
        other => {
            let (name, s) = resolved_settings(other)?.expect("non-replay command");
            commands::execute(name, &s)?;
        }
    }
    Ok(())
}

/// Exit code for an error: usage problems 2, violated invariants 3, anything
/// else 1.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Invariant(_) => EXIT_INVARIANT,
            };
        }
        if let Some(e) = cause.downcast_ref::<mtl_core::Error>() {
            return match e {
                mtl_core::Error::Config(_) => EXIT_USAGE,
                mtl_core::Error::Contract(_) | mtl_core::Error::NonFinite { .. } | mtl_core::Error::Tensor(_) => {
                    EXIT_INVARIANT
                }
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

fn kind(code: i32) -> &'static str {
    match code {
        EXIT_USAGE => "usage",
        EXIT_INVARIANT => "invariant",
        _ => "failure",
    }
}

/// One line: `robust-mtl: error[<kind>]: <message>`.
pub fn error_line(err: &anyhow::Error) -> String {
    let msg = format!("{err:#}").replace(['\n', '\r'], " ");
    format!("robust-mtl: error[{}]: {msg}", kind(exit_code(err)))
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let mut lines = rendered.lines();
            let first = lines.next().unwrap_or("invalid arguments");
            let first = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("robust-mtl: error[usage]: {first}");
            for l in lines {
                eprintln!("{l}");
            }
            return EXIT_USAGE;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}
