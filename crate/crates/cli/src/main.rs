//! `hyperlat` command-line entry point.
//!
//! Exit codes: 0 success, 2 usage or validation, 3 missing artifact,
//! 4 numeric failure.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use hyperlat::{Error, Result};

use commands::Ctx;
use config::{
    Command, DatasetSpec, EvalConfig, Mode, RunConfig, SimKind, SimulateConfig, TrainCommandConfig,
    VisualizeConfig, FORMAT_VERSION,
};

#[derive(Parser, Debug)]
#[command(name = "hyperlat", version, about = "Hyperspherical latent-space simulations and VAE anomaly detection")]
struct Cli {
    /// Saved run configuration; flags given alongside override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Leave the generation time out of SVG files.
    #[arg(long, global = true)]
    no_timestamp: bool,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Monte-Carlo and closed-form geometry reports.
    Simulate(SimulateArgs),
    /// Train a VAE and write its checkpoint.
    Train(TrainArgs),
    /// Score a test set by k-NN in latent space.
    Eval(EvalArgs),
    /// Project latent means onto a 3D sphere.
    Visualize(VisualizeArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    kind: Option<SimKind>,
    /// Comma-separated dimensions.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    samples: Option<usize>,
    /// Slice width for `--kind slice`.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum DatasetKind {
    Unsup,
    Ood,
    Csv,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// LossSpec JSON; replaces `--mode` and `--latent-dim`.
    #[arg(long)]
    loss_spec: Option<PathBuf>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    anomaly_shift: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Training CSV for `--dataset csv`.
    #[arg(long)]
    train: Option<PathBuf>,
    /// The CSV has no label column.
    #[arg(long)]
    no_labels: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    roll_spacing: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    /// Labelled test CSV; label 0 is normal.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// The train CSV has no label column.
    #[arg(long)]
    train_no_labels: bool,
}

#[derive(Args, Debug)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    no_labels: bool,
}

fn missing_flag(flag: &str) -> Error {
    Error::Config {
        field: flag.into(),
        reason: "required".into(),
    }
}

fn not_applicable(flag: &str, kind: &str) -> Error {
    Error::Config {
        field: flag.into(),
        reason: format!("does not apply to the {kind} dataset"),
    }
}

fn merge_simulate(base: Option<SimulateConfig>, a: SimulateArgs) -> Result<SimulateConfig> {
    let mut c = match (base, a.kind) {
        (Some(mut c), Some(kind)) => {
            c.kind = kind;
            c
        }
        (Some(c), None) => c,
        (None, Some(kind)) => SimulateConfig::new(kind),
        (None, None) => return Err(missing_flag("--kind")),
    };
    if let Some(d) = a.dims {
        c.dims = d;
    }
    if let Some(s) = a.samples {
        c.samples = s;
    }
    if let Some(e) = a.eps {
        c.eps = e;
    }
    Ok(c)
}

fn merge_dataset(base: DatasetSpec, a: &TrainArgs) -> Result<DatasetSpec> {
    let mut ds = match a.dataset {
        None => base,
        Some(DatasetKind::Unsup) => match base {
            b @ DatasetSpec::Unsup { .. } => b,
            _ => DatasetSpec::default(),
        },
        Some(DatasetKind::Ood) => match base {
            b @ DatasetSpec::Ood { .. } => b,
            _ => DatasetSpec::Ood {
                d: 32,
                classes: 4,
                offset: 0.5,
                n_train: 2000,
                n_test: 400,
                intrinsic: None,
                cluster_std: None,
            },
        },
        Some(DatasetKind::Csv) => match base {
            b @ DatasetSpec::Csv { .. } => b,
            _ => DatasetSpec::Csv {
                train: a.train.clone().ok_or_else(|| missing_flag("--train"))?,
                labels: true,
            },
        },
    };
    match &mut ds {
        DatasetSpec::Unsup {
            d,
            clusters,
            anomaly_shift,
            n_train,
            n_test,
            ..
        } => {
            for (flag, set) in [("--classes", a.classes.is_some()), ("--offset", a.offset.is_some()), ("--train", a.train.is_some()), ("--no-labels", a.no_labels)] {
                if set {
                    return Err(not_applicable(flag, "unsup"));
                }
            }
            *d = a.d.unwrap_or(*d);
            *clusters = a.clusters.unwrap_or(*clusters);
            *anomaly_shift = a.anomaly_shift.unwrap_or(*anomaly_shift);
            *n_train = a.n_train.unwrap_or(*n_train);
            *n_test = a.n_test.unwrap_or(*n_test);
        }
        DatasetSpec::Ood {
            d,
            classes,
            offset,
            n_train,
            n_test,
            ..
        } => {
            for (flag, set) in [("--clusters", a.clusters.is_some()), ("--anomaly-shift", a.anomaly_shift.is_some()), ("--train", a.train.is_some()), ("--no-labels", a.no_labels)] {
                if set {
                    return Err(not_applicable(flag, "ood"));
                }
            }
            *d = a.d.unwrap_or(*d);
            *classes = a.classes.unwrap_or(*classes);
            *offset = a.offset.unwrap_or(*offset);
            *n_train = a.n_train.unwrap_or(*n_train);
            *n_test = a.n_test.unwrap_or(*n_test);
        }
        DatasetSpec::Csv { train, labels, .. } => {
            let generated = [
                ("--d", a.d.is_some()),
                ("--clusters", a.clusters.is_some()),
                ("--anomaly-shift", a.anomaly_shift.is_some()),
                ("--classes", a.classes.is_some()),
                ("--offset", a.offset.is_some()),
                ("--n-train", a.n_train.is_some()),
                ("--n-test", a.n_test.is_some()),
            ];
            if let Some((flag, _)) = generated.iter().find(|f| f.1) {
                return Err(not_applicable(flag, "csv"));
            }
            if let Some(t) = &a.train {
                *train = t.clone();
            }
            if a.no_labels {
                *labels = false;
            }
        }
    }
    Ok(ds)
}

fn merge_train(base: Option<TrainCommandConfig>, a: TrainArgs) -> Result<TrainCommandConfig> {
    let mut c = base.unwrap_or_default();
    c.dataset = merge_dataset(c.dataset.clone(), &a)?;
    if let Some(m) = a.mode {
        c.mode = m;
    }
    if let Some(p) = a.loss_spec {
        c.loss_spec = Some(p);
    }
    if let Some(n) = a.latent_dim {
        c.latent_dim = n;
    }
    if let Some(e) = a.epochs {
        c.epochs = e;
    }
    if let Some(b) = a.batch_size {
        c.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        c.learning_rate = lr;
    }
    if let Some(h) = a.hidden {
        c.hidden = h;
    }
    if a.roll_spacing.is_some() {
        c.roll_spacing = a.roll_spacing;
    }
    Ok(c)
}

fn merge_eval(base: Option<EvalConfig>, a: EvalArgs) -> Result<EvalConfig> {
    let pick = |flag: Option<PathBuf>, base: Option<&PathBuf>, name: &str| {
        flag.or_else(|| base.cloned()).ok_or_else(|| missing_flag(name))
    };
    let b = base.as_ref();
    Ok(EvalConfig {
        checkpoint: pick(a.checkpoint, b.map(|b| &b.checkpoint), "--checkpoint")?,
        train: pick(a.train, b.map(|b| &b.train), "--train")?,
        test: pick(a.test, b.map(|b| &b.test), "--test")?,
        k: a.k.or(b.map(|b| b.k)).unwrap_or(hyperlat::anomaly::DEFAULT_K),
        train_labels: !a.train_no_labels && b.is_none_or(|b| b.train_labels),
    })
}

fn merge_visualize(base: Option<VisualizeConfig>, a: VisualizeArgs) -> Result<VisualizeConfig> {
    let b = base.as_ref();
    Ok(VisualizeConfig {
        checkpoint: a
            .checkpoint
            .or_else(|| b.map(|b| b.checkpoint.clone()))
            .ok_or_else(|| missing_flag("--checkpoint"))?,
        data: a
            .data
            .or_else(|| b.map(|b| b.data.clone()))
            .ok_or_else(|| missing_flag("--data"))?,
        labels: !a.no_labels && b.is_none_or(|b| b.labels),
    })
}

fn build(cli: Cli) -> Result<(RunConfig, bool)> {
    let base = cli.config.as_deref().map(RunConfig::load).transpose()?;
    let (base_cmd, base_seed, base_out) = match base {
        Some(r) => (Some(r.command), Some(r.seed), Some(r.out)),
        None => (None, None, None),
    };
    let requested = match &cli.command {
        Sub::Simulate(_) => "simulate",
        Sub::Train(_) => "train",
        Sub::Eval(_) => "eval",
        Sub::Visualize(_) => "visualize",
    };
    if let Some(c) = &base_cmd {
        if c.name() != requested {
            return Err(Error::Config {
                field: "command".into(),
                reason: format!("config is for `{}`, invoked `{requested}`", c.name()),
            });
        }
    }
    let command = match (cli.command, base_cmd) {
        (Sub::Simulate(a), b) => Command::Simulate(merge_simulate(
            b.and_then(|c| match c {
                Command::Simulate(s) => Some(s),
                _ => None,
            }),
            a,
        )?),
        (Sub::Train(a), b) => Command::Train(merge_train(
            b.and_then(|c| match c {
                Command::Train(s) => Some(s),
                _ => None,
            }),
            a,
        )?),
        (Sub::Eval(a), b) => Command::Eval(merge_eval(
            b.and_then(|c| match c {
                Command::Eval(s) => Some(s),
                _ => None,
            }),
            a,
        )?),
        (Sub::Visualize(a), b) => Command::Visualize(merge_visualize(
            b.and_then(|c| match c {
                Command::Visualize(s) => Some(s),
                _ => None,
            }),
            a,
        )?),
    };
    let run = RunConfig {
        format_version: FORMAT_VERSION,
        seed: cli.seed.or(base_seed).unwrap_or(0),
        out: cli.out.or(base_out).unwrap_or_else(|| PathBuf::from("out")),
        command,
    };
    Ok((run, !cli.no_timestamp))
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("HYPERLAT_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config {
            field: "HYPERLAT_THREADS".into(),
            reason: format!("{value:?} is not a positive integer"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config {
            field: "HYPERLAT_THREADS".into(),
            reason: e.to_string(),
        })
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let (run, timestamp) = build(cli)?;
    commands::ensure_dir(&run.out)?;
    let ctx = Ctx {
        out: run.out.clone(),
        seed: run.seed,
        timestamp: timestamp.then(|| {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format!("at unix time {secs}")
        }),
    };
    std::fs::write(run.out.join("run_config.json"), run.to_json() + "\n")?;
    let written = match &run.command {
        Command::Simulate(c) => commands::simulate(c, &ctx)?,
        Command::Train(c) => commands::train(c, &ctx)?,
        Command::Eval(c) => commands::eval(c, &ctx)?,
        Command::Visualize(c) => commands::visualize(c, &ctx)?,
    };
    for path in written {
        commands::say(format!("wrote {}", path.display()));
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. }
        | Error::Parse { .. }
        | Error::Json(_)
        | Error::Dimension(_)
        | Error::Precondition(_)
        | Error::Format(_) => 2,
        Error::Missing(_) | Error::Io(_) => 3,
        Error::NonFinite { .. } | Error::Domain(_) => 4,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_contract() {
        assert_eq!(exit_code(&Error::Missing("x".into())), 3);
        assert_eq!(exit_code(&Error::Domain("x".into())), 4);
        assert_eq!(
            exit_code(&Error::NonFinite {
                term: "t".into(),
                epoch: 1
            }),
            4
        );
        assert_eq!(exit_code(&Error::Precondition("x".into())), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn flags_override_dataset_fields() {
        let cli = Cli::parse_from(["hyperlat", "train", "--dataset", "ood", "--classes", "5", "--seed", "9"]);
        let (run, ts) = build(cli).unwrap();
        assert!(ts);
        assert_eq!(run.seed, 9);
        let Command::Train(t) = run.command else { panic!() };
        assert!(matches!(t.dataset, DatasetSpec::Ood { classes: 5, d: 32, .. }));
    }

    #[test]
    fn mismatched_flags_are_rejected() {
        let cli = Cli::parse_from(["hyperlat", "train", "--classes", "5"]);
        assert!(matches!(build(cli), Err(Error::Config { .. })));
    }
}
