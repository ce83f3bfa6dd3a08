//! `seqtrace`: generate data, train, evaluate, infer, ablate and recover.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqtrace::config::RunConfig;
use seqtrace::Error;

#[derive(Parser)]
#[command(name = "seqtrace", version, about = "Sequential manipulation detection experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value file; flags given on the command line win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// standard or compact.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Worker threads (also SEQTRACE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: manifest plus PNG images.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        /// Six proportions for lengths 0..=5.
        #[arg(long, value_name = "P0,..,P5")]
        length_dist: Option<String>,
        #[arg(long)]
        quality_threshold: Option<f64>,
    },
    /// Train a model on the train split, selecting on the val split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// seqfakeformer or multi_cls.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// off, basic or multi.
        #[arg(long)]
        seca: Option<String>,
        #[arg(long)]
        no_autoregressive: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on one split and print both metrics.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: Option<String>,
        /// JSON-lines prediction report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Per-type and per-length breakdown as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Predict the manipulation sequence of one image.
    Infer {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train the four decoder configurations and tabulate test accuracy.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Undo manipulations in inverse order and measure the distance to the
    /// original faces.
    Recover {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "predicted")]
        mode: commands::RecoverMode,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, Error> {
    let mut config = RunConfig::default();
    if let Ok(v) = std::env::var("SEQTRACE_THREADS") {
        config.set("threads", &v)?;
    }
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    for o in &common.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        config.set(k.trim(), v.trim())?;
    }
    let shared = [
        ("seed", common.seed.map(|s| s.to_string())),
        ("preset", common.preset.clone()),
        ("threads", common.threads.map(|t| t.to_string())),
    ];
    for (k, v) in shared.iter().chain(flags) {
        if let Some(v) = v {
            config.set(k, v)?;
        }
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    let s = |v: Option<usize>| v.map(|v| v.to_string());
    let flags: Vec<(&str, Option<String>)> = match &cli.command {
        Command::Generate {
            n,
            length_dist,
            quality_threshold,
            ..
        } => vec![
            ("n", s(*n)),
            ("length_dist", length_dist.clone()),
            ("quality_threshold", quality_threshold.map(|q| q.to_string())),
        ],
        Command::Train {
            model,
            seca,
            no_autoregressive,
            epochs,
            ..
        } => vec![
            ("model", model.clone()),
            ("seca", seca.clone()),
            ("autoregressive", no_autoregressive.then(|| "off".to_string())),
            ("epochs", s(*epochs)),
        ],
        Command::Eval { split, .. } => vec![("split", split.clone())],
        Command::Ablate { seeds, epochs, .. } => vec![("seeds", s(*seeds)), ("epochs", s(*epochs))],
        Command::Infer { .. } | Command::Recover { .. } => vec![],
    };
    let config = resolve(&cli.common, &flags)?;
    if let Some(n) = config.threads {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match cli.command {
        Command::Generate { out, .. } => commands::generate(&config, &out),
        Command::Train { data, out, .. } => commands::train(&config, &data, &out),
        Command::Eval {
            data, ckpt, report, csv, ..
        } => commands::eval(&config, &data, &ckpt, report.as_deref(), csv.as_deref()),
        Command::Infer { image, ckpt } => commands::infer(&image, &ckpt),
        Command::Ablate { data, out, .. } => commands::ablate(&config, &data, &out),
        Command::Recover { data, report, out, mode } => commands::recover(&data, &report, &out, mode),
    }
}

/// 2 for I/O and configuration problems, 3 for incompatible artifacts,
/// 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Config(_) | Error::Manifest(_) | Error::Json(_) | Error::Image(_) | Error::Vocabulary(_) => 2,
        Error::Compat(_) => 3,
        Error::Dimension { .. } | Error::Contract(_) | Error::Numeric(_) => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqtrace: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
