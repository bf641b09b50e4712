use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod plot;
mod sweep;

#[derive(Parser)]
#[command(name = "wilson", version, about = "Incremental segmentation from image-level labels")]
struct Cli {
    /// Output root; overrides the `output` key of the run config.
    #[arg(long, global = true, env = "WILSON_OUT")]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Run configuration: defaults < file < `--set` overrides.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `train.alpha=0.25`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset with dense masks.
    Synth {
        #[arg(long, default_value_t = 250)]
        n_images: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        max_objects: usize,
        /// Dataset directory; defaults to `<out-root>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split a manifest into train and validation manifests.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        /// Number of validation records.
        #[arg(long)]
        val: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for train.tsv and val.tsv; defaults to the manifest's.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train step `t`: dense base training at 0, weak incremental training after.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        step: usize,
        /// Checkpoint of step t-1; defaults to `<out-root>/step_<t-1>/checkpoint.bin`.
        #[arg(long)]
        prev: Option<PathBuf>,
        /// Train once per alpha in {0, 0.25, 0.5, 0.75, 1}.
        #[arg(long)]
        alpha_sweep: bool,
    },
    /// Decoder-only evaluation of a checkpoint on a manifest with masks.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Where to write the TOML report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write the pseudo-supervision of an incremental checkpoint.
    PseudoDump {
        #[command(flatten)]
        config: ConfigArgs,
        /// Step-t checkpoint with a localizer.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Step t-1 checkpoint acting as the frozen model.
        #[arg(long)]
        prev: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dump at most this many records.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Render loss curves, alpha-sweep curves and per-class bars as SVG.
    Plot {
        /// Logs (`.csv`), reports or sweeps (`.toml`), or directories of them.
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Command failure with its exit code.
pub enum Failure {
    Usage(String),
    Lib(wilson::Error),
}

impl From<wilson::Error> for Failure {
    fn from(e: wilson::Error) -> Self {
        Failure::Lib(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        use wilson::Error as E;
        match self {
            Failure::Usage(_) => 1,
            Failure::Lib(e) => match e {
                E::Config(_)
                | E::ScheduleConflict { .. }
                | E::StepOutOfRange { .. }
                | E::UnsupportedSingleClass(_)
                | E::Unsupported(_) => 1,
                E::NumericInput(_) | E::UndefinedMetric(_) => 3,
                _ => 2,
            },
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => f.write_str(msg),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let root = cli.out_root;
    match cli.command {
        Command::Synth {
            n_images,
            classes,
            seed,
            size,
            max_objects,
            out,
        } => {
            let cfg = wilson::synth::SynthConfig {
                n_images,
                num_classes: classes,
                size,
                max_objects,
                seed,
            };
            let out = out.unwrap_or_else(|| root.unwrap_or_else(|| PathBuf::from("runs")).join("data"));
            commands::synth(&cfg, &out)
        }
        Command::Split {
            manifest,
            val,
            seed,
            out,
        } => commands::split(&manifest, val, seed, out.as_deref()),
        Command::Train {
            config,
            step,
            prev,
            alpha_sweep,
        } => commands::train(&config, root, step, prev, alpha_sweep),
        Command::Eval {
            config,
            checkpoint,
            manifest,
            report,
        } => commands::eval(&config, &checkpoint, &manifest, report.as_deref()),
        Command::PseudoDump {
            config,
            checkpoint,
            prev,
            manifest,
            out,
            limit,
        } => commands::pseudo_dump(&config, &checkpoint, &prev, &manifest, &out, limit),
        Command::Plot { inputs, out } => plot::plot(&inputs, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
