//! Argument parsing and dispatch for the `mixsign` command.
//!
//! Exit status: 0 on success, 1 for usage errors (bad arguments, missing or
//! malformed config files), 2 for failures while running.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use mixsign::checks::{format_table, gradient_suite};
use mixsign::synth::{gen_corpus, SynthSpec};
use mixsign::train::{evaluate, export_graphs, train, ExportFormat, RunOptions, Task, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "mixsign",
    version,
    about = "Sign graph recognition and translation trainer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        /// Generator spec (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a recognition model with gloss targets.
    Train(RunArgs),
    /// Pre-train the recognition backbone on pseudo glosses from text.
    PretrainTcp(RunArgs),
    /// Fine-tune for translation, optionally from a checkpoint.
    Finetune(RunArgs),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Export the graphs built for one sample.
    ExportGraphs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        #[arg(long, default_value = "dot")]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// `train`/`pretrain-tcp`: resume from this checkpoint.
    /// `finetune`: initialise from this checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<mixsign::Error> for Failure {
    fn from(e: mixsign::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, Failure> {
    TrainConfig::load(path)
        .map_err(|e| Failure::Usage(format!("cannot use config {}: {e}", path.display())))
}

fn run_task(
    args: RunArgs,
    allowed: &[Task],
    command: &str,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config)?;
    if !allowed.contains(&cfg.task) {
        return Err(Failure::Usage(format!(
            "config task {} cannot be run with `{command}`",
            cfg.task
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let mut opts = RunOptions::default();
    if let Some(ck) = args.checkpoint {
        if cfg.task.uses_decoder() {
            cfg.init = Some(ck);
        } else {
            opts.resume = Some(ck);
        }
    }
    let summary = train(&cfg, &args.out, &opts)?;
    let best = &summary.best.state;
    let _ = writeln!(
        out,
        "best epoch {} (score {}), {} training samples skipped; outputs in {}",
        best.best_epoch,
        best.best_score,
        summary.skipped,
        args.out.display()
    );
    Ok(())
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            config,
            seed,
            out: dir,
        } => {
            let spec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
                    serde_json::from_str::<SynthSpec>(&text)
                        .map_err(|e| Failure::Usage(format!("bad spec {}: {e}", p.display())))?
                }
                None => SynthSpec::default(),
            };
            let counts = gen_corpus(&spec, seed, &dir)?;
            for (split, n) in counts {
                let _ = writeln!(out, "{split}: {n}");
            }
        }
        Command::Train(a) => run_task(a, &[Task::Cslr], "train", out)?,
        Command::PretrainTcp(a) => run_task(a, &[Task::TcpPretrain], "pretrain-tcp", out)?,
        Command::Finetune(a) => run_task(
            a,
            &[Task::FinetuneGloss, Task::FinetuneGlossfree],
            "finetune",
            out,
        )?,
        Command::Eval { checkpoint, split } => {
            let r = evaluate(&checkpoint, &split)?;
            let m = &r.metrics;
            let w = m.wer.unwrap_or_default();
            let _ = writeln!(
                out,
                "split {} loss {} wer {} del {} ins {} sub {} dispersion {}",
                r.split,
                m.loss.map_or("-".into(), |l| l.to_string()),
                w.wer,
                w.del,
                w.ins,
                w.sub,
                m.dispersion.map_or("-".into(), |d| d.to_string())
            );
            if let Some(t) = r.translation {
                let _ = writeln!(
                    out,
                    "token_accuracy {} ce {}",
                    t.token_accuracy,
                    t.ce.map_or("-".into(), |c| c.to_string())
                );
            }
        }
        Command::ExportGraphs {
            checkpoint,
            sample,
            format,
            out: dir,
        } => {
            for p in export_graphs(&checkpoint, &sample, format, &dir)? {
                let _ = writeln!(out, "{}", p.display());
            }
        }
        Command::Gradcheck { seed } => {
            let rows = gradient_suite(seed)?;
            let _ = write!(out, "{}", format_table(&rows));
            if let Some(bad) = rows.iter().find(|r| !r.passed) {
                return Err(Failure::Runtime(format!(
                    "gradient check failed for {}",
                    bad.name
                )));
            }
        }
    }
    Ok(())
}

/// Parses `argv` (including the program name), runs the command and
/// returns the exit status.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(cli, out) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(m)) => {
            let _ = writeln!(err, "error: {m}");
            EXIT_RUNTIME
        }
    }
}
