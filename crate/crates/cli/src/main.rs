use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mimalloc::MiMalloc;
use eqshape::commands::{self, Selection, Status, TrainArgs};
use eqshape::config::{default_config_text, Config};
use eqshape::verify::VerifyConfig;
use eqshape_core::data::SplitKind;

// Training allocates and frees many large tensors per step; the system
// allocator returns them to the OS every time.
#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

/// Frame-averaged E(3)-equivariant shape autoencoders.
#[derive(Debug, Parser)]
#[command(name = "eqshape", version)]
struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the chain dataset: meshes, point clouds, weights, manifest, splits.
    Gen {
        /// Print the default configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Train a model; writes checkpoint.eqf and loss.csv.
    Train {
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Split whose training part is used: I, z, SO3 or unseen-pose.
        #[arg(long, default_value = "I")]
        split: String,
        /// Overrides train.epochs (the total, counting resumed epochs).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint; writes metrics.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated: train, I, z, SO3, unseen-pose.
        #[arg(long, default_value = "I,z,SO3,unseen-pose")]
        split: String,
    },
    /// Run the equivariance property suite; writes verify.csv.
    Verify {
        /// Overrides verify.trials.
        #[arg(long)]
        trials: Option<usize>,
        /// Replace every frame by the identity (checks that the checks can fail).
        #[arg(long)]
        skip_fa: bool,
    },
    /// Interpolate between two meshes in latent space; writes interp_NNN.obj.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Overrides interp.steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Time backbone and FA forward passes; writes bench.csv.
    Bench,
}

fn load_config(path: Option<&Path>, fallback: Option<&Path>, seed: Option<u64>) -> Result<Config> {
    let mut cfg = match (path, fallback) {
        (Some(p), _) => Config::load(p)?,
        (None, Some(p)) if p.exists() => Config::load(p)?,
        _ => Config::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn split_kind(s: &str) -> Result<SplitKind> {
    SplitKind::parse(s).ok_or_else(|| anyhow::anyhow!("unknown split {s:?} (expected I, z, SO3 or unseen-pose)"))
}

fn run(cli: Cli) -> Result<Status> {
    let cfg_path = cli.config.as_deref();
    match cli.cmd {
        Cmd::Gen { print_config } => {
            if print_config {
                print!("{}", default_config_text());
                return Ok(Status::Ok);
            }
            commands::gen(&load_config(cfg_path, None, cli.seed)?, &cli.out)
        }
        Cmd::Train {
            data,
            resume,
            split,
            epochs,
        } => {
            // Without --config the dataset's own configuration is used.
            let cfg = load_config(cfg_path, Some(&data.join("config.toml")), cli.seed)?;
            let args = TrainArgs {
                data: &data,
                out: &cli.out,
                resume: resume.as_deref(),
                split: split_kind(&split)?,
                epochs,
            };
            commands::train_cmd(&cfg, &args)
        }
        Cmd::Eval { checkpoint, data, split } => {
            let sel = split
                .split(',')
                .map(|s| Selection::parse(s.trim()))
                .collect::<Result<Vec<_>>>()?;
            commands::eval_cmd(&checkpoint, &data, &sel, &cli.out)
        }
        Cmd::Verify { trials, skip_fa } => {
            let cfg = load_config(cfg_path, None, cli.seed)?;
            let v = VerifyConfig {
                seed: cfg.seed,
                trials: trials.unwrap_or(cfg.verify.trials),
                skip_fa,
            };
            commands::verify_cmd(&v, &cli.out)
        }
        Cmd::Interp { checkpoint, a, b, steps } => {
            let cfg = load_config(cfg_path, None, cli.seed)?;
            commands::interp_cmd(&checkpoint, &a, &b, steps.unwrap_or(cfg.interp.steps), &cli.out)?;
            Ok(Status::Ok)
        }
        Cmd::Bench => commands::bench_cmd(&load_config(cfg_path, None, cli.seed)?, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
