//! Pipeline driver: config-file-driven subcommands for rendering, token
//! accounting, task generation, training, evaluation, and reports.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vistok::run::{
    cmd_budget, cmd_eval, cmd_gen, cmd_render, cmd_report, cmd_train, load_run_config, RunConfig,
};

#[derive(Parser)]
#[command(name = "vistok", version, about = "Fixed-budget visual tokens for long-context text")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the corpus to fixed-size pages with a manifest.
    Render,
    /// Emit per-document token budgets and the density histogram.
    Budget,
    /// Generate the task grid datasets.
    Gen,
    /// Train the toy model on streamed passkey batches.
    Train,
    /// Score a checkpoint on every generated dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Emit extrapolation, density, and timing artifacts.
    Report {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn resolve_config(cli: &Cli) -> vistok::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> vistok::Result<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Render => {
            let manifest = cmd_render(&cfg)?;
            println!("{}", manifest.display());
        }
        Command::Budget => {
            let csv = cmd_budget(&cfg)?;
            println!("{}", csv.display());
        }
        Command::Gen => {
            let root = cmd_gen(&cfg)?;
            println!("{}", root.display());
        }
        Command::Train => {
            let ckpt = cmd_train(&cfg, cli.quiet)?;
            println!("{}", ckpt.display());
        }
        Command::Eval { checkpoint } => {
            for path in cmd_eval(&cfg, checkpoint)? {
                println!("{}", path.display());
            }
        }
        Command::Report { checkpoint } => {
            let dir = cmd_report(&cfg, checkpoint.as_deref(), cli.quiet)?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = serde_json::json!({ "error": err.to_string(), "exit_code": err.exit_code() });
            eprintln!("{record}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
