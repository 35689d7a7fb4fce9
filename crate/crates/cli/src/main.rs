use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fslab::data::AugmentLevel;
use fslab_cli::commands::{self, AnalyzeArgs};
use fslab_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fslab", version, about = "Few-shot adaptation experiments on a frozen encoder")]
struct Cli {
    /// Experiment config (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this one seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prototype accuracy over the shot and alpha grids.
    Prototype,
    /// Linear probe or LoRA training, one run per augmentation level and seed.
    Train,
    /// Cluster compactness of test-pool embeddings.
    Analyze {
        /// Checkpoint with encoder weights and optional adapters.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "none")]
        augment: AugmentLevel,
        /// Keep this many randomly chosen classes.
        #[arg(long)]
        subsample: Option<usize>,
        #[arg(long)]
        label: Option<String>,
    },
    /// Writes train-split embeddings in the prior file format.
    ExportEmb {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Validates a prior embedding file against the encoder and dataset.
    ImportPriors { path: PathBuf },
    /// Writes the synthetic dataset as images plus a manifest.
    Synth,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::config("--jobs must be at least 1"));
        }
        cfg.jobs = j;
    }
    match cli.command {
        Command::Prototype => {
            let rows = commands::cmd_prototype(&cfg)?;
            println!("{} cells -> {}", rows.len(), cfg.out.join(commands::SWEEP_FILE).display());
        }
        Command::Train => {
            let s = commands::cmd_train(&cfg)?;
            for g in &s.groups {
                println!(
                    "{} {}-shot augment={}: {:.4} +/- {:.4} over {} runs",
                    s.strategy, s.n_shot, g.augment, g.mean_accuracy, g.std_accuracy, g.runs
                );
            }
        }
        Command::Analyze {
            checkpoint,
            augment,
            subsample,
            label,
        } => {
            let s = commands::cmd_analyze(
                &cfg,
                &AnalyzeArgs {
                    checkpoint,
                    augment,
                    subsample,
                    label,
                },
            )?;
            println!("{}: intra {:.4} inter {:.4} ratio {:.4}", s.label, s.intra, s.inter, s.ratio);
        }
        Command::ExportEmb { checkpoint, output } => {
            let p = commands::cmd_export_embeddings(&cfg, checkpoint.as_deref(), output.as_deref())?;
            println!("{}", p.display());
        }
        Command::ImportPriors { path } => {
            let c = commands::cmd_import_priors(&cfg, &path)?;
            println!("ok: {} classes, {} templates, dim {}", c.classes, c.templates, c.dim);
        }
        Command::Synth => {
            let p = commands::cmd_synth(&cfg)?;
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
