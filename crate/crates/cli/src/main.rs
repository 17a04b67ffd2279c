use bicap_core::experiment::{cmd_evaluate, cmd_generate, cmd_report, cmd_train, cmd_transform, RunConfig};
use bicap_core::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "bicap",
    version,
    about = "Neural/visual embedding alignment experiments"
)]
struct Cli {
    /// TOML config, or a manifest written by an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite an existing dataset.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory for the command (dataset, run, or reports directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic paired dataset.
    Generate,
    /// Write the four views of one PPM image.
    Transform { input: PathBuf },
    /// Train fusion, neural encoder and temperature.
    Train {
        /// Overrides the configured epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a checkpoint on n-way retrieval.
    Evaluate {
        /// Defaults to the run directory's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Summarize metrics and evaluation results as Markdown.
    Report,
}

fn run(cli: Cli) -> bicap_core::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Generate => {
            if let Some(out) = cli.out {
                cfg.paths.dataset = out;
            }
            let data = cmd_generate(&cfg, cli.force)?;
            println!("wrote {} samples to {}", data.len(), cfg.paths.dataset.display());
        }
        Command::Transform { input } => {
            let out = cli.out.unwrap_or_else(|| PathBuf::from("views"));
            for path in cmd_transform(&cfg, &input, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Train { epochs } => {
            if let Some(out) = cli.out {
                cfg.paths.run = out;
            }
            if let Some(e) = epochs {
                cfg.alignment.epochs = e;
            }
            let outcome = cmd_train(&cfg)?;
            for r in &outcome.reports {
                println!(
                    "epoch {:>4}  loss {:.5}  sim {:.4}  kernel {}/{:.1}/{}",
                    r.epoch, r.loss, r.mean_smoothed_sim, r.kernel_min, r.kernel_mean, r.kernel_max
                );
            }
            if outcome.clamp_warnings > 0 {
                eprintln!(
                    "warning: {} kernel requests fell outside the bank's levels and were clamped",
                    outcome.clamp_warnings
                );
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Evaluate { checkpoint } => {
            if let Some(out) = cli.out {
                cfg.paths.reports = out;
            }
            let summary = cmd_evaluate(&cfg, checkpoint.as_deref())?;
            for r in &summary.reports {
                println!(
                    "{:>4}-way  top1 {:.4}  top5 {:.4}  mAP {:.4}  sim {:.4}  ({} trials)",
                    r.gallery_size, r.top1, r.top5, r.map, r.similarity, r.trials
                );
            }
            for n in &summary.skipped_gallery_sizes {
                eprintln!(
                    "warning: skipped {n}-way gallery (only {} test samples)",
                    summary.test_samples
                );
            }
        }
        Command::Report => {
            if let Some(out) = cli.out {
                cfg.paths.reports = out;
            }
            print!("{}", cmd_report(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Numeric { dump: Some(path), .. } = &e {
                eprintln!("diagnostic state written to {}", path.display());
            }
            ExitCode::from(match e {
                Error::Config(_) | Error::Protocol(_) => 2,
                Error::Numeric { .. } => 3,
                _ => 1,
            })
        }
    }
}
