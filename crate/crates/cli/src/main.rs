use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hygen_cli::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, ExperimentConfig, TrainMode};

#[derive(Parser)]
#[command(name = "hygen", version, about = "Skill discovery and hybrid multi-agent policy learning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate offline datasets for the configured source tasks.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode over the configured seed list.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, help = hygen_cli::MODE_USAGE)]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained parameter bundle on source and unseen tasks.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid: ratio, refine, cql, or skills.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        which: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run() -> hygen_core::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenData { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cmd_gen_data(&cfg, &out)?;
            for t in &report.tasks {
                println!(
                    "{} {}: {} episodes, win rate {:.3}, mean return {:.3}, strength {:.2}",
                    t.task, t.quality, t.episodes, t.win_rate, t.mean_return, t.strength
                );
            }
        }
        Cmd::Train { config, mode, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let mode = TrainMode::parse(&mode)?;
            let dirs = cmd_train(&cfg, mode, &out)?;
            for d in dirs {
                println!("trained: {}", d.display());
            }
        }
        Cmd::Eval {
            params,
            config,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cmd_eval(&cfg, &params, &out)?;
            for t in &report.tasks {
                println!(
                    "{} ({}): win rate {:.3} +- {:.3}, return {:.3}",
                    t.task, t.kind, t.win_rate_mean, t.win_rate_std, t.return_mean
                );
            }
        }
        Cmd::Ablate { config, which, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rows = cmd_ablate(&cfg, &which, &out)?;
            for r in rows.iter().filter(|r| r.task == "source_mean") {
                println!(
                    "{} {}{}: {:.3} +- {:.3}",
                    r.which,
                    r.arm,
                    if r.is_default { " (default)" } else { "" },
                    r.win_rate_mean,
                    r.win_rate_std
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(hygen_cli::exit_code_for(&e) as u8)
        }
    }
}
