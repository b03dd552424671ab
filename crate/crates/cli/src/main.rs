use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfcp_core::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "mfcp", version, about = "Multi-fidelity surrogate with conformal uncertainty bands")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Derive the low-fidelity set from the high-fidelity set with a recipe
    Degrade(Common),
    /// Split the cases and pretrain the autoencoder on low-fidelity data
    Pretrain(Common),
    /// Run multi-split calibration for the band radius and epoch count
    Calibrate(Common),
    /// Fine-tune on all high-fidelity training pairs for the calibrated epochs
    Finetune(Common),
    /// Score the fine-tuned model and its bands on held-out cases
    Evaluate(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline config (flat key = value file)
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output directory, overriding `out_dir`
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Calibration worker threads (0 = all cores)
    #[arg(long, value_name = "N")]
    workers: Option<usize>,
    /// Master seed, overriding `seed`
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
}

fn load_config(c: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        let out = if out.is_absolute() {
            out.clone()
        } else {
            std::env::current_dir()
                .map_err(|e| PipelineError::Validation(e.to_string()))?
                .join(out)
        };
        cfg.out_dir = out.to_string_lossy().into_owned();
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Degrade(c) => {
            let s = pipeline::cmd_degrade(&load_config(&c)?)?;
            println!("degrade: {} -> {} nodes", s.nodes_in, s.nodes_out);
        }
        Command::Pretrain(c) => {
            let s = pipeline::cmd_pretrain(&load_config(&c)?)?;
            let last = s.report.train_loss.last().copied().unwrap_or(f64::NAN);
            println!(
                "pretrain: {} snapshots, {} epochs, final loss {last:.6e}",
                s.lf_snapshots,
                s.report.train_loss.len()
            );
        }
        Command::Calibrate(c) => {
            let s = pipeline::cmd_calibrate(&load_config(&c)?)?;
            let r = &s.result.r_star;
            let mean = r.iter().sum::<f64>() / r.len().max(1) as f64;
            println!("calibrate: B = {}, E* = {}, mean R* = {mean:.6e}", s.result.splits, s.result.e_star);
        }
        Command::Finetune(c) => {
            let s = pipeline::cmd_finetune(&load_config(&c)?)?;
            println!("finetune: {} epochs", s.epochs);
        }
        Command::Evaluate(c) => {
            let r = pipeline::cmd_evaluate(&load_config(&c)?)?;
            println!(
                "evaluate: test mae {:.6e}, nominal {:.4}, pointwise {:.4}",
                r.test.mae, r.test.nominal, r.test.pointwise
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let level = std::env::var("MFCP_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
