use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dro_core::commands::{self, TrainOptions};
use dro_core::config::RunConfig;
use dro_core::error::ErrorCategory;
use dro_core::DroError;

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_VERIFY_FAILED: u8 = 5;

#[derive(Parser)]
#[command(name = "dro", version, about = "Ranking-loss fine-tuning of a toy conditional diffusion model")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the seed from the config file.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the reference model on ground-truth samples.
    Pretrain,
    /// Sample a pool from the reference and keep the top-K per condition.
    SelectExperts {
        #[arg(long)]
        reference: PathBuf,
    },
    /// Fine-tune the reference against expert demonstrations.
    Train {
        #[arg(long)]
        reference: PathBuf,
        /// Demonstration CSV; selected from the reference when omitted.
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many total steps.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Win rate of model A over model B.
    Eval {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Check the KL / noise-regression identity on random models.
    Verify {
        /// Double every λ_t first; the check is then expected to fail.
        #[arg(long)]
        corrupt_lambda: bool,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, DroError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed_override {
        cfg.apply_seed(seed);
        cfg.validate()?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode, DroError> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    let out: &Path = &out;
    match cli.command {
        Command::Pretrain => {
            let path = commands::run_pretrain(&cfg, out)?;
            println!("reference written to {}", path.display());
        }
        Command::SelectExperts { reference } => {
            let path = commands::run_select_experts(&cfg, &reference, out)?;
            println!("demonstrations written to {}", path.display());
        }
        Command::Train { reference, demos, resume, stop_after } => {
            let opts = TrainOptions { demos, resume, stop_after };
            let art = commands::run_train(&cfg, &reference, &opts, out)?;
            println!(
                "{} steps done; model {}, state {}, history {}",
                art.steps_done,
                art.model.display(),
                art.state.display(),
                art.history.display()
            );
        }
        Command::Eval { a, b } => {
            let report = commands::run_eval(&cfg, &a, &b, out)?;
            println!(
                "win rate {:.4} over {} prompts (mean reward {:.4} vs {:.4})",
                report.win_rate, report.n_prompts, report.mean_reward_a, report.mean_reward_b
            );
        }
        Command::Verify { corrupt_lambda } => {
            cfg.verify.corrupt_lambda |= corrupt_lambda;
            let summary = commands::run_verify(&cfg, out)?;
            for r in &summary.reports {
                println!(
                    "{:?} c={:?}: max deviation {:.3e} {}",
                    r.sigma_mode,
                    r.condition,
                    r.max_draw_deviation,
                    if r.passed { "ok" } else { "FAILED" }
                );
            }
            if !summary.passed {
                eprintln!("derivation check failed");
                return Ok(ExitCode::from(EXIT_VERIFY_FAILED));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.category() {
                ErrorCategory::Config => EXIT_CONFIG,
                ErrorCategory::Numeric => EXIT_NUMERIC,
                ErrorCategory::Io => EXIT_IO,
            })
        }
    }
}
