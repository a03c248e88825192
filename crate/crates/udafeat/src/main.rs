use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use udafeat::commands::{self, CountOverrides};
use udafeat::config::ExperimentConfig;
use udafeat::error::{Error, Result, EXIT_CONFIG, EXIT_OK};
use udafeat_core::gradcheck::{SuiteOptions, DEFAULT_EPS, DEFAULT_TOLERANCE};

/// Synthetic two-domain segmentation lab for feature-space adaptation losses.
#[derive(Debug, Parser)]
#[command(name = "udafeat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Adaptation modules to keep: comma set from {cl,or,sp,em}, or `none`.
    #[arg(long, global = true)]
    ablation: Option<String>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the source, target and validation splits.
    Generate {
        #[arg(long)]
        n_source: Option<usize>,
        #[arg(long)]
        n_target: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
    },
    /// Warm up on source, then adapt to target.
    Train,
    /// Evaluate a checkpoint on the validation split.
    Eval { checkpoint: PathBuf },
    /// Finite-difference check of every primitive and loss.
    Gradcheck {
        /// Number of consecutive seeds to check, starting at --seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Compare the feature diagnostics of two checkpoints.
    Diagnose { a: PathBuf, b: PathBuf },
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Generate {
            n_source,
            n_target,
            n_val,
        } => {
            let overrides = CountOverrides {
                source: *n_source,
                target: *n_target,
                val: *n_val,
            };
            let manifest = commands::generate(&config(cli)?, cli.out.as_deref(), overrides)?;
            println!("{}", manifest.display());
        }
        Command::Train => {
            let outcome = commands::train(&config(cli)?, cli.data.as_deref(), cli.out.as_deref(), cli.ablation.as_deref())?;
            match outcome.best {
                Some((step, miou)) => println!("steps={} best_step={step} best_miou={miou}", outcome.final_step),
                None => println!("steps={}", outcome.final_step),
            }
            println!("{}", outcome.out_dir.display());
        }
        Command::Eval { checkpoint } => {
            let cfg = config(cli)?;
            let expected = cli.config.as_ref().map(|_| cfg.model.clone());
            let out = cli
                .out
                .clone()
                .or(cfg.out_dir.clone())
                .ok_or_else(|| Error::Config("an output directory is required (--out or out_dir)".into()))?;
            let miou = commands::eval(checkpoint, expected.as_ref(), cli.data.as_deref(), &out, cfg.seed)?;
            println!("miou={miou}");
        }
        Command::Gradcheck { seeds, inject_fault } => {
            let opts = SuiteOptions {
                eps: DEFAULT_EPS,
                tolerance: DEFAULT_TOLERANCE,
                inject_fault: *inject_fault,
            };
            let first = cli.seed.unwrap_or(0);
            let results = commands::gradcheck(first, *seeds, opts, commands::worker_count()?)?;
            let mut failures = 0;
            for (seed, checks) in &results {
                for r in checks {
                    let verdict = if r.passed { "pass" } else { "FAIL" };
                    println!("seed={seed} op={} max_rel_error={:.3e} {verdict}", r.name, r.max_rel_error);
                    failures += usize::from(!r.passed);
                }
            }
            if failures > 0 {
                return Err(Error::Verification(format!("{failures} gradient checks failed")));
            }
            println!("all {} checks passed", results.iter().map(|(_, c)| c.len()).sum::<usize>());
        }
        Command::Diagnose { a, b } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| Error::Config("--out is required".into()))?;
            commands::diagnose(a, b, cli.data.as_deref(), &out)?;
            println!("{}", out.display());
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("udafeat: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
