use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drws_cli::{cmd_bounds, cmd_diagnose, cmd_evaluate, cmd_generate, cmd_train, CliError, Config};

#[derive(Parser)]
#[command(
    name = "drws",
    version,
    about = "Learned warm starts for Douglas-Rachford splitting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the configured output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample train/test parameter sets
    Generate,
    /// Train one predictor per configured k
    Train,
    /// Compare cold, nearest-neighbor, and learned warm starts
    Evaluate,
    /// Estimate β̂, B̂ and evaluate generalization bounds
    Bounds,
    /// Gradient-decay and contraction diagnostics
    Diagnose,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut cfg = Config::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    match cli.command {
        Command::Generate => {
            let out = cmd_generate(&cfg)?;
            println!("{}\n{}", out.train.display(), out.test.display());
        }
        Command::Train => {
            for m in cmd_train(&cfg)?.models {
                println!(
                    "k={} {} final train loss {:?}",
                    m.k, m.path, m.final_train_loss
                );
            }
        }
        Command::Evaluate => print!("{}", cmd_evaluate(&cfg)?.to_csv()),
        Command::Bounds => {
            let out = cmd_bounds(&cfg)?;
            for r in &out.reports {
                println!(
                    "{:?}: bound {:.6e} (empirical {:.6e}, test {:.6e})",
                    r.bound_kind, r.bound_value, r.empirical_risk, out.test_risk
                );
            }
            if let Some(t) = &out.trials {
                println!("violation fraction {}", t.violation_fraction);
            }
        }
        Command::Diagnose => print!("{}", cmd_diagnose(&cfg)?.gradient_csv()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
