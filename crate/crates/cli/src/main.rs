use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fire_cli::{parse_config, run, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fire", version, about = "Fisher-preconditioned training under fragmentation-induced covariate shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run { config: PathBuf },
    /// Randomized checks of the KL/Fisher bound, marginal bound and cubic remainder.
    VerifyTheory {
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Shift diagnostics of a training CSV against a validation CSV.
    Diagnose {
        train: PathBuf,
        val: PathBuf,
        #[arg(long)]
        label: String,
        /// Number of contiguous fragments the training file is cut into.
        #[arg(long, default_value_t = 1)]
        fragments: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn config_value(p: &Path) -> Result<String, CliError> {
    let s = p.to_str().ok_or_else(|| CliError::Config(format!("non UTF-8 path {}", p.display())))?;
    if s.contains('#') || s.contains('\n') {
        return Err(CliError::Config(format!("path `{s}` cannot be written to a config line")));
    }
    Ok(s.to_string())
}

fn build(cmd: Command) -> Result<ExperimentConfig, CliError> {
    match cmd {
        Command::Run { config } => parse_config(&std::fs::read_to_string(&config)?),
        Command::VerifyTheory { trials, seed, out } => parse_config(&format!(
            "mode = verify_theory\nseed = {seed}\ntheory.trials = {trials}\noutput_dir = {}\n",
            config_value(&out)?
        )),
        Command::Diagnose { train, val, label, fragments, seed, out } => parse_config(&format!(
            "mode = diagnostics\nseed = {seed}\ndataset.kind = csv\ndataset.path = {}\ndataset.val_path = {}\n\
             dataset.label_column = {label}\ndataset.fragments = {fragments}\noutput_dir = {}\n",
            config_value(&train)?,
            config_value(&val)?,
            config_value(&out)?
        )),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    if let Ok(n) = std::env::var("FIRE_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not size the thread pool: {e}");
                }
            }
            _ => {
                eprintln!("error: FIRE_THREADS must be a positive integer");
                return ExitCode::from(1);
            }
        }
    }
    let cli = Cli::parse();
    let code = match build(cli.command) {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
