use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedfair::config::ExperimentConfig;
use fedfair::experiment::{redirect_outputs, run_experiment, run_scenario_suite, SUITE_TABLE};

#[derive(Parser)]
#[command(
    name = "fedfair",
    version,
    about = "Federated fairness-attack simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single experiment.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several scenarios and print a comparison table.
    Suite {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// Override the seed of every config.
    #[arg(long)]
    seed: Option<u64>,
    /// Write outputs here instead of each config's output_dir. For suites,
    /// every scenario gets `<dir>/<name>/` and the table goes to
    /// `<dir>/suite.txt`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Only print errors.
    #[arg(long)]
    quiet: bool,
}

fn load(paths: &[PathBuf], common: &Common) -> Result<Vec<ExperimentConfig>, String> {
    paths
        .iter()
        .map(|p| {
            let mut cfg =
                ExperimentConfig::from_file(p).map_err(|e| format!("{}: {e}", p.display()))?;
            if let Some(seed) = common.seed {
                cfg.set_seed(seed);
            }
            Ok(cfg)
        })
        .collect()
}

fn run(config: PathBuf, common: Common) -> Result<(), String> {
    let mut cfg = load(&[config], &common)?.remove(0);
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    let outcome = run_experiment(&cfg).map_err(|e| format!("{}: {e}", cfg.name))?;
    if !common.quiet {
        print!("{}", outcome.summary);
        println!("rounds: {}", outcome.rounds_csv.display());
        println!("report: {}", outcome.report_path.display());
    }
    Ok(())
}

fn suite(paths: Vec<PathBuf>, common: Common) -> Result<(), String> {
    let mut configs = load(&paths, &common)?;
    if let Some(dir) = &common.output_dir {
        redirect_outputs(&mut configs, dir);
    }
    let outcome = run_scenario_suite(&configs).map_err(|e| e.to_string())?;
    let table = outcome.table.render();
    if let Some(dir) = &common.output_dir {
        let path = dir.join(SUITE_TABLE);
        fs::write(&path, &table).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    if !common.quiet {
        print!("{table}");
    }
    let failures: Vec<String> = outcome
        .failures()
        .map(|(name, e)| format!("scenario {name} failed: {e}"))
        .collect();
    if failures.is_empty() {
        Ok(())
    } else {
        Err(failures.join("\n"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, common } => run(config, common),
        Command::Suite { configs, common } => suite(configs, common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
