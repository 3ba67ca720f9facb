use clap::{Parser, Subcommand};
use graze_cli::config::{ConfigError, Experiment, ExperimentConfig};
use graze_cli::{output, run, RunError};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit times, grazing sets, mild solutions and jump experiments.
///
/// Exit status: 0 when the experiment passes, 2 when it runs and fails,
/// 1 on configuration errors.
#[derive(Parser)]
#[command(name = "graze", version)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// TOML experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment to run, overriding the config.
    #[arg(long, global = true)]
    experiment: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone)]
enum Command {
    /// Run the experiment named in the config.
    Run,
    Classify,
    Membership,
    #[command(name = "exit-time", alias = "exit_time")]
    ExitTime,
    Cycle,
    Solve {
        /// CSV of queries with header t,x1,x2,x3,v1,v2,v3.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    Formation,
    Propagation,
    #[command(name = "continuity-scan", alias = "continuity_scan")]
    ContinuityScan,
    #[command(name = "constants-fit", alias = "constants_fit")]
    ConstantsFit,
}

impl Command {
    fn experiment(&self) -> Option<Experiment> {
        Some(match self {
            Command::Run => return None,
            Command::Classify => Experiment::Classify,
            Command::Membership => Experiment::Membership,
            Command::ExitTime => Experiment::ExitTime,
            Command::Cycle => Experiment::Cycle,
            Command::Solve { .. } => Experiment::Solve,
            Command::Formation => Experiment::Formation,
            Command::Propagation => Experiment::Propagation,
            Command::ContinuityScan => Experiment::ContinuityScan,
            Command::ConstantsFit => Experiment::ConstantsFit,
        })
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let from_command = cli.command.as_ref().and_then(Command::experiment);
    let from_flag = cli.experiment.as_deref().map(str::parse::<Experiment>).transpose()?;
    match (from_command, from_flag) {
        (Some(a), Some(b)) if a != b => {
            return Err(ConfigError::Invalid(format!(
                "subcommand {} conflicts with --experiment {}",
                a.as_str(),
                b.as_str()
            )))
        }
        (Some(e), _) | (None, Some(e)) => cfg.experiment = e,
        (None, None) => {}
    }
    if let Some(Command::Solve { queries: Some(q) }) = &cli.command {
        cfg.solve.queries = Some(q.clone());
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let outcome = match run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code());
        }
    };
    if let Err(e) = output::write_all(&cfg.output_dir, &outcome.artifacts, &outcome.manifest) {
        eprintln!("error: {}", RunError::from(e));
        return ExitCode::from(1);
    }
    println!("{}: {} ({})", cfg.experiment.as_str(), outcome.manifest.status, cfg.output_dir.display());
    ExitCode::from(if outcome.pass { 0 } else { 2 })
}
