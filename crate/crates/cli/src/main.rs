use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use vlaguard_cli::commands;
use vlaguard_cli::config::{ExperimentConfig, CONFIG_ENV};

#[derive(Parser)]
#[command(name = "vlaguard", version)]
#[command(about = "Calibrated candidate selection and state monitoring on a synthetic reaching task")]
struct Cli {
    /// TOML experiment config (defaults apply to missing keys)
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,

    /// Override the master seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the policy and expert, write JSONL datasets and the split
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train the quantile regressor, calibrate it, fit the state monitor
    TrainCalibrate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare selection strategies on paired seeds
    EvalSelection {
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Pick the monitor threshold by penalized Youden's J
    TuneThreshold {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        /// Defaults to the artifact directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Failure-prediction metrics and the OOD detection study
    Report {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        artifacts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Annotate a trajectory file with distances and verdicts
    MonitorReplay {
        #[arg(long)]
        trajectories: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cut each trajectory at its first alarm
        #[arg(long)]
        halt: bool,
    },
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let paths = cfg.paths.clone();
    match cli.command {
        Command::Generate { out, episodes } => {
            if let Some(n) = episodes {
                cfg.n_episodes = n;
            }
            cfg.validate()?;
            commands::generate(&cfg, &out.unwrap_or(paths.data_dir))
        }
        Command::TrainCalibrate { data, out, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            commands::train_calibrate_cmd(&cfg, &data.unwrap_or(paths.data_dir), &out.unwrap_or(paths.artifact_dir))
        }
        Command::EvalSelection { artifacts, out, trials } => {
            if let Some(t) = trials {
                cfg.n_trials = t;
            }
            commands::eval_selection_cmd(&cfg, &artifacts.unwrap_or(paths.artifact_dir), &out.unwrap_or(paths.report_dir))
        }
        Command::TuneThreshold { data, artifacts, out } => {
            let artifacts = artifacts.unwrap_or(paths.artifact_dir);
            let out = out.unwrap_or_else(|| artifacts.clone());
            commands::tune_threshold_cmd(&cfg, &data.unwrap_or(paths.data_dir), &artifacts, &out)
        }
        Command::Report { data, artifacts, out } => commands::report_cmd(
            &cfg,
            &data.unwrap_or(paths.data_dir),
            &artifacts.unwrap_or(paths.artifact_dir),
            &out.unwrap_or(paths.report_dir),
        ),
        Command::MonitorReplay { trajectories, detector, out, halt } => {
            commands::monitor_replay_cmd(&trajectories, &detector, &out, halt)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(vlaguard_cli::exit_code(&err) as u8)
        }
    }
}
