use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hinf_cli::commands::{self, EvalTarget};
use hinf_cli::config::ExperimentConfig;
use hinf_cli::exit_code;
use hybrid_inference::{Error, Result};

#[derive(Parser)]
#[command(name = "hinf", version, about = "Kalman, GM, GNN and hybrid inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Root seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train/validation/test trajectories to CSV.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Grid-search the model noise on validation data.
    TuneGm {
        #[command(flatten)]
        common: Common,
    },
    /// Train the GNN or hybrid estimator.
    Train {
        #[command(flatten)]
        common: Common,
        /// kalman, e_kalman, gm, gnn or hybrid.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Test MSE of one mode, or of every available mode with `--mode all`.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<String>,
        /// Checkpoint for a learned mode; defaults to the one in the output
        /// directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Turn metrics files into an MSE table, an SVG chart and path CSVs.
    PlotData {
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

fn load(common: &Common, mode: Option<&str>) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(m) = mode.filter(|m| *m != "all") {
        cfg.mode = m.parse()?;
    }
    let out = cfg.output_dir.clone();
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<()> {
    let manifest = match cli.command {
        Command::Generate { common } => {
            let (cfg, out) = load(&common, None)?;
            commands::generate(&cfg, &out)?
        }
        Command::TuneGm { common } => {
            let (cfg, out) = load(&common, None)?;
            commands::tune(&cfg, &out)?
        }
        Command::Train { common, mode } => {
            if mode.as_deref() == Some("all") {
                return Err(Error::Config("train takes a single mode".into()));
            }
            let (cfg, out) = load(&common, mode.as_deref())?;
            commands::train(&cfg, &out)?
        }
        Command::Eval { common, mode, checkpoint } => {
            let (cfg, out) = load(&common, mode.as_deref())?;
            let target = if mode.as_deref() == Some("all") {
                if checkpoint.is_some() {
                    return Err(Error::Config("--checkpoint needs a single --mode".into()));
                }
                EvalTarget::All
            } else {
                EvalTarget::One(cfg.mode, checkpoint)
            };
            commands::eval(&cfg, &out, target)?
        }
        Command::PlotData { out, metrics } => commands::plot_data(&metrics, &out)?,
    };
    for (k, v) in &manifest.metrics {
        println!("{k} = {v}");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
