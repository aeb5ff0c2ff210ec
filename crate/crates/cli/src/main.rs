use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use envstate::pipeline::{self, PipelineConfig, PipelineError};
use envstate::simulate::ScenarioSpec;
use serde_json::Value;

/// Environmental state characterization from BLRMS seismic trends.
#[derive(Parser)]
#[command(name = "envstate", version)]
struct Cli {
    /// Pipeline config JSON (scenario spec JSON for `simulate`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `intrinsic` or `external:<catalog name>`; overrides the config.
    #[arg(long, global = true)]
    rank_by: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario and a matching pipeline.json.
    Simulate {
        /// k grid written into the generated pipeline config.
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [3, 10])]
        k_range: Vec<usize>,
    },
    /// Load, mask and window the channels; write features.csv.
    Features,
    /// Grid search over k_range; write validation.json.
    SelectK,
    /// Fit the model from features.csv; write model.json.
    Cluster,
    /// Label clusters and write the timeline and state flags.
    Label,
    /// Correlate the timeline with the configured catalogs.
    Evaluate,
    /// All stages end to end.
    Run,
}

fn config_path(cli: &Cli) -> Result<&PathBuf, PipelineError> {
    cli.config
        .as_ref()
        .ok_or_else(|| PipelineError::Config("--config is required".into()))
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(config_path(cli)?)?;
    if let Some(o) = &cli.output {
        cfg.output = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.clustering.seed = s;
    }
    if let Some(r) = &cli.rank_by {
        cfg.clustering.rank_by = r.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Value, PipelineError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(PipelineError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::Simulate { k_range } => {
            let path = config_path(cli)?;
            let mut spec = ScenarioSpec::from_json_file(path)?;
            if let Some(s) = cli.seed {
                spec.rng_seed = s;
            }
            let dir = cli.output.clone().unwrap_or_else(|| PathBuf::from("scenario"));
            pipeline::cmd_simulate(&spec, &dir, (k_range[0], k_range[1]))
        }
        Command::Features => pipeline::cmd_features(&load_config(cli)?),
        Command::SelectK => pipeline::cmd_select_k(&load_config(cli)?),
        Command::Cluster => pipeline::cmd_cluster(&load_config(cli)?),
        Command::Label => pipeline::cmd_label(&load_config(cli)?),
        Command::Evaluate => pipeline::cmd_evaluate(&load_config(cli)?),
        Command::Run => pipeline::cmd_run(&load_config(cli)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(summary) => {
            let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
            // a closed stdout (e.g. piped into `head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
