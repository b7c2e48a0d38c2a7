//! `ullsnn`: train, convert, fine-tune, evaluate and analyse spiking networks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ullsnn_core::convert::ConversionMode;

mod artifacts;
mod config;
mod exit;
mod stages;

use config::{ExperimentConfig, Overrides};
use exit::CliError;
use stages::{Inputs, Run};

#[derive(Parser, Debug)]
#[command(name = "ullsnn", version, about, long_about = None)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true, default_value = "ullsnn.toml")]
    config: PathBuf,

    /// Output directory. Defaults to `output_dir` from the config, then
    /// `$ULLSNN_OUTPUT_ROOT/<name>`, then `runs/<name>`.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,

    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Number of time steps T.
    #[arg(short = 't', long, global = true)]
    time_steps: Option<usize>,

    /// Conversion mode: naive, max_act_bias or scaled.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<ConversionMode>,

    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

fn parse_mode(s: &str) -> Result<ConversionMode, String> {
    s.parse().map_err(|e: ullsnn_core::Error| e.to_string())
}

#[derive(Args, Debug, Default)]
struct InputArgs {
    /// Source-network weight file (default: <output>/dnn.weights).
    #[arg(long)]
    dnn: Option<PathBuf>,
    /// Spiking-network weight file (default: <output>/snn.weights, else
    /// <output>/snn_converted.weights).
    #[arg(long)]
    snn: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the threshold-ReLU source network.
    TrainDnn {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Collect activation statistics and convert to a spiking network.
    CalibrateConvert {
        #[command(flatten)]
        inputs: InputArgs,
        /// Reuse a persisted stats.json instead of recomputing.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Surrogate-gradient fine-tuning of the converted network.
    Finetune {
        #[command(flatten)]
        inputs: InputArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Accuracy, spike activity, costs and gap reports at T.
    Evaluate {
        #[command(flatten)]
        inputs: InputArgs,
    },
    /// Gap reports over a sweep of step counts.
    Analyze {
        #[command(flatten)]
        inputs: InputArgs,
        /// Comma-separated step counts, e.g. 1,2,3,4,5.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Operation counts and energy estimates.
    EnergyReport {
        #[command(flatten)]
        inputs: InputArgs,
    },
    /// Re-hash every artifact listed in the manifest.
    Verify,
    /// Every stage in order.
    Pipeline {
        #[arg(long)]
        dnn_epochs: Option<usize>,
        #[arg(long)]
        snn_epochs: Option<usize>,
    },
}

fn overrides(cli: &Cli) -> Overrides {
    let mut o = Overrides {
        output_dir: cli.output_dir.clone(),
        seed: cli.seed,
        time_steps: cli.time_steps,
        mode: cli.mode,
        sequential: cli.sequential,
        ..Overrides::default()
    };
    match &cli.command {
        Command::TrainDnn { epochs } => o.dnn_epochs = *epochs,
        Command::Finetune { epochs, .. } => o.snn_epochs = *epochs,
        Command::Analyze { sweep, resamples, .. } => {
            o.sweep = sweep.clone();
            o.resamples = *resamples;
        }
        Command::Pipeline { dnn_epochs, snn_epochs } => {
            o.dnn_epochs = *dnn_epochs;
            o.snn_epochs = *snn_epochs;
        }
        _ => {}
    }
    o
}

fn inputs(a: InputArgs, stats: Option<PathBuf>) -> Inputs {
    Inputs { dnn: a.dnn, snn: a.snn, stats }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = ExperimentConfig::load(&cli.config, &overrides(&cli))?;
    if let Command::Verify = cli.command {
        let root = cfg.output_dir();
        let bad = artifacts::read_manifest(&root)?.verify(&root);
        if !bad.is_empty() {
            return Err(CliError::Artifact(format!("checksum mismatch: {}", bad.join(", "))));
        }
        println!("verify: every artifact in {} matches the manifest", root.display());
        return Ok(());
    }
    let mut run = Run::open(cfg)?;
    match cli.command {
        Command::TrainDnn { .. } => stages::train_dnn_stage(&mut run),
        Command::CalibrateConvert { inputs: a, stats } => stages::calibrate_convert_stage(&mut run, &inputs(a, stats)),
        Command::Finetune { inputs: a, .. } => stages::finetune_stage(&mut run, &inputs(a, None)),
        Command::Evaluate { inputs: a } => stages::evaluate_stage(&mut run, &inputs(a, None)),
        Command::Analyze { inputs: a, .. } => stages::analyze_stage(&mut run, &inputs(a, None)),
        Command::EnergyReport { inputs: a } => stages::energy_report_stage(&mut run, &inputs(a, None)),
        Command::Verify => unreachable!(),
        Command::Pipeline { .. } => stages::pipeline(&mut run, &Inputs::default()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
