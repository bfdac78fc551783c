use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use tta_harness::{cmd_adapt, cmd_pretrain, cmd_report, cmd_sweep, ExperimentConfig, HarnessError, SweepAxis};

/// Test-time adaptation experiments over synthetic continual domain-shift
/// streams with open-set contamination.
#[derive(Parser)]
#[command(name = "tta", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set adapt.learning_rate=5e-4`. Wins
    /// over the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed: sets scenario.seed and adapt.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override (output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the source model and write its checkpoint.
    Pretrain(ConfigArgs),
    /// Run one adaptation scenario and persist a result bundle.
    Adapt(ConfigArgs),
    /// Run one adaptation per axis value and aggregate the results.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Axis spec: `strategy=all,confdiff`, `lr=1e-3,1e-4`, or
        /// `batch=200,100`.
        #[arg(long)]
        axis: String,
    },
    /// Summarize one or more result bundles.
    Report {
        /// Bundle directories (each containing bundle.json).
        bundles: Vec<PathBuf>,
        /// Directory for plot-ready CSV exports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs, for_pretrain: bool) -> Result<(ExperimentConfig, String), HarnessError> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Validation(format!("cannot read config {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut config = ExperimentConfig::from_toml(&text, &args.set)?;
    if let Some(seed) = args.seed {
        config.set_run_seed(seed);
    }
    if let Some(out) = &args.out {
        let dir = out.display().to_string();
        if for_pretrain {
            config.output.checkpoint = format!("{dir}/theta_o.ckpt");
        } else {
            config.output.dir = dir;
        }
    }
    config.validate()?;
    Ok((config, text))
}

fn run() -> Result<(), HarnessError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Pretrain(args) => {
            let (config, _) = load_config(&args, true)?;
            cmd_pretrain(&config)?;
            Ok(())
        }
        Command::Adapt(args) => {
            let (config, text) = load_config(&args, false)?;
            cmd_adapt(&config, &text, &args.set)?;
            Ok(())
        }
        Command::Sweep { config: args, axis } => {
            let axis = SweepAxis::parse(&axis)?;
            let (config, text) = load_config(&args, false)?;
            // Rebuild the override list the cells will extend, including
            // the seed/out flags resolved into explicit overrides.
            let mut overrides = args.set.clone();
            if let Some(seed) = args.seed {
                overrides.push(format!("scenario.seed={seed}"));
                overrides.push(format!("adapt.seed={seed}"));
            }
            if let Some(out) = &args.out {
                overrides.push(format!("output.dir={:?}", out.display().to_string()));
            }
            cmd_sweep(&config, &text, &overrides, &axis)?;
            Ok(())
        }
        Command::Report { bundles, out } => cmd_report(&bundles, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
