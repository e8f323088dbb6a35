use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adgcrnn::commands::{cmd_eval, cmd_ingest, cmd_predict, cmd_report, cmd_synth, cmd_train, EvalRequest};
use adgcrnn::config::RunConfig;
use adgcrnn::{CliError, Result};
use adgcrnn_core::cell::Variant;
use clap::{Parser, Subcommand};

/// Traffic forecasting with attention-based dynamic graph convolutional
/// recurrent networks.
#[derive(Parser)]
#[command(name = "adgcrnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean a value matrix and edge list into a dataset bundle.
    Ingest {
        #[arg(long)]
        values: Option<PathBuf>,
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate a synthetic dataset bundle.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a bundle.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// s, sm, smd or full.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Per-horizon MAE/RMSE of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write every forecast.
        #[arg(long)]
        predictions: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Forecast the next horizon from one anchor step.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        anchor: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Tabulate the summary rows of metrics files (`label=path` or `path`).
    Report {
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn bundle_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.data.bundle.clone())
        .ok_or_else(|| CliError::Invalid("no bundle given: pass --bundle or set data.bundle".into()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            values,
            graph,
            config,
            out_dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let missing = |what: &str| CliError::Invalid(format!("no {what} file: pass --{what} or set data.{what}"));
            let values = values
                .or_else(|| cfg.data.values.clone())
                .ok_or_else(|| missing("values"))?;
            let graph = graph
                .or_else(|| cfg.data.graph.clone())
                .ok_or_else(|| missing("graph"))?;
            let out = cfg.resolve_out_dir(out_dir.as_deref());
            let m = cmd_ingest(&cfg, &values, &graph, &out)?;
            println!(
                "{} nodes, {} steps, {} missing, {} windows -> {}",
                m.n_nodes,
                m.n_steps,
                m.missing,
                m.windows,
                out.display()
            );
        }
        Command::Synth { config, out_dir, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = cfg.resolve_out_dir(out_dir.as_deref());
            let m = cmd_synth(&cfg, &out)?;
            println!(
                "{} nodes, {} steps, {} windows{} -> {}",
                m.n_nodes,
                m.n_steps,
                m.windows,
                if m.dynamic_structure { ", regime switching" } else { "" },
                out.display()
            );
        }
        Command::Train {
            config,
            bundle,
            out_dir,
            seed,
            variant,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(v) = variant {
                cfg.model.variant = v;
            }
            let bundle = bundle_dir(bundle, &cfg)?;
            let out = cfg.resolve_out_dir(out_dir.as_deref());
            println!("variant {}", cfg.model.variant);
            let s = cmd_train(&cfg, &bundle, &out)?;
            match (s.outcome.best_epoch, s.outcome.best_val_mae) {
                (Some(e), Some(mae)) => println!("best epoch {e}, validation MAE {mae:.4}"),
                _ => println!("no epochs run"),
            }
            println!("{}\n{}", s.checkpoint.display(), s.history.display());
        }
        Command::Eval {
            checkpoint,
            config,
            bundle,
            split,
            predictions,
            out_dir,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let fallback = RunConfig::default();
            let base = cfg.as_ref().unwrap_or(&fallback);
            let bundle = bundle_dir(bundle, base)?;
            let out = base.resolve_out_dir(out_dir.as_deref());
            let s = cmd_eval(&EvalRequest {
                config: cfg.as_ref(),
                bundle: &bundle,
                checkpoint: &checkpoint,
                split: &split,
                out_dir: &out,
                write_predictions: predictions,
            })?;
            print!("{}", adgcrnn::commands::metrics_csv(&s.report));
        }
        Command::Predict {
            checkpoint,
            anchor,
            config,
            bundle,
            out_dir,
        } => {
            let cfg = config.as_deref().map(RunConfig::load).transpose()?;
            let fallback = RunConfig::default();
            let base = cfg.as_ref().unwrap_or(&fallback);
            let bundle = bundle_dir(bundle, base)?;
            let out = base.resolve_out_dir(out_dir.as_deref());
            let (_, path) = cmd_predict(cfg.as_ref(), &bundle, &checkpoint, anchor, &out)?;
            println!("{}", path.display());
        }
        Command::Report { inputs, out } => {
            let table = cmd_report(&inputs, out.as_deref())?;
            if out.is_none() {
                print!("{table}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
