use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use favi_cli::{parse_config_with, run};

/// Forward amortized variational inference experiments.
#[derive(Parser, Debug)]
#[command(name = "favi", version = favi_cli::run::VERSION)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (`key = value` lines, `[section]` headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSVs and the manifest.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    /// Override any key, e.g. `--set forecast.epochs=40`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact-posterior checks on discrete joints and a linear-Gaussian chain.
    OracleSuite,
    /// Mean-field contrast and reconstruction errors, FAVI against reverse KL.
    CompareVi,
    /// Lorenz forecaster against the extended Kalman filter.
    Forecast {
        #[command(subcommand)]
        stage: ForecastStage,
    },
    /// Amortized meta-classifier against the Bayes-optimal ensemble predictor.
    Metaclf {
        #[command(subcommand)]
        stage: MetaStage,
    },
}

#[derive(Subcommand, Debug)]
enum ForecastStage {
    Train,
    Eval {
        #[arg(long)]
        trials: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum MetaStage {
    Train,
    Eval {
        /// CSV with a header row and numeric columns.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        label_col: Option<String>,
        #[arg(long)]
        n_min: Option<usize>,
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn overrides(cli: &Cli) -> Result<Vec<(String, String)>, String> {
    let mut o: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| o.push((k.to_string(), v));
    match &cli.command {
        Command::OracleSuite => put("experiment", "oracle-suite".into()),
        Command::CompareVi => put("experiment", "favi-vs-reverse".into()),
        Command::Forecast { stage } => {
            put("experiment", "forecast".into());
            match stage {
                ForecastStage::Train => put("stage", "train".into()),
                ForecastStage::Eval { trials } => {
                    put("stage", "eval".into());
                    if let Some(t) = trials {
                        put("forecast.trials", t.to_string());
                    }
                }
            }
        }
        Command::Metaclf { stage } => {
            put("experiment", "metaclf".into());
            match stage {
                MetaStage::Train => put("stage", "train".into()),
                MetaStage::Eval {
                    data,
                    label_col,
                    n_min,
                    n_max,
                    repeats,
                } => {
                    put("stage", "eval".into());
                    if let Some(d) = data {
                        put("metaclf.data", d.display().to_string());
                    }
                    if let Some(l) = label_col {
                        put("metaclf.label_col", l.clone());
                    }
                    if let Some(n) = n_min {
                        put("metaclf.n_min", n.to_string());
                    }
                    if let Some(n) = n_max {
                        put("metaclf.n_max", n.to_string());
                    }
                    if let Some(r) = repeats {
                        put("metaclf.repeats", r.to_string());
                    }
                }
            }
        }
    }
    let c = &cli.common;
    if let Some(s) = c.seed {
        put("seed", s.to_string());
    }
    if let Some(p) = &c.out {
        put("output_dir", p.display().to_string());
    }
    if let Some(p) = &c.checkpoint_dir {
        put("checkpoint_dir", p.display().to_string());
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        put(k.trim(), v.trim().to_string());
    }
    Ok(o)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match &cli.common.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", path.display());
                return ExitCode::from(2);
            }
        },
        None => String::new(),
    };
    let overrides = match overrides(&cli) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let mut config = match parse_config_with(&text, &overrides) {
        Ok(c) => c,
        Err(errors) => {
            eprintln!("error: invalid configuration");
            for e in &errors.0 {
                eprintln!("  {e}");
            }
            return ExitCode::from(2);
        }
    };
    match std::env::current_dir() {
        Ok(cwd) => config.resolve_paths(&cwd),
        Err(e) => {
            eprintln!("error: cannot resolve paths: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&config) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.summary).unwrap_or_default());
            println!("manifest: {}", outcome.manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
