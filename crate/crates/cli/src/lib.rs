//! Command-line driver: simulate, fit, predict, cv, importance and report.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::Value;

use spvim_core::{Error, Result};

pub use config::RunConfig;

#[derive(Parser)]
#[command(name = "spvim", version, about = "Spatial variable importance for UK-PLS and spatial random forests")]
pub struct Cli {
    /// Flat `key = value` file; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub workers: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset CSV and a JSON sidecar.
    Simulate(SimulateArgs),
    /// Fit a model and save it as JSON.
    Fit(FitArgs),
    /// Predict at new sites with a saved model.
    Predict(PredictArgs),
    /// k-fold cross-validation.
    Cv(CvArgs),
    /// Quantile-substitution importance trajectories and contrasts.
    Importance(ImportanceArgs),
    /// Summarize a saved model and, optionally, an importance report.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SimulateArgs {
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    p: Option<String>,
    #[arg(long)]
    extent: Option<String>,
    /// Rescale the mean to its target variance (true by default).
    #[arg(long)]
    calibrate: Option<String>,
    #[arg(long)]
    mc_draws: Option<String>,
}

#[derive(Args)]
pub struct DataArgs {
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    transform: Option<String>,
}

#[derive(Args)]
pub struct ModelArgs {
    /// ukpls, spatrf, rf (non-spatial forest) or intercept (cv only).
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    link: Option<String>,
    #[arg(long)]
    components: Option<String>,
    #[arg(long)]
    max_components: Option<String>,
    #[arg(long)]
    selection_folds: Option<String>,
    #[arg(long)]
    n_trees: Option<String>,
    #[arg(long)]
    mtry: Option<String>,
    #[arg(long)]
    min_leaf: Option<String>,
    #[arg(long)]
    max_depth: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    #[arg(long)]
    bootstrap: Option<String>,
}

#[derive(Args)]
pub struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
pub struct PredictArgs {
    #[arg(long)]
    model_file: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
pub struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    folds: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
pub struct ImportanceArgs {
    #[arg(long)]
    model_file: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    metric: Option<String>,
    /// Comma-separated levels, e.g. 0.25,0.5,0.75.
    #[arg(long)]
    quantiles: Option<String>,
    /// full or weights; full by default up to 300 sites.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    model_file: Option<String>,
    #[arg(long)]
    importance_file: Option<String>,
    /// Written to stdout when omitted.
    #[arg(long)]
    out: Option<String>,
}

/// Parses arguments, merges the config file and runs the command.
/// Clap errors (including help and version requests) are returned as is.
pub fn run<I, T>(args: I) -> std::result::Result<Result<Value>, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Cli::command().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    Ok(execute(&matches, name, sub))
}

fn execute(top: &clap::ArgMatches, name: &str, sub: &clap::ArgMatches) -> Result<Value> {
    let mut flags = RunConfig::default();
    for id in sub.ids() {
        let id = id.as_str();
        if id == "config" || sub.value_source(id) != Some(ValueSource::CommandLine) {
            continue;
        }
        if let Ok(Some(v)) = sub.try_get_one::<String>(id) {
            flags.set(id, v)?;
        }
    }
    let file = match sub
        .try_get_one::<PathBuf>("config")
        .ok()
        .flatten()
        .or_else(|| top.try_get_one::<PathBuf>("config").ok().flatten())
    {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    let cfg = file.merge(flags);
    match name {
        "simulate" => commands::simulate(&cfg),
        "fit" => commands::fit(&cfg),
        "predict" => commands::predict(&cfg),
        "cv" => commands::cv(&cfg),
        "importance" => commands::importance(&cfg),
        "report" => commands::report(&cfg),
        other => Err(Error::Config(format!("unknown command `{other}`"))),
    }
}

/// `{"error": {"kind", "message"}}` for a failed run.
pub fn error_json(kind: &str, message: &str) -> Value {
    serde_json::json!({"error": {"kind": kind, "message": message}})
}
