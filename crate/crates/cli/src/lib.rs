//! Command-line front end for the ranking workbench.
//!
//! Every command resolves a [`config::RunConfig`], does its work under the
//! output directory and finishes by writing `<command>-manifest.json`
//! there. The manifest can be fed back through `--config` to repeat the
//! run.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub mod commands;
pub mod config;
pub mod manifest;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "ltr", version, about = "Train, evaluate and compare learning-to-rank models")]
pub struct Cli {
    /// TOML config file, or a `*-manifest.json` from an earlier run.
    #[arg(long, global = true, env = "LTR_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "LTR_SEED")]
    pub seed: Option<u64>,
    /// Output directory for artifacts, reports and the manifest.
    #[arg(long, global = true, env = "LTR_OUT")]
    pub out: Option<PathBuf>,
    /// One of tiny, desk, paper-ratio, paper.
    #[arg(long, global = true, env = "LTR_PRESET")]
    pub preset: Option<String>,
    /// Override any config key, e.g. `--set training.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and split it by time into train/test.
    Generate,
    /// Train a neural ranker or LambdaMART on a dataset.
    Train(TrainArgs),
    /// Score models on a dataset and write per-model metric reports.
    Evaluate(EvalArgs),
    /// Compare models against a baseline with Welch confidence intervals.
    Compare(EvalArgs),
    /// Welch two-sample test on two files of per-unit samples.
    Abtest(AbtestArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation dataset for per-epoch NDCG.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// `neural` or `lambdamart`.
    #[arg(long)]
    pub family: Option<String>,
    /// `two_tower`, `cross_encoder` or `transformer`.
    #[arg(long)]
    pub architecture: Option<String>,
    /// `ce` or `rn`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `name=path`, a bare artifact path, `@oracle`, `@ideal` or `@random`;
    /// repeatable.
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[arg(long)]
    pub baseline: Option<String>,
}

#[derive(Debug, Args)]
pub struct AbtestArgs {
    #[arg(long)]
    pub a: Option<PathBuf>,
    #[arg(long)]
    pub b: Option<PathBuf>,
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub confidence: Option<f64>,
}

fn path_value(p: &std::path::Path) -> Value {
    Value::from(p.to_string_lossy().into_owned())
}

impl Cli {
    pub fn command_name(&self) -> &'static str {
        match self.command {
            Command::Generate => "generate",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::Compare(_) => "compare",
            Command::Abtest(_) => "abtest",
            Command::Gradcheck => "gradcheck",
        }
    }

    pub fn overrides(&self) -> Overrides {
        let mut flags: Vec<(String, Value)> = Vec::new();
        let mut put = |key: &str, v: Value| flags.push((key.to_string(), v));
        match &self.command {
            Command::Train(a) => {
                if let Some(p) = &a.train {
                    put("data.train", path_value(p));
                }
                if let Some(p) = &a.valid {
                    put("data.test", path_value(p));
                }
                for (key, v) in [
                    ("model.family", &a.family),
                    ("model.architecture", &a.architecture),
                    ("loss.kind", &a.loss),
                    ("model.name", &a.name),
                ] {
                    if let Some(v) = v {
                        put(key, Value::from(v.as_str()));
                    }
                }
            }
            Command::Evaluate(a) | Command::Compare(a) => {
                if let Some(p) = &a.data {
                    put("data.test", path_value(p));
                }
                if !a.models.is_empty() {
                    put("eval.models", Value::from(a.models.clone()));
                }
                if let Some(b) = &a.baseline {
                    put("eval.baseline", Value::from(b.as_str()));
                }
            }
            Command::Abtest(a) => {
                if let Some(p) = &a.a {
                    put("abtest.a", path_value(p));
                }
                if let Some(p) = &a.b {
                    put("abtest.b", path_value(p));
                }
                if let Some(c) = &a.column {
                    put("abtest.column", Value::from(c.as_str()));
                }
                if let Some(c) = a.confidence {
                    put("abtest.confidence", Value::from(c));
                }
            }
            Command::Generate | Command::Gradcheck => {}
        }
        Overrides {
            config: self.config.clone(),
            preset: self.preset.clone(),
            seed: self.seed,
            out: self.out.clone(),
            set: self.set.clone(),
            flags,
        }
    }

    pub fn resolve<I>(&self, env: I) -> Result<RunConfig>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut cfg = config::resolve(&self.overrides(), env)?;
        if matches!(self.command, Command::Train(_)) {
            cfg.fill_architecture_defaults();
        }
        Ok(cfg)
    }
}

/// What a finished command reports back to the caller.
#[derive(Debug)]
pub struct Outcome {
    /// Process exit status: 0 only if the command fully succeeded.
    pub exit_code: i32,
    pub manifest: manifest::RunManifest,
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = cli.resolve(std::env::vars())?;
    commands::dispatch(cli.command_name(), &cfg)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run(&Cli::try_parse_from(args)?)
}
