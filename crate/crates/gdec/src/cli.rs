//! Argument parsing and dispatch.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::commands;
use crate::config::{self, Override, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "gdec",
    version,
    about = "Grounded decoding and hallucination evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decode every configured item and write one trace per item.
    Decode(Common),
    /// CHAIR and Cover over a captions file.
    EvalChair(Common),
    /// POPE accuracy, precision, recall and yes-rate.
    EvalPope(Common),
    /// Aggregate per-position PDM over trace files.
    PdmTrace(WithInputs),
    /// Fit the decay rate of a PDM series.
    EstimateLambda(WithInputs),
    /// Build preference pairs for DPO.
    GenPrefs(Common),
    /// Run the fading-memory simulator over decoder arms.
    Simulate(Common),
    /// Serve a mock session over the bridge protocol on stdin/stdout.
    #[command(hide = true)]
    ServeMock(Common),
}

#[derive(Debug, Args)]
pub struct WithInputs {
    #[command(flatten)]
    pub common: Common,
    /// Trace files (override `pdm.traces`).
    pub inputs: Vec<PathBuf>,
    /// Read a series CSV instead of traces.
    #[arg(long)]
    pub series: Option<PathBuf>,
    /// hellinger or rank.
    #[arg(long)]
    pub kind: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub decoder: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub t0: Option<u32>,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub xi: Option<f64>,
    #[arg(long)]
    pub psi: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Master seed; also seeds sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_tokens: Option<u32>,
    /// mock or bridge.
    #[arg(long)]
    pub source: Option<String>,
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any config field as PATH=JSON, e.g. `simulate.n_runs=10`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    fn overrides(&self) -> CliResult<Vec<Override>> {
        let mut ov = Vec::new();
        let mut push = |path: &str, v: Option<Value>| {
            if let Some(v) = v {
                ov.push(Override::new(path, v));
            }
        };
        push("decoder.kind", self.decoder.clone().map(Value::from));
        push("decoder.alpha", self.alpha.map(Value::from));
        push("decoder.lambda", self.lambda.map(Value::from));
        push("decoder.t0", self.t0.map(Value::from));
        push("decoder.mu", self.mu.map(Value::from));
        push("decoder.tau", self.tau.map(Value::from));
        push("decoder.xi", self.xi.map(Value::from));
        push("decoder.psi", self.psi.map(Value::from));
        push("decoder.temperature", self.temperature.map(Value::from));
        push("seed", self.seed.map(Value::from));
        push("decoder.seed", self.seed.map(Value::from));
        push("decoder.max_tokens", self.max_tokens.map(Value::from));
        push("source.kind", self.source.clone().map(Value::from));
        push("source.endpoint", self.endpoint.clone().map(Value::from));
        push(
            "out",
            self.out
                .as_ref()
                .map(|p| Value::from(p.to_string_lossy().into_owned())),
        );
        for s in &self.set {
            ov.push(Override::parse(s)?);
        }
        Ok(ov)
    }

    pub fn resolve(&self) -> CliResult<RunConfig> {
        config::resolve(self.config.as_deref(), &self.overrides()?)
    }
}

impl WithInputs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut ov = self.common.overrides()?;
        if !self.inputs.is_empty() {
            let paths: Vec<Value> = self
                .inputs
                .iter()
                .map(|p| Value::from(p.to_string_lossy().into_owned()))
                .collect();
            ov.push(Override::new("pdm.traces", paths));
        }
        if let Some(s) = &self.series {
            ov.push(Override::new(
                "pdm.series",
                s.to_string_lossy().into_owned(),
            ));
        }
        if let Some(k) = &self.kind {
            ov.push(Override::new("pdm.kind", k.clone()));
        }
        config::resolve(self.common.config.as_deref(), &ov)
    }
}

/// Runs a parsed command, printing short summaries to stderr.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Decode(c) => {
            for p in commands::decode(&c.resolve()?)? {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::EvalChair(c) => commands::eval_chair(&c.resolve()?)?,
        Command::EvalPope(c) => commands::eval_pope(&c.resolve()?)?,
        Command::PdmTrace(w) => {
            let s = commands::pdm_trace(&w.resolve()?)?;
            eprintln!("{} positions", s.len());
        }
        Command::EstimateLambda(w) => {
            let fit = commands::estimate_lambda(&w.resolve()?)?;
            eprintln!(
                "lambda_hat={} intercept={} r_squared={} points={}",
                fit.lambda_hat, fit.intercept, fit.r_squared, fit.points
            );
        }
        Command::GenPrefs(c) => {
            let b = commands::gen_prefs(&c.resolve()?)?;
            eprintln!(
                "{} pairs, {} dropped, {} skipped",
                b.pairs.len(),
                b.dropped,
                b.skipped.len()
            );
        }
        Command::Simulate(c) => {
            let r = commands::simulate(&c.resolve()?)?;
            for a in &r.arms {
                eprintln!(
                    "{}: hallucination rate {:.4} (first quartile {:.4}, last {:.4})",
                    a.label,
                    a.hallucination_rate,
                    a.first_quartile_hallucination_rate,
                    a.last_quartile_hallucination_rate
                );
            }
        }
        Command::ServeMock(c) => commands::serve_mock(&c.resolve()?)?,
    }
    Ok(())
}
