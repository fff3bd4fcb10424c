//! `sidkit`: end-to-end personalization runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 partial failure, 3 total failure.

mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::Value;

use sidkit_core::describe::DescriptionCase;

use crate::config::{parse_override, RunConfig};
use crate::run::{Ctx, Tally, UsageError};

#[derive(Debug, Parser)]
#[command(
    name = "sidkit",
    version,
    about = "Personalization runs: describe, tune, sample, evaluate, inspect"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set tune.iterations=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override, global = true)]
    overrides: Vec<(String, Value)>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Subjects processed in parallel.
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
    /// Restrict to these subject ids. Repeatable.
    #[arg(long = "subject", global = true)]
    subjects: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train descriptions for every reference image.
    Describe {
        /// 1-4 or a case name such as CASE3_SID.
        #[arg(long, value_parser = parse_case)]
        case: Option<DescriptionCase>,
    },
    /// Segment the subject in every reference image.
    Segment,
    /// Fine-tune one handle per subject.
    Tune,
    /// Sample every manifest prompt from each handle.
    Sample,
    /// Compute SA, NSD and TA per subject and prompt, plus aggregates.
    Evaluate {
        #[arg(long)]
        encoder: Option<String>,
    },
    /// Render identifier cross-attention maps over generated images.
    Attn {
        /// Token to visualize instead of the identifier.
        #[arg(long)]
        token: Option<String>,
    },
    /// Aggregate reports from one or more runs into a table and plots.
    Report {
        #[arg(long = "runs", num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Describe { .. } => "describe",
            Command::Segment => "segment",
            Command::Tune => "tune",
            Command::Sample => "sample",
            Command::Evaluate { .. } => "evaluate",
            Command::Attn { .. } => "attn",
            Command::Report { .. } => "report",
        }
    }
}

fn parse_case(s: &str) -> Result<DescriptionCase, String> {
    if let Ok(n) = s.parse::<u8>() {
        return DescriptionCase::from_number(n).ok_or_else(|| format!("no case {n}; expected 1-4"));
    }
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown case {s:?}"))
}

fn absolute(p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p)
    }
}

fn execute(cli: Cli) -> anyhow::Result<Tally> {
    let mut overrides = cli.overrides;
    let mut flag = |key: &str, v: Value| overrides.push((key.to_string(), v));
    if let Some(p) = cli.run_dir {
        flag("run_dir", Value::String(absolute(p).to_string_lossy().into_owned()));
    }
    if let Some(p) = cli.manifest {
        flag("manifest", Value::String(absolute(p).to_string_lossy().into_owned()));
    }
    if let Some(j) = cli.jobs {
        flag("jobs", j.into());
    }
    if !cli.subjects.is_empty() {
        flag("subjects", serde_json::to_value(&cli.subjects)?);
    }
    match &cli.command {
        Command::Describe { case: Some(c) } => flag("case", serde_json::to_value(c)?),
        Command::Evaluate { encoder: Some(e) } => flag("encoder.id", Value::String(e.clone())),
        Command::Attn { token: Some(t) } => flag("attn.token", Value::String(t.clone())),
        _ => {}
    }
    let (cfg, resolved) =
        RunConfig::load(cli.config.as_deref(), &overrides).map_err(|e| run::usage(format!("{e:#}")))?;

    if let Command::Report { runs, out } = &cli.command {
        let runs = if runs.is_empty() {
            vec![cfg.run_dir()]
        } else {
            runs.clone()
        };
        return commands::report(&cfg.run_dir(), &runs, out.as_deref());
    }
    let ctx = Ctx::new(cfg, &resolved)?;
    match cli.command {
        Command::Describe { .. } => commands::describe(&ctx),
        Command::Segment => commands::segment(&ctx),
        Command::Tune => commands::tune(&ctx),
        Command::Sample => commands::sample(&ctx),
        Command::Evaluate { .. } => commands::evaluate(&ctx),
        Command::Attn { .. } => commands::attn(&ctx),
        Command::Report { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let name = cli.command.name();
    match execute(cli) {
        Ok(tally) => {
            println!("{name}: {} ok, {} failed", tally.ok, tally.failures.len());
            for f in &tally.failures {
                eprintln!("  {}: {}", f.unit, f.error);
            }
            ExitCode::from(tally.exit_code())
        }
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
