//! `homodiv`: every pipeline stage and the evaluation harness as
//! subcommands. Outputs are JSON records (plus CSV for tables), each
//! carrying the effective configuration and build version.

mod commands;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homodiv_core::config::GlobalConfig;
use homodiv_core::remote::network_calls;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "homodiv", version, about = "Find and diversify homogeneous attributes in text-to-image outputs")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "HOMODIV_CONFIG")]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set filter.lambda=0.2`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Synthetic scorer, mock image backend and offline LLM. No network.
    #[arg(long, global = true)]
    mock: bool,
    /// Mock image noise; also sets per-seed attribute variation to a third of it.
    #[arg(long, global = true, requires = "mock", value_name = "X")]
    noise: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render images of one prompt.
    Generate(commands::GenerateArgs),
    /// Recover a hard prompt that describes a set of images.
    Invert(commands::InvertArgs),
    /// Ask the language model for expansion candidates.
    Expand(commands::ExpandArgs),
    /// Score a candidate pool against the original images and keep the best.
    Filter(commands::FilterArgs),
    /// Generate, invert, expand, filter and render for one prompt.
    Pipeline(commands::PipelineArgs),
    /// Mean pairwise image distance over a prompt list for one condition.
    Evaluate(commands::EvaluateArgs),
    /// Compare identification strategies with everything else fixed.
    CompareHdi(commands::CompareArgs),
    /// Run the interactive session HTTP service.
    Serve(commands::ServeArgs),
}

/// Moves every `--set` occurrence in front of the subcommand. Clap keeps only
/// one level's values for a global argument, which would silently drop
/// overrides given on both sides of the subcommand.
fn hoist_overrides(args: Vec<OsString>) -> Vec<OsString> {
    let mut it = args.into_iter();
    let mut head: Vec<OsString> = it.next().into_iter().collect();
    let mut rest = Vec::new();
    let mut literal = false;
    while let Some(a) = it.next() {
        if literal {
            rest.push(a);
        } else if a == "--" {
            literal = true;
            rest.push(a);
        } else if a == "--set" {
            head.push(a);
            head.extend(it.next());
        } else if a.to_str().is_some_and(|s| s.starts_with("--set=")) {
            head.push(a);
        } else {
            rest.push(a);
        }
    }
    head.extend(rest);
    head
}

fn load_config(g: &GlobalArgs) -> Result<GlobalConfig, CliError> {
    let mut overrides = g.overrides.clone();
    if let Some(x) = g.noise {
        overrides.push(format!("backend.noise={x}"));
        overrides.push(format!("backend.variation={}", x / 3.0));
    }
    let mut config = GlobalConfig::load(g.config.as_deref(), &overrides)?;
    if g.mock {
        config.force_mock();
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let config = load_config(&cli.global)?;
    let out = match cli.command {
        Command::Generate(a) => commands::generate(&config, a),
        Command::Invert(a) => commands::invert(config, a),
        Command::Expand(a) => commands::expand(&config, a),
        Command::Filter(a) => commands::filter(config, a),
        Command::Pipeline(a) => commands::pipeline(&config, a),
        Command::Evaluate(a) => commands::evaluate(config, a),
        Command::CompareHdi(a) => commands::compare_hdi(config, a),
        Command::Serve(a) => commands::serve(config, a),
    }?;
    if cli.global.mock && network_calls() > 0 {
        return Err(CliError::Internal(format!(
            "mock run made {} network calls",
            network_calls()
        )));
    }
    Ok(out)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();
    let cli = match Cli::try_parse_from(hoist_overrides(std::env::args_os().collect())) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.record());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(v: Vec<OsString>) -> Vec<String> {
        v.into_iter().map(|s| s.into_string().unwrap()).collect()
    }

    #[test]
    fn overrides_from_both_sides_survive() {
        let args = ["homodiv", "--set", "a.b=1", "evaluate", "--set=c.d=2", "--n", "3", "--", "--set"];
        let hoisted = strs(hoist_overrides(args.iter().map(OsString::from).collect()));
        assert_eq!(hoisted, ["homodiv", "--set", "a.b=1", "--set=c.d=2", "evaluate", "--n", "3", "--", "--set"]);
        let cli = Cli::try_parse_from(hoist_overrides(
            ["homodiv", "--set", "a.b=1", "evaluate", "--set", "c.d=2"].iter().map(OsString::from).collect(),
        ))
        .unwrap();
        assert_eq!(cli.global.overrides, ["a.b=1", "c.d=2"]);
    }
}
