use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clinrag::config::{BackendMode, RunConfig};
use clinrag::runner::{load_cases, run_batch, run_cases, BatchSummary, Resources};
use clinrag::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_CASE_FAILURE: u8 = 2;
const EXIT_RESOURCE: u8 = 3;

#[derive(Parser)]
#[command(name = "clinrag", version, about = "Replayable multi-agent diagnostic reasoning over a knowledge graph and guideline corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one case, or every case, and print the final reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        case_id: Option<String>,
    },
    /// Run every case and write summary.json with metrics.
    Batch {
        #[arg(long)]
        config: PathBuf,
    },
    /// Check a config file and print it with defaults filled in.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Batch run against the live endpoint, writing the transcript for later replay.
    Record {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &PathBuf, mode: Option<BackendMode>) -> Result<RunConfig, ExitCode> {
    RunConfig::from_file_with_mode(path, mode).map_err(|e| {
        match e {
            Error::Config(fields) => {
                for f in fields {
                    eprintln!("invalid config: {f}");
                }
            }
            other => eprintln!("invalid config: {other}"),
        }
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn resource_error(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(EXIT_RESOURCE)
}

fn batch(config: &RunConfig) -> Result<ExitCode, ExitCode> {
    let res = Resources::load(config).map_err(resource_error)?;
    let cases = load_cases(&config.cases_path).map_err(resource_error)?;
    let summary = run_batch(&res, &cases).map_err(resource_error)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(exit_for(&summary))
}

fn exit_for(summary: &BatchSummary) -> ExitCode {
    if summary.failed > 0 {
        ExitCode::from(EXIT_CASE_FAILURE)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> Result<ExitCode, ExitCode> {
    match cli.command {
        Command::Validate { config } => {
            let config = load_config(&config, None)?;
            println!("{}", serde_json::to_string_pretty(&config).expect("config serializes"));
            Ok(ExitCode::SUCCESS)
        }
        Command::Batch { config } => batch(&load_config(&config, None)?),
        Command::Record { config } => batch(&load_config(&config, Some(BackendMode::Record))?),
        Command::Run { config, case_id } => {
            let config = load_config(&config, None)?;
            let res = Resources::load(&config).map_err(resource_error)?;
            let mut cases = load_cases(&config.cases_path).map_err(resource_error)?;
            if let Some(id) = case_id {
                cases.retain(|c| c.case_id == id);
                if cases.is_empty() {
                    return Err(resource_error(Error::UnknownCase(id)));
                }
            }
            let mut failed = false;
            for (row, run) in run_cases(&res, &cases) {
                let out = match &run.result {
                    Ok(report) => serde_json::json!({
                        "case_id": row.case_id,
                        "report": report,
                        "trace": run.trace_path,
                        "trace_digest": row.trace_digest,
                    }),
                    Err(e) => {
                        failed = true;
                        eprintln!("case {} failed: {e}", row.case_id);
                        serde_json::json!({
                            "case_id": row.case_id,
                            "error": e.to_string(),
                            "trace": run.trace_path,
                        })
                    }
                };
                println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
            }
            Ok(if failed {
                ExitCode::from(EXIT_CASE_FAILURE)
            } else {
                ExitCode::SUCCESS
            })
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("CLINRAG_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse()).unwrap_or_else(|code| code)
}
