use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use shortform::report::{Command, Run, RunConfig, RunError};
use shortform::schema::QuestionnaireSchema;

/// Questionnaire shortening: simulate or ingest cohorts, select predictive
/// items over repeated splits, and search for severity-preserving subsets.
#[derive(Parser)]
#[command(name = "shortform", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML run configuration; defaults throughout when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Schema JSON; the ATEC layout when absent.
    #[arg(long, global = true)]
    schema: Option<PathBuf>,
    /// Cohort CSV; overrides the configured path.
    #[arg(long, global = true)]
    cohort: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Generate a synthetic cohort and its sidecar.
    Simulate,
    /// Parse and normalize a cohort file.
    Ingest,
    /// Best-subsets models over repeated train/test shuffles.
    Longitudinal,
    /// Severity-preserving subset searches.
    Severity,
    /// Descriptive summary of a cohort.
    Report,
}

fn run(cli: &Cli) -> Result<(), RunError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.threads.is_some() {
        config.threads = cli.threads;
    }
    if cli.schema.is_some() {
        config.schema = cli.schema.clone();
    }
    if cli.cohort.is_some() {
        config.cohort = cli.cohort.clone();
    }
    let schema = match &config.schema {
        Some(p) => QuestionnaireSchema::load(p).map_err(|e| match e {
            shortform::schema::SchemaError::Io { source, .. } => RunError::Io {
                path: p.clone(),
                source,
            },
            e => RunError::Validation(format!("{}: {e}", p.display())),
        })?,
        None => QuestionnaireSchema::atec(),
    };
    let threads = config.threads;
    let run = Run::new(config, schema, &cli.out)?;
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::Ingest => Command::Ingest,
        Cmd::Longitudinal => Command::Longitudinal,
        Cmd::Severity => Command::Severity,
        Cmd::Report => Command::Report,
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| RunError::Validation(format!("thread pool: {e}")))?;
    let outputs = pool.install(|| run.execute(command))?;
    println!("{}", run.header_line());
    for f in &outputs.files {
        println!("wrote {}", cli.out.join(f).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
