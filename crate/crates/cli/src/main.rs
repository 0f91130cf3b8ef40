use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

use config::RunConfig;
use error::{CliError, EXIT_CONFIG};

#[derive(Debug, Parser)]
#[command(name = "geolp", version, about = "Littlewood-Paley theory on discretized Riemannian tori")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides the config and GEOLP_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for random fields (overrides the config).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for independent experiments.
    #[arg(long, global = true, value_name = "N", default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Eigenvalues of the Laplacian on the configured grid.
    Spectrum,
    /// Per-band energies of a field file.
    Decompose {
        #[arg(long, value_name = "PATH")]
        field: PathBuf,
    },
    /// L2, Sobolev and Besov norms of a field file, or of seeded random fields.
    Norms {
        #[arg(long, value_name = "PATH")]
        field: Option<PathBuf>,
    },
    /// Run the verification suite; exits 1 when any gated check fails.
    Verify,
    /// Print the aggregate CSV of a finished verify run.
    Report {
        /// Report JSON; defaults to reports.json in the output directory.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.jobs == 0 {
        return Err(CliError::config("--jobs must be positive".into()));
    }
    let out = cfg.output_dir(cli.out.as_deref());
    match cli.command {
        Command::Spectrum => commands::spectrum(&cfg, &out),
        Command::Decompose { field } => commands::decompose(&cfg, &field, &out),
        Command::Norms { field } => commands::norms(&cfg, field.as_deref(), &out),
        Command::Verify => commands::verify(&cfg, &out, cli.jobs),
        Command::Report { input } => commands::report(&input.unwrap_or_else(|| out.join(commands::REPORTS_JSON))),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().to_string();
            let detail = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            let err = CliError::new(EXIT_CONFIG, "usage", if detail.is_empty() { msg } else { detail });
            eprintln!("{}", err.line());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code as u8)
        }
    }
}
