//! `timix`: command-line pipeline for text-aware image mixing.
//!
//! Exit codes: 0 on success, 1 when inputs or flags are invalid (nothing is
//! written), 2 when the run fails while working (partial outputs are removed).

mod chart;
mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use timix::error::Error;

use commands::{AblateArgs, MixArgs, ReportArgs, TrainArgs, TrainTppArgs, VerifyMiArgs};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "timix", version, about = "Text-aware image mixing pipeline")]
struct Cli {
    /// JSON run config. Flags override it; TIMIX_SEED overrides its seed.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print errors as one JSON object on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Mix manifest images pairwise with text-aware windows.
    Mix(MixArgs),
    /// Train the patch scorer on grounded boxes and save a checkpoint.
    TrainTpp(TrainTppArgs),
    /// Train the toy dual encoder with one mixing strategy.
    Train(TrainArgs),
    /// Compare the ablation variants over several seeds.
    Ablate(AblateArgs),
    /// Fuzz the mutual-information bounds on random discrete distributions.
    VerifyMi(VerifyMiArgs),
    /// Render metrics CSVs to SVG charts and a text summary.
    Report(ReportArgs),
}

fn error_kind(e: &Error) -> String {
    format!("{e:?}").chars().take_while(|c| c.is_alphanumeric()).collect()
}

fn fail(json: bool, kind: &str, message: &str, code: u8) -> ExitCode {
    if json {
        let v = serde_json::json!({ "error": kind, "message": message, "exit_code": code });
        eprintln!("{v}");
    } else {
        eprintln!("error: {message}");
    }
    ExitCode::from(code)
}

fn run(cli: &Cli) -> Result<String, Error> {
    if cli.threads == 0 {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let config = cli.config.as_deref();
    match &cli.command {
        Command::Mix(a) => commands::mix(a, config),
        Command::TrainTpp(a) => commands::train_tpp(a, config),
        Command::Train(a) => commands::train(a, config),
        Command::Ablate(a) => commands::ablate(a, config),
        Command::VerifyMi(a) => commands::verify_mi(a, config),
        Command::Report(a) => commands::report(a, config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let json = std::env::args().any(|a| a == "--json-errors");
            if json {
                let message = e.to_string();
                return fail(true, "Usage", message.trim_end(), EXIT_VALIDATION);
            }
            let _ = e.print();
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    match run(&cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME };
            fail(cli.json_errors, &error_kind(&e), &e.to_string(), code)
        }
    }
}
