//! Command-line driver: `train`, `compare` and `profile`.

pub mod profile;
pub mod run;
pub mod settings;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use memdfa_core::{Algorithm, Error};

use settings::{RunArgs, Settings};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Other(_) => EXIT_OTHER,
        }
    }

    pub(crate) fn from_core(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => CliError::Diverged(e.to_string()),
            Error::InvalidArgument { .. } | Error::Parse { .. } | Error::Shape { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Diverged(m) => write!(f, "training diverged: {m}"),
            CliError::Other(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "memdfa", version, about = "Train networks with BP, FA, DFA and MEM-DFA and profile their activation memory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model with one algorithm
    Train {
        /// bp, fa, dfa or memdfa
        #[arg(long)]
        algo: Option<Algorithm>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train with all four algorithms from the same seed
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Summarize a memory.csv
    Profile {
        path: PathBuf,
        /// Also draw the live-bytes curve
        #[arg(long)]
        sparkline: bool,
    },
}

/// Runs the command line and returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let target: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { algo, run } => Settings::resolve(&run, algo, None).and_then(|s| run::cmd_train(&s, out).map(|_| ())),
        Command::Compare { run } => {
            Settings::resolve(&run, None, Some(Algorithm::Bp)).and_then(|s| run::cmd_compare(&s, out).map(|_| ()))
        }
        Command::Profile { path, sparkline } => profile::cmd_profile(&path, sparkline).map(|text| {
            let _ = write!(out, "{text}");
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "memdfa: {e}");
            if e.exit_code() == EXIT_USAGE {
                let _ = writeln!(err, "run `memdfa --help` for usage");
            }
            e.exit_code()
        }
    }
}
