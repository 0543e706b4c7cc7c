//! `htmm`: command-line front end for the `htmm` library.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! numerical failures.

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;

mod commands;
mod config;

use config::{Cli, Command, ConfigFile};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] htmm::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Model(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    if let Some(n) = cli.threads.or(file.threads) {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    match cli.command {
        Command::Train(args) => commands::train(args.or(file.train.unwrap_or_default())),
        Command::Score(args) => commands::score(args.or(file.score.unwrap_or_default())),
        Command::Sample(args) => commands::sample(args.or(file.sample.unwrap_or_default())),
        Command::Gibbs(args) => commands::gibbs(args.or(file.gibbs.unwrap_or_default())),
        Command::Validate(args) => commands::validate(args.or(file.validate.unwrap_or_default())),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("htmm {name}: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_failures_exit_with_two() {
        let numerical = CliError::Model(htmm::Error::Numerical("underflow".into()));
        assert_eq!(numerical.exit_code(), 2);
        assert_eq!(CliError::Usage("bad".into()).exit_code(), 1);
        let io = CliError::io(Path::new("x"), std::io::Error::other("gone"));
        assert_eq!(io.exit_code(), 1);
    }
}
