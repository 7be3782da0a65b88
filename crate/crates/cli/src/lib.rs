// SPDX-License-Identifier: MIT OR Apache-2.0

//! `melab` command-line front end.
//!
//! Every run writes its reports plus a `run.json` provenance record into the
//! output directory and prints a JSON summary on stdout. Exit status is 0 on
//! success, 1 on a usage error and 2 on a data or validation error.

pub mod args;
mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use args::{Cli, Command};
use clap::Parser;

pub const TOOL: &str = "melab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RUN_FILE: &str = "run.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] melab::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Provenance of one invocation. Replaying `invocation` reproduces the
/// run's output files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub invocation: Command,
}

impl RunRecord {
    pub fn new(cmd: &Command) -> Self {
        RunRecord {
            tool: TOOL.into(),
            version: VERSION.into(),
            command: cmd.name().into(),
            seed: commands::seed_of(cmd),
            invocation: cmd.clone(),
        }
    }
}

/// Parses `argv` (program name first) and runs it.
pub fn dispatch<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Runs an already parsed command.
pub fn execute(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    let cmd = match cmd {
        Command::Rerun(r) => {
            let mut replay = load_run(&r.run_json)?.invocation;
            if let (Some(dir), Some(slot)) = (r.out, replay.out_dir_mut()) {
                *slot = dir;
            }
            replay
        }
        other => other,
    };
    let summary = commands::run(&cmd)?;
    let mut dir = cmd.clone();
    let out_dir = dir
        .out_dir_mut()
        .expect("non-rerun commands have an output dir")
        .clone();
    write_json(&out_dir.join(RUN_FILE), &RunRecord::new(&cmd))?;
    let text = serde_json::to_string_pretty(&summary).map_err(melab::Error::from)?;
    writeln!(out, "{text}").map_err(|e| io_err("stdout", e))?;
    Ok(())
}

pub fn load_run(path: &Path) -> CliResult<RunRecord> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let rec: RunRecord = serde_json::from_str(&text).map_err(melab::Error::from)?;
    if rec.tool != TOOL {
        return Err(CliError::Invalid(format!(
            "{}: not a {TOOL} run record",
            path.display()
        )));
    }
    Ok(rec)
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

pub(crate) fn io_err(path: impl AsRef<Path>, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.as_ref().to_path_buf(),
        source,
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(melab::Error::from)?;
    s.push('\n');
    write_text(path, &s)
}
