use std::fmt;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::Format;

/// Directory against which relative output paths resolve.
pub const OUTPUT_DIR_ENV: &str = "TEMPME_OUTPUT_DIR";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Schedule { text: String, column: usize, msg: String },
    Lib(tempme::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use tempme::Error as E;
        match self {
            CliError::Usage(_) | CliError::Schedule { .. } => 2,
            CliError::Lib(E::Divergence { .. } | E::Io(_)) => 3,
            CliError::Lib(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Schedule { text, column, msg } => {
                writeln!(f, "error: schedule parse error at column {column}: {msg}")?;
                writeln!(f, "  {text}")?;
                write!(f, "  {}^", " ".repeat(column.saturating_sub(1)))
            }
            CliError::Lib(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<tempme::Error> for CliError {
    fn from(e: tempme::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

/// A command's result in both renderings.
pub struct Report {
    pub json: Value,
    pub table: String,
}

pub fn resolve(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if path.is_relative() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<PathBuf, CliError> {
    let path = resolve(path);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, contents)?;
    Ok(path)
}

pub fn emit(report: &Report, format: Format, output: Option<&Path>) -> Result<(), CliError> {
    let text = match format {
        Format::Json => serde_json::to_string_pretty(&report.json)? + "\n",
        Format::Table => report.table.clone(),
    };
    match output {
        Some(p) => {
            write_file(p, text.as_bytes())?;
        }
        None => print!("{text}"),
    }
    Ok(())
}
