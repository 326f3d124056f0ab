pub mod estimate;
pub mod gate;
pub mod mixture;
pub mod simulate;

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Common flags of every command after they have been folded into the
/// configuration.
#[derive(Clone, Debug)]
pub struct Io {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct Tool {
    pub name: &'static str,
    pub version: &'static str,
}

pub const TOOL: Tool = Tool { name: "elastic-hte", version: env!("CARGO_PKG_VERSION") };

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(CliError::io(dir))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(CliError::io(path))
}

pub fn csv_writer(path: &Path) -> CliResult<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(CliError::io(path))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> CliResult<()> {
    w.flush().map_err(CliError::io(path))
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn entries(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// `NA` for undefined table cells.
pub fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Diagnostics left behind when a fit fails numerically.
#[derive(Serialize)]
struct Failure<'a> {
    tool: Tool,
    error: String,
    last_iterate: Option<&'a [f64]>,
}

pub fn record_failure(out: &Path, err: &elastic_hte::Error) -> CliError {
    let last = match err {
        elastic_hte::Error::ConvergenceFailure { last_iterate, .. } => Some(last_iterate.as_slice()),
        _ => None,
    };
    let report = Failure { tool: TOOL, error: err.to_string(), last_iterate: last };
    if create_dir(out).is_ok() {
        // best effort: the primary error is what the caller reports
        let _ = write_json(&out.join("diagnostics.json"), &report);
    }
    match last {
        Some(v) => CliError::Numeric(format!("{err}; last iterate {v:?} (see diagnostics.json)")),
        None => CliError::from(err.clone()),
    }
}
