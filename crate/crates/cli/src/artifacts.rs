//! Files written by the commands: CSV tables and the JSON run report.

use std::fs;
use std::path::{Path, PathBuf};

use baryflow::pipeline::{ConvergenceReport, SCHEMA_VERSION};
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Output of `git describe` at build time.
pub const GIT_DESCRIBE: &str = env!("BARYFLOW_GIT_DESCRIBE");

/// Self-contained record of a run: the full resolved config, build version
/// and wall times of each stage.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub git_describe: String,
    pub config: serde_json::Value,
    /// Stage name and wall time in milliseconds, in execution order.
    pub wall_ms: Vec<(String, f64)>,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub convergence: Option<ConvergenceReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub results: Option<serde_json::Value>,
}

impl RunReport {
    pub fn new<C: Serialize>(command: &str, config: &C) -> CliResult<Self> {
        let config = serde_json::to_value(config).map_err(|e| CliError::config(format!("cannot snapshot config: {e}")))?;
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            git_describe: GIT_DESCRIBE.to_string(),
            config,
            wall_ms: Vec::new(),
            artifacts: Vec::new(),
            convergence: None,
            results: None,
        })
    }

    pub fn time(&mut self, stage: &str, ms: f64) {
        self.wall_ms.push((stage.to_string(), ms));
    }

    pub fn write(&mut self, dir: &Path) -> CliResult<PathBuf> {
        self.artifacts.push("report.json".to_string());
        let text = serde_json::to_string_pretty(self).map_err(|e| baryflow::Error::Parse(e.to_string()))?;
        write_text(dir, "report.json", &(text + "\n"))
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// Simple CSV table with a header row.
#[derive(Debug, Clone, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Fixed-width float formatting for tables.
pub fn num(x: f64) -> String {
    format!("{x:.6}")
}
