//! Output files. Every file carries the resolved config so a row can be
//! regenerated from its own header.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Config;
use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: Config,
}

impl Provenance {
    pub fn new(command: impl Into<String>, config: &Config) -> Self {
        Provenance {
            tool: "weightscrub",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config: config.clone(),
        }
    }

    fn json_line(&self) -> Result<String, CliError> {
        Ok(serde_json::to_string(self)?)
    }
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// half-written file.
    pub fn write_atomic(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// `{"provenance": ..., <body fields>}` as pretty JSON.
    pub fn write_json(&self, name: &str, provenance: &Provenance, body: impl Serialize) -> Result<PathBuf, CliError> {
        let mut doc = json!({ "provenance": provenance });
        match serde_json::to_value(body)? {
            Value::Object(fields) => {
                for (k, v) in fields {
                    doc[k.as_str()] = v;
                }
            }
            other => doc["result"] = other,
        }
        let mut text = serde_json::to_string_pretty(&doc)?;
        text.push('\n');
        self.write_atomic(name, text.as_bytes())
    }

    /// A CSV whose first line is `# provenance: <json>`.
    pub fn csv(&self, name: &str, provenance: &Provenance, columns: &[&str]) -> Result<CsvRows, CliError> {
        let path = self.path(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut rows = CsvRows {
            out: BufWriter::new(file),
            path,
        };
        rows.line(&format!("# provenance: {}", provenance.json_line()?))?;
        rows.line(&columns.join(","))?;
        Ok(rows)
    }
}

/// Rows are flushed as they are written, so a failed run leaves every
/// completed row on disk.
pub struct CsvRows {
    out: BufWriter<File>,
    path: PathBuf,
}

impl CsvRows {
    fn line(&mut self, text: &str) -> Result<(), CliError> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| CliError::io(&self.path, e))
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.line(&fields.join(","))
    }
}

pub fn field(v: f64) -> String {
    format!("{v}")
}

pub fn opt_field(v: Option<f64>) -> String {
    v.map(field).unwrap_or_default()
}
