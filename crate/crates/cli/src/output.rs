//! Output directory: CSV tables, summary JSON and the run log.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub struct OutputDir {
    dir: PathBuf,
    written: Vec<(String, String)>,
}

/// A table whose first column is time in hours.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push_timed(&mut self, t: f64, values: impl IntoIterator<Item = f64>) {
        let mut row = vec![format!("{t:.6}")];
        row.extend(values.into_iter().map(num));
        self.rows.push(row);
    }

    pub fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }
}

/// Shortest round-trip representation.
pub fn num(v: f64) -> String {
    format!("{v}")
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.dir.join(name);
        fs::write(&p, bytes).map_err(|e| CliError::Other(format!("cannot write {}: {e}", p.display())))?;
        self.written.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn csv(&mut self, name: &str, table: &Table) -> Result<(), CliError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let io = |e: csv::Error| CliError::Other(format!("{name}: {e}"));
        w.write_record(&table.header).map_err(io)?;
        for r in &table.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Other(format!("{name}: {e}")))?;
        self.write(name, &bytes)
    }

    pub fn json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// `summary.json`, listing the SHA-256 of every file written before it.
    pub fn summary(&mut self, mut summary: Value) -> Result<(), CliError> {
        let files: serde_json::Map<String, Value> = self.written.iter().map(|(n, h)| (n.clone(), json!(h))).collect();
        summary["outputs"] = Value::Object(files);
        self.json("summary.json", &summary)
    }
}

/// Logger writing to `run.log` and, for warnings and errors, to stderr.
pub struct RunLog {
    file: Mutex<File>,
}

impl RunLog {
    pub fn install(path: &Path) -> Result<(), CliError> {
        let file = File::create(path).map_err(|e| CliError::Other(format!("cannot create {}: {e}", path.display())))?;
        log::set_boxed_logger(Box::new(RunLog { file: Mutex::new(file) }))
            .map_err(|e| CliError::Other(e.to_string()))?;
        log::set_max_level(log::LevelFilter::Info);
        Ok(())
    }
}

impl log::Log for RunLog {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Info
    }

    fn log(&self, r: &log::Record) {
        if !self.enabled(r.metadata()) {
            return;
        }
        if r.level() <= log::Level::Warn {
            eprintln!("{}: {}", r.level().as_str().to_lowercase(), r.args());
        }
        if let Ok(mut f) = self.file.lock() {
            let _ = writeln!(f, "[{}] {}", r.level(), r.args());
        }
    }

    fn flush(&self) {
        if let Ok(mut f) = self.file.lock() {
            let _ = f.flush();
        }
    }
}
