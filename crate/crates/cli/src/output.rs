use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::args::Format;

/// A subcommand's result: a JSON document, its tabular CSV rendering and the
/// names of failed checks (empty iff the command passes).
pub struct Report {
    pub json: Value,
    pub csv: Vec<u8>,
    pub failures: Vec<String>,
}

impl Report {
    pub fn new<J: Serialize, R: Serialize>(json: &J, rows: &[R]) -> anyhow::Result<Self> {
        let mut csv = Vec::new();
        streamcrf::io::write_csv_rows(&mut csv, rows)?;
        Ok(Self {
            json: serde_json::to_value(json)?,
            csv,
            failures: Vec::new(),
        })
    }

    /// Records `name` as failed unless `ok`.
    pub fn check(&mut self, ok: bool, name: impl Into<String>) {
        if !ok {
            self.failures.push(name.into());
        }
    }

    /// Adds the pass flag and failure list to the JSON document.
    fn finished_json(&self) -> Value {
        let mut doc = self.json.clone();
        if let Value::Object(map) = &mut doc {
            map.insert("pass".into(), json!(self.failures.is_empty()));
            map.insert("failures".into(), json!(self.failures));
        }
        doc
    }
}

pub fn emit(report: &Report, format: Format, out: Option<&Path>) -> anyhow::Result<()> {
    let bytes = match format {
        Format::Json => {
            let mut b = serde_json::to_vec_pretty(&report.finished_json())?;
            b.push(b'\n');
            b
        }
        Format::Csv => report.csv.clone(),
    };
    match out {
        Some(path) => std::fs::write(path, bytes)?,
        None => std::io::stdout().lock().write_all(&bytes)?,
    }
    Ok(())
}

pub fn failure_json(command: &str, status: &str, failures: &[String]) -> String {
    json!({ "command": command, "status": status, "failures": failures }).to_string()
}
