//! CSV tables and the JSON summary, written atomically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tempfile::NamedTempFile;

use crate::CliError;

/// Bumped whenever a field of [`Summary`] changes meaning.
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            // shortest representation that parses back to the same value
            Cell::Float(v) => format!("{v:?}"),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.into_error()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub name: String,
    pub mean: f64,
    pub se: f64,
    pub replicates: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckFlag {
    pub name: String,
    pub value: f64,
    pub target: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema_version: &'static str,
    pub command: String,
    pub seed: u64,
    pub replicates: usize,
    pub status: &'static str,
    pub wall_time_seconds: f64,
    pub tables: Vec<String>,
    pub estimates: Vec<Estimate>,
    pub checks: Vec<CheckFlag>,
    pub notes: Vec<String>,
    /// The resolved configuration with every default expanded.
    pub config: serde_json::Value,
}

fn staged(dir: &Path, bytes: &[u8]) -> Result<NamedTempFile, CliError> {
    let mut f = NamedTempFile::new_in(dir)?;
    f.write_all(bytes)?;
    f.as_file().sync_all()?;
    Ok(f)
}

/// Writes `<name>.csv` for every table plus `summary.json` into `dir`.
/// Everything is staged first and renamed into place only once all files
/// are complete.
pub fn write_report(dir: &Path, tables: &[Table], summary: &Summary) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir)?;
    let mut pending = Vec::with_capacity(tables.len() + 1);
    for t in tables {
        pending.push((staged(dir, &t.to_csv()?)?, dir.join(format!("{}.csv", t.name))));
    }
    let mut json = serde_json::to_vec_pretty(summary)?;
    json.push(b'\n');
    pending.push((staged(dir, &json)?, dir.join("summary.json")));
    let mut written = Vec::with_capacity(pending.len());
    for (tmp, path) in pending {
        tmp.persist(&path).map_err(|e| CliError::Io(e.error))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new("x", &["a", "b"]);
        assert_eq!(t.to_csv().unwrap(), b"a,b\n");
    }

    #[test]
    fn floats_round_trip_and_text_is_quoted() {
        let mut t = Table::new("x", &["v", "label"]);
        let values = [0.1 + 0.2, 1e-300, -2.5e17, std::f64::consts::PI, 1.0 / 3.0];
        for v in values {
            t.push(vec![v.into(), "plateau[-0.5,0.5]".into()]);
        }
        let text = String::from_utf8(t.to_csv().unwrap()).unwrap();
        assert!(!text.contains('\r'));
        let mut r = csv::Reader::from_reader(text.as_bytes());
        for (rec, v) in r.records().zip(values) {
            let rec = rec.unwrap();
            assert_eq!(rec[0].parse::<f64>().unwrap().to_bits(), v.to_bits());
            assert_eq!(&rec[1], "plateau[-0.5,0.5]");
        }
    }
}
