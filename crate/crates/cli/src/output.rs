//! Tables, summaries and their files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};

use crate::config::Format;
use crate::plot::Plot;
use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    U(u64),
    F(f64),
    S(String),
    B(bool),
}

impl Cell {
    fn text(&self) -> String {
        match self {
            Cell::U(v) => v.to_string(),
            Cell::F(v) => v.to_string(),
            Cell::S(s) => s.clone(),
            Cell::B(b) => b.to_string(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::U(v) => Value::from(*v),
            Cell::F(v) => serde_json::Number::from_f64(*v).map(Value::Number).unwrap_or(Value::Null),
            Cell::S(s) => Value::from(s.as_str()),
            Cell::B(b) => Value::from(*b),
        }
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::U(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::U(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::F(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::S(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::S(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::B(v)
    }
}

/// One output table. `notes` become `#` lines above the CSV header.
#[derive(Debug, Clone)]
pub struct Table {
    /// File suffix; empty for the scenario's primary table.
    pub name: String,
    pub notes: Vec<String>,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&'static str]) -> Self {
        Self { name: name.to_string(), notes: Vec::new(), columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn note(mut self, line: impl Into<String>) -> Self {
        self.notes.push(line.into());
        self
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn stem(&self, scenario: &str) -> String {
        if self.name.is_empty() {
            scenario.to_string()
        } else {
            format!("{scenario}_{}", self.name)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Assertion {
    pub passed: bool,
    pub detail: String,
}

/// Everything a scenario produces.
#[derive(Debug, Clone)]
pub struct Report {
    pub tables: Vec<Table>,
    pub summary: Map<String, Value>,
    pub plot: Plot,
    pub assertion: Option<Assertion>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_csv(table: &Table, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut out = BufWriter::new(file);
    for line in &table.notes {
        writeln!(out, "# {line}").map_err(|e| io_err(path, e))?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&table.columns).map_err(|e| io_err(path, e))?;
    for row in &table.rows {
        w.write_record(row.iter().map(Cell::text)).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn table_json(table: &Table) -> Value {
    let rows: Vec<Value> = table
        .rows
        .iter()
        .map(|r| {
            let obj: Map<String, Value> =
                table.columns.iter().zip(r).map(|(c, v)| (c.to_string(), v.json())).collect();
            Value::Object(obj)
        })
        .collect();
    serde_json::json!({ "notes": table.notes, "columns": table.columns, "rows": rows })
}

fn write_json(value: &Value, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes every table in `format` plus the `<scenario>.summary.json` sidecar.
/// Returns the paths written.
pub fn write_report(report: &Report, scenario: &str, out: &Path, format: Format) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let mut written = Vec::new();
    for table in &report.tables {
        let stem = table.stem(scenario);
        let path = match format {
            Format::Csv => {
                let p = out.join(format!("{stem}.csv"));
                write_csv(table, &p)?;
                p
            }
            Format::Json => {
                let p = out.join(format!("{stem}.json"));
                write_json(&table_json(table), &p)?;
                p
            }
        };
        written.push(path);
    }
    let mut summary = report.summary.clone();
    if let Some(a) = &report.assertion {
        summary.insert("assertion".into(), serde_json::json!({ "passed": a.passed, "detail": a.detail }));
    }
    let path = out.join(format!("{scenario}.summary.json"));
    write_json(&Value::Object(summary), &path)?;
    written.push(path);
    Ok(written)
}
