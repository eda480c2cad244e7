//! CSV and JSON artifact writers.
//!
//! Floats are written with 17 significant digits so they round-trip. Files
//! land via a temporary sibling and a rename.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};

pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// In-memory CSV table with a fixed header.
#[derive(Clone, Debug)]
pub struct Table {
    header: Vec<String>,
    body: String,
}

#[derive(Clone, Debug)]
pub enum Cell {
    Num(f64),
    Int(u64),
    Text(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Self { header, body: String::new() }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width must match the header");
        let line: Vec<String> = row
            .into_iter()
            .map(|c| match c {
                Cell::Num(v) => fmt_f64(v),
                Cell::Int(v) => v.to_string(),
                Cell::Text(s) => s,
                Cell::Empty => String::new(),
            })
            .collect();
        let _ = writeln!(self.body, "{}", line.join(","));
    }

    pub fn render(&self) -> String {
        format!("{}\n{}", self.header.join(","), self.body)
    }

    pub fn rows(&self) -> usize {
        self.body.lines().count()
    }
}

pub fn write_atomic(path: &Path, contents: &str) -> CliResult<()> {
    let io = |source| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(contents.as_bytes()).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn write_table(dir: &Path, name: &str, table: &Table) -> CliResult<()> {
    write_atomic(&dir.join(name), &table.render())
}
