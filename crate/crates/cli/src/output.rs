//! Plain CSV and JSON writers. Numbers use the shortest representation that
//! round-trips, so equal results give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// An output directory that remembers what was written to it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(Self { root: root.to_path_buf(), files: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    pub fn write_csv(&mut self, name: &str, table: &Csv) -> Result<(), CliError> {
        self.write_text(name, &table.text)
    }
}

/// Row-by-row CSV builder.
#[derive(Debug, Clone)]
pub struct Csv {
    text: String,
    columns: usize,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let text = header.iter().map(|h| h.as_ref()).collect::<Vec<_>>().join(",") + "\n";
        Self { text, columns: header.len() }
    }

    /// Appends a row of cells already rendered as text.
    pub fn row<S: AsRef<str>>(&mut self, cells: &[S]) {
        debug_assert_eq!(cells.len(), self.columns, "row width differs from header");
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            self.text.push_str(c.as_ref());
        }
        self.text.push('\n');
    }

    pub fn numbers(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.columns, "row width differs from header");
        for (i, v) in values.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            write_num(&mut self.text, *v);
        }
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

/// Shortest round-trip form, switching to an exponent for very small or
/// large magnitudes.
pub fn num(v: f64) -> String {
    let mut s = String::new();
    write_num(&mut s, v);
    s
}

fn write_num(s: &mut String, v: f64) {
    let a = v.abs();
    if v == 0.0 || !v.is_finite() || (1e-4..1e15).contains(&a) {
        write!(s, "{v}")
    } else {
        write!(s, "{v:e}")
    }
    .expect("writing to a String");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut c = Csv::new(&["k", "y"]);
        c.numbers(&[0.0, 1.0]);
        c.numbers(&[1.0, 0.5]);
        c.row(&["2", "x"]);
        assert_eq!(c.as_str(), "k,y\n0,1\n1,0.5\n2,x\n");
        assert_eq!(num(1.5e-49), "1.5e-49");
        assert_eq!(num(-2.5e20), "-2.5e20");
        assert_eq!(num(f64::NAN), "NaN");
        for v in [1.0268311985563266e-49, 0.1 + 0.2, 123456.789] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn writes_into_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(&dir.path().join("nested")).unwrap();
        out.write_json("a.json", &vec![1, 2]).unwrap();
        out.write_text("a.json", "again").unwrap();
        assert_eq!(out.files(), ["a.json"]);
        assert_eq!(fs::read_to_string(out.root().join("a.json")).unwrap(), "again");
    }
}
