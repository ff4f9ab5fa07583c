//! Minimal reader/writer for the unquoted comma-separated files used
//! throughout (graph, datasets, reports).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) struct Table {
    pub file: String,
    pub header: Vec<String>,
    /// `(line number, cells)`; line numbers are 1-based and count the header.
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header = match lines.next() {
            Some((_, l)) => split(l),
            None => {
                return Err(Error::Schema {
                    file,
                    row: 1,
                    msg: "missing header".into(),
                })
            }
        };
        let rows = lines.map(|(i, l)| (i + 1, split(l))).collect();
        Ok(Self { file, header, rows })
    }

    pub fn expect_header(&self, want: &[&str]) -> Result<()> {
        if self.header != want {
            return Err(self.err(1, format!("expected header {:?}, found {:?}", want.join(","), self.header.join(","))));
        }
        Ok(())
    }

    pub fn err(&self, row: usize, msg: impl Into<String>) -> Error {
        Error::Schema {
            file: self.file.clone(),
            row,
            msg: msg.into(),
        }
    }

    pub fn parse<T: std::str::FromStr>(&self, row: usize, col: &str, cell: &str) -> Result<T> {
        cell.trim()
            .parse()
            .map_err(|_| self.err(row, format!("column {col}: cannot parse {cell:?}")))
    }
}

fn split(line: &str) -> Vec<String> {
    line.split(',').map(|c| c.trim().to_string()).collect()
}

/// Writes `header` then `rows`, creating parent directories.
pub(crate) fn write(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut out = String::new();
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
