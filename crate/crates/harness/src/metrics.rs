//! Append-only CSV emission.
//!
//! Every writer appends rows under a fixed header; the header is written
//! only when the file is new or empty. Floats use Rust's shortest
//! round-trip formatting, so identical runs produce identical bytes.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use crate::error::{HarnessError, Result};

pub struct CsvWriter<W: Write> {
    out: W,
}

impl CsvWriter<std::fs::File> {
    /// Open a CSV file for appending, writing `header` first if the file is
    /// new or empty.
    pub fn append(path: &Path, header: &str) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)
                    .map_err(HarnessError::io(parent.display().to_string()))?;
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(HarnessError::io(path.display().to_string()))?;
        let empty = file
            .metadata()
            .map(|m| m.len() == 0)
            .map_err(HarnessError::io(path.display().to_string()))?;
        let mut writer = Self { out: file };
        if empty {
            writer.line(header)?;
        }
        Ok(writer)
    }
}

impl<W: Write> CsvWriter<W> {
    /// Wrap an arbitrary sink (always writes the header).
    pub fn new(mut out: W, header: &str) -> Result<Self> {
        writeln!(out, "{header}").map_err(HarnessError::io("csv sink"))?;
        Ok(Self { out })
    }

    pub fn line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(HarnessError::io("csv sink"))
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        self.line(&fields.join(","))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(HarnessError::io("csv sink"))
    }
}

/// Shortest round-trip decimal form of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}
