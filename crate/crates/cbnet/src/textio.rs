//! Helpers for the crate's versioned text formats.
//!
//! All on-disk artifacts are comma-separated text with LF line endings, a
//! `# <format> v<N>` first line, and a fixed header row. Parse errors name
//! the offending row and column.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

/// Error raised while reading one of the versioned text formats.
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: expected version line `{expected}`, found `{found}`")]
    Version {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: expected header `{expected}`, found `{found}`")]
    Header {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path}: row {row}: expected {expected} columns, found {found}")]
    ColumnCount {
        path: String,
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("{path}: row {row}, column `{column}`: invalid value `{value}`: {reason}")]
    Field {
        path: String,
        row: usize,
        column: String,
        value: String,
        reason: String,
    },
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

/// A parsed file body: metadata comment lines plus data rows with their
/// 1-based line numbers.
#[derive(Debug)]
pub struct Rows {
    pub path: String,
    /// `key=value` pairs from `# key=value ...` comment lines between the
    /// version line and the header.
    pub meta: Vec<(String, String)>,
    pub rows: Vec<(usize, Vec<String>)>,
}

/// Read a versioned CSV file: check the version line, collect optional
/// `# key=value` metadata lines, check the header, split the remaining
/// non-empty lines into fields.
pub fn read_versioned(path: &Path, version_line: &str, header: &str) -> Result<Rows, ParseError> {
    let text = fs::read_to_string(path).map_err(|source| ParseError::Io {
        path: display(path),
        source,
    })?;
    read_versioned_str(&text, &display(path), version_line, header)
}

/// [`read_versioned`] over an in-memory string; `path` is used only for
/// error messages.
pub fn read_versioned_str(
    text: &str,
    path: &str,
    version_line: &str,
    header: &str,
) -> Result<Rows, ParseError> {
    let path = path.to_string();
    let mut lines = text.lines().enumerate().peekable();
    let (_, first) = lines.next().unwrap_or((0, ""));
    if first.trim() != version_line {
        return Err(ParseError::Version {
            path: path.clone(),
            expected: version_line.to_string(),
            found: first.to_string(),
        });
    }
    let mut meta = Vec::new();
    while let Some((_, line)) = lines.peek() {
        let line = line.trim();
        if !line.starts_with('#') {
            break;
        }
        for pair in line.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = pair.split_once('=') {
                meta.push((k.to_string(), v.to_string()));
            }
        }
        lines.next();
    }
    let (_, header_line) = lines.next().unwrap_or((0, ""));
    if header_line.trim() != header {
        return Err(ParseError::Header {
            path: path.clone(),
            expected: header.to_string(),
            found: header_line.to_string(),
        });
    }
    let expected_cols = header.split(',').count();
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if fields.len() != expected_cols {
            return Err(ParseError::ColumnCount {
                path: path.clone(),
                row: idx + 1,
                expected: expected_cols,
                found: fields.len(),
            });
        }
        rows.push((idx + 1, fields));
    }
    Ok(Rows {
        path: path.clone(),
        meta,
        rows,
    })
}

impl Rows {
    /// Fetch a required metadata entry.
    pub fn meta_value(&self, key: &str) -> Result<&str, ParseError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| ParseError::Invalid {
                path: self.path.clone(),
                reason: format!("missing `# {key}=...` metadata line"),
            })
    }

    /// Parse field `col_idx` of a row as `T`, naming row and column on failure.
    pub fn parse<T: std::str::FromStr>(
        &self,
        row: &(usize, Vec<String>),
        col_idx: usize,
        col_name: &str,
    ) -> Result<T, ParseError>
    where
        T::Err: std::fmt::Display,
    {
        row.1[col_idx].parse::<T>().map_err(|e| ParseError::Field {
            path: self.path.clone(),
            row: row.0,
            column: col_name.to_string(),
            value: row.1[col_idx].clone(),
            reason: e.to_string(),
        })
    }

    /// Like [`parse`](Self::parse) but maps the empty field to `None`.
    pub fn parse_opt<T: std::str::FromStr>(
        &self,
        row: &(usize, Vec<String>),
        col_idx: usize,
        col_name: &str,
    ) -> Result<Option<T>, ParseError>
    where
        T::Err: std::fmt::Display,
    {
        if row.1[col_idx].is_empty() {
            return Ok(None);
        }
        self.parse(row, col_idx, col_name).map(Some)
    }

    pub fn invalid(&self, reason: impl Into<String>) -> ParseError {
        ParseError::Invalid {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    pub fn field_error(
        &self,
        row: &(usize, Vec<String>),
        col_idx: usize,
        col_name: &str,
        reason: impl Into<String>,
    ) -> ParseError {
        ParseError::Field {
            path: self.path.clone(),
            row: row.0,
            column: col_name.to_string(),
            value: row.1[col_idx].clone(),
            reason: reason.into(),
        }
    }
}

/// Format a float with at most four decimals, trimming trailing zeros.
/// Values quantized to 1e-4 round-trip exactly through this representation.
pub fn fmt_fixed4(v: f64) -> String {
    let mut s = format!("{v:.4}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".to_string();
    }
    s
}

/// Shortest representation of `v` that parses back to the identical f64.
pub fn fmt_exact(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v}").unwrap();
    s
}

/// Quantize to four decimal places.
pub fn quantize4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

/// Write `content` to `path`, creating parent directories as needed.
pub fn write_file(path: &Path, content: &str) -> Result<(), ParseError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ParseError::Io {
            path: display(path),
            source,
        })?;
    }
    fs::write(path, content).map_err(|source| ParseError::Io {
        path: display(path),
        source,
    })
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed4_trims_and_round_trips() {
        assert_eq!(fmt_fixed4(3.0), "3");
        assert_eq!(fmt_fixed4(3.1000), "3.1");
        assert_eq!(fmt_fixed4(-0.0), "0");
        assert_eq!(fmt_fixed4(12.3456), "12.3456");
        let v = quantize4(12.345_678_9);
        assert_eq!(fmt_fixed4(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn exact_round_trips_arbitrary_f64() {
        for v in [1.0 / 3.0, 1e-300, -42.424_242_424_242, f64::MAX] {
            assert_eq!(fmt_exact(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = std::env::temp_dir().join("cbnet_textio_test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.csv");
        fs::write(&path, "# other v1\na,b\n1,2\n").unwrap();
        let err = read_versioned(&path, "# mine v1", "a,b").unwrap_err();
        assert!(matches!(err, ParseError::Version { .. }));
    }
}
