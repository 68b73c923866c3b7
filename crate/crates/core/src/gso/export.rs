//! Plain-text matrix files.
//!
//! ```text
//! # gridgsp-matrix v1
//! # kind: s_full
//! # format: coo
//! # dim: 24 24
//! # labels: phi:1.a phi:1.b ...
//! 0 0 1.00000000000000000e1
//! ```
//!
//! Dense files carry one whitespace-separated row per line instead of
//! `row col value` triplets. Values use 17 significant digits so a
//! write/read round trip is bit-exact.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

const MAGIC: &str = "# gridgsp-matrix v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    #[default]
    Dense,
    Coo,
}

impl std::str::FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "coo" => Ok(Self::Coo),
            other => Err(Error::InvalidArgument(format!(
                "unknown matrix format `{other}` (expected dense or coo)"
            ))),
        }
    }
}

/// Contents of a matrix file.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixText {
    pub kind: String,
    pub labels: Vec<String>,
    pub matrix: DMatrix<f64>,
}

/// Renders a matrix file.
pub fn render_matrix_text(
    matrix: &DMatrix<f64>,
    kind: &str,
    labels: &[String],
    format: MatrixFormat,
) -> String {
    let mut out = String::new();
    let fmt_name = match format {
        MatrixFormat::Dense => "dense",
        MatrixFormat::Coo => "coo",
    };
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "# kind: {kind}");
    let _ = writeln!(out, "# format: {fmt_name}");
    let _ = writeln!(out, "# dim: {} {}", matrix.nrows(), matrix.ncols());
    let _ = writeln!(out, "# labels: {}", labels.join(" "));
    match format {
        MatrixFormat::Dense => {
            for i in 0..matrix.nrows() {
                let row: Vec<String> = (0..matrix.ncols())
                    .map(|j| format!("{:.17e}", matrix[(i, j)]))
                    .collect();
                let _ = writeln!(out, "{}", row.join(" "));
            }
        }
        MatrixFormat::Coo => {
            for i in 0..matrix.nrows() {
                for j in 0..matrix.ncols() {
                    let v = matrix[(i, j)];
                    if v != 0.0 {
                        let _ = writeln!(out, "{i} {j} {v:.17e}");
                    }
                }
            }
        }
    }
    out
}

/// Writes a matrix file.
pub fn write_matrix_text(
    path: impl AsRef<Path>,
    matrix: &DMatrix<f64>,
    kind: &str,
    labels: &[String],
    format: MatrixFormat,
) -> Result<()> {
    let path = path.as_ref();
    let text = render_matrix_text(matrix, kind, labels, format);
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Reads a matrix file written by [`write_matrix_text`].
pub fn read_matrix_text(path: impl AsRef<Path>) -> Result<MatrixText> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix_text(&text, &path.display().to_string())
}

/// Parses the contents of a matrix file.
pub fn parse_matrix_text(text: &str, context: &str) -> Result<MatrixText> {
    let parse_err = |line: usize, message: String| Error::Parse {
        context: context.to_string(),
        line,
        column: 1,
        message,
    };
    let mut kind = String::new();
    let mut format = None;
    let mut dim = None;
    let mut labels = Vec::new();
    let mut body = Vec::new();
    let mut saw_magic = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            let header = header.trim();
            if line == MAGIC {
                saw_magic = true;
            } else if let Some(v) = header.strip_prefix("kind:") {
                kind = v.trim().to_string();
            } else if let Some(v) = header.strip_prefix("format:") {
                format = Some(v.trim().parse::<MatrixFormat>().map_err(|e| {
                    parse_err(line_no, e.to_string())
                })?);
            } else if let Some(v) = header.strip_prefix("dim:") {
                let parts: Vec<usize> = v
                    .split_whitespace()
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| parse_err(line_no, format!("bad dimension: {e}")))?;
                if parts.len() != 2 {
                    return Err(parse_err(line_no, "dim needs two values".into()));
                }
                dim = Some((parts[0], parts[1]));
            } else if let Some(v) = header.strip_prefix("labels:") {
                labels = v.split_whitespace().map(str::to_string).collect();
            }
            continue;
        }
        body.push((line_no, line));
    }
    if !saw_magic {
        return Err(parse_err(1, "missing matrix file header".into()));
    }
    let format = format.ok_or_else(|| parse_err(1, "missing format header".into()))?;
    let (rows, cols) = dim.ok_or_else(|| parse_err(1, "missing dim header".into()))?;
    let number = |line_no: usize, s: &str| {
        s.parse::<f64>()
            .map_err(|e| parse_err(line_no, format!("bad number `{s}`: {e}")))
    };
    let mut matrix = DMatrix::zeros(rows, cols);
    match format {
        MatrixFormat::Dense => {
            if body.len() != rows {
                return Err(parse_err(
                    body.last().map_or(1, |b| b.0),
                    format!("expected {rows} rows, found {}", body.len()),
                ));
            }
            for (i, (line_no, line)) in body.iter().enumerate() {
                let values: Vec<&str> = line.split_whitespace().collect();
                if values.len() != cols {
                    return Err(parse_err(
                        *line_no,
                        format!("expected {cols} values, found {}", values.len()),
                    ));
                }
                for (j, s) in values.iter().enumerate() {
                    matrix[(i, j)] = number(*line_no, s)?;
                }
            }
        }
        MatrixFormat::Coo => {
            for (line_no, line) in body {
                let parts: Vec<&str> = line.split_whitespace().collect();
                if parts.len() != 3 {
                    return Err(parse_err(line_no, "expected `row col value`".into()));
                }
                let i: usize = parts[0]
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("bad row index: {e}")))?;
                let j: usize = parts[1]
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("bad column index: {e}")))?;
                if i >= rows || j >= cols {
                    return Err(parse_err(line_no, format!("entry ({i}, {j}) out of range")));
                }
                matrix[(i, j)] = number(line_no, parts[2])?;
            }
        }
    }
    if !labels.is_empty() && labels.len() != rows {
        return Err(parse_err(1, format!("{} labels for {rows} rows", labels.len())));
    }
    Ok(MatrixText {
        kind,
        labels,
        matrix,
    })
}

/// SHA-256 of the shape and little-endian entries (column-major), as hex.
pub fn fingerprint(matrix: &DMatrix<f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((matrix.nrows() as u64).to_le_bytes());
    hasher.update((matrix.ncols() as u64).to_le_bytes());
    for v in matrix.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex(&hasher.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
