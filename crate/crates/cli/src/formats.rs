//! Text and binary array formats.
//!
//! Value matrices are CSV files with one row per time step and one column
//! per node, no header. Empty fields and `NaN` mark missing readings; lines
//! starting with `#` are skipped. Little-endian `.npy` files holding a 2-D
//! `f8` or `f4` array are accepted as well.
//!
//! Edge lists are CSV with the header `from,to,cost`; `cost` may be empty.

use std::fs;
use std::io::Write;
use std::path::Path;

use adgcrnn_core::dataset::RawSeries;
use adgcrnn_core::graph::Edge;
use adgcrnn_core::Tensor;

use crate::error::{CliError, Result};

/// Loads an `L × N` value matrix, picking the format from the extension.
pub fn read_values(path: &Path) -> Result<RawSeries> {
    let values = if path.extension().is_some_and(|e| e == "npy") {
        read_npy(path)?
    } else {
        read_values_csv(path)?
    };
    Ok(RawSeries::from_values_with_nan(values)?)
}

fn parse_value(field: &str) -> Option<f64> {
    let field = field.trim();
    if field.is_empty() || field.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    field.parse().ok()
}

pub fn read_values_csv(path: &Path) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut width = None;
    let mut data = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(CliError::Parse {
                path: path.into(),
                line,
                message: format!("row {} has {} columns, expected {expected}", rows + 1, record.len()),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let v = parse_value(field).ok_or_else(|| CliError::Parse {
                path: path.into(),
                line,
                message: format!("row {}, column {}: {field:?} is not a number", rows + 1, col + 1),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| CliError::Format {
        path: path.into(),
        message: "no data rows".into(),
    })?;
    Ok(Tensor::new(vec![rows, width], data)?)
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Read {
            path: path.into(),
            source,
        },
        kind => CliError::Parse {
            path: path.into(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Reads a C-ordered 2-D little-endian `f8`/`f4` array.
pub fn read_npy(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(CliError::read(path))?;
    let bad = |message: &str| CliError::Format {
        path: path.into(),
        message: message.into(),
    };
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(bad("not an npy file"));
    }
    let (header_len, offset) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 if bytes.len() >= 12 => (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12),
        _ => return Err(bad("unsupported npy version")),
    };
    let header = bytes
        .get(offset..offset + header_len)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad("truncated header"))?;
    let width = if header.contains("'<f8'") {
        8
    } else if header.contains("'<f4'") {
        4
    } else {
        return Err(bad("only little-endian f8 or f4 arrays are supported"));
    };
    if header.contains("'fortran_order': True") {
        return Err(bad("Fortran-ordered arrays are not supported"));
    }
    let shape_text = header
        .split("'shape':")
        .nth(1)
        .and_then(|s| s.split('(').nth(1))
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("missing shape"))?;
    let shape: Vec<usize> = shape_text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    if shape.len() != 2 {
        return Err(bad("expected a 2-D array"));
    }
    let body = &bytes[offset + header_len..];
    if body.len() != shape[0] * shape[1] * width {
        return Err(bad("payload size does not match the shape"));
    }
    let data = if width == 8 {
        body.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        body.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect()
    };
    Ok(Tensor::new(shape, data)?)
}

/// Writes a rank-2 tensor as CSV, `NaN` for non-finite gaps.
pub fn write_matrix_csv(path: &Path, header: Option<&[String]>, matrix: &Tensor) -> Result<()> {
    let cols = matrix.shape()[matrix.rank() - 1];
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in matrix.data().chunks(cols) {
        let fields: Vec<String> = row.iter().map(|v| format_value(*v)).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Shortest text that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v}")
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut file = fs::File::create(path).map_err(CliError::write(path))?;
    file.write_all(text.as_bytes()).map_err(CliError::write(path))
}

pub fn read_edges(path: &Path) -> Result<Vec<Edge>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let (Some(from), Some(to)) = (column("from"), column("to")) else {
        return Err(CliError::Format {
            path: path.into(),
            message: "edge list needs a `from,to[,cost]` header".into(),
        });
    };
    let cost = column("cost");
    let mut edges = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |what: &str| CliError::Parse {
            path: path.into(),
            line,
            message: format!("invalid {what}"),
        };
        let id = |i: usize, what: &str| -> Result<usize> {
            record
                .get(i)
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err(what))
        };
        let c = match cost.and_then(|i| record.get(i)) {
            None | Some("") => None,
            Some(f) => Some(f.parse().map_err(|_| parse_err("cost"))?),
        };
        edges.push(Edge {
            from: id(from, "from")?,
            to: id(to, "to")?,
            cost: c,
        });
    }
    Ok(edges)
}

pub fn write_edges(path: &Path, edges: &[Edge]) -> Result<()> {
    let mut out = String::from("from,to,cost\n");
    for e in edges {
        let cost = e.cost.map(format_value).unwrap_or_default();
        out.push_str(&format!("{},{},{cost}\n", e.from, e.to));
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_one_nan_masks_one_entry() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        fs::write(&path, "1,2\n3,NaN\n5,6\n").unwrap();
        let raw = read_values(&path).unwrap();
        assert_eq!(raw.values.shape(), &[3, 2]);
        assert_eq!(raw.mask.data().iter().filter(|&&m| m == 0.0).count(), 1);
    }

    #[test]
    fn ragged_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.csv");
        fs::write(&path, "1,2\n3,4\n5\n").unwrap();
        let err = read_values_csv(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
        assert!(err.to_string().contains("row 3"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn npy_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.npy");
        let header = "{'descr': '<f8', 'fortran_order': False, 'shape': (2, 3), }";
        let mut bytes = b"\x93NUMPY\x01\x00".to_vec();
        let padded = format!("{header:<118}\n");
        bytes.extend_from_slice(&(padded.len() as u16).to_le_bytes());
        bytes.extend_from_slice(padded.as_bytes());
        for v in [1.0f64, 2.0, f64::NAN, 4.0, 5.0, 6.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&path, bytes).unwrap();
        let raw = read_values(&path).unwrap();
        assert_eq!(raw.values.shape(), &[2, 3]);
        assert_eq!(raw.missing_count(), 1);
    }

    #[test]
    fn edges_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let edges = vec![
            Edge {
                from: 0,
                to: 1,
                cost: Some(2.5),
            },
            Edge {
                from: 1,
                to: 2,
                cost: None,
            },
        ];
        write_edges(&path, &edges).unwrap();
        assert_eq!(read_edges(&path).unwrap(), edges);
    }

    #[test]
    fn bad_edge_id_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        fs::write(&path, "from,to,cost\n0,1,1\nx,2,1\n").unwrap();
        let err = read_edges(&path).unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }
}
