//! Matrix file formats and atomic writes.
//!
//! DSVD layout: magic `DSVD`, little-endian `u32` rows, `u32` cols, then
//! `rows * cols` little-endian `f64` values in row-major order. CSV is
//! header-free, one matrix row per line, comma-separated decimals.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DSVD_MAGIC: &[u8; 4] = b"DSVD";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Dsvd,
    Csv,
}

impl MatrixFormat {
    /// `.csv` extension selects CSV; everything else is DSVD.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Dsvd,
        }
    }
}

pub fn encode_dsvd(m: &Matrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(m.rows())
        .map_err(|_| Error::Contract(format!("{} rows exceed the DSVD u32 limit", m.rows())))?;
    let cols = u32::try_from(m.cols())
        .map_err(|_| Error::Contract(format!("{} cols exceed the DSVD u32 limit", m.cols())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.as_slice().len());
    out.extend_from_slice(DSVD_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_dsvd(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.is_empty() {
        return Err(fail(0, "empty file".into()));
    }
    if bytes.len() < 4 || &bytes[..4] != DSVD_MAGIC {
        return Err(fail(0, "bad magic, expected \"DSVD\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| fail(4, format!("dimension overflow for {rows}x{cols}")))?;
    let expected_len = HEADER_LEN
        .checked_add(payload)
        .ok_or_else(|| fail(4, format!("dimension overflow for {rows}x{cols}")))?;
    if bytes.len() < expected_len {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: {rows}x{cols} needs {expected_len} bytes"),
        ));
    }
    if bytes.len() > expected_len {
        return Err(fail(expected_len, "trailing bytes after payload".into()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(HEADER_LEN + 8 * k, "non-finite value".into()));
        }
        data.push(v);
    }
    Matrix::new(rows, cols, data)
}

pub fn encode_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str, path: &Path) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0usize;
    for (line_no, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in trimmed.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: start as u64,
                message: format!("row {}: cannot parse {:?} as a number", line_no + 1, field.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: start as u64,
                    message: format!("row {}: non-finite value", line_no + 1),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: start as u64,
                    message: format!(
                        "ragged row {}: {} fields, expected {}",
                        line_no + 1,
                        row.len(),
                        first.len()
                    ),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: "empty file".into(),
        });
    }
    Matrix::from_rows(&rows)
}

/// Reads a matrix; the format is chosen by extension, or by the DSVD magic.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(DSVD_MAGIC) || MatrixFormat::from_path(path) == MatrixFormat::Dsvd {
        decode_dsvd(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.utf8_error().valid_up_to() as u64,
            message: "invalid UTF-8".into(),
        })?;
        decode_csv(&text, path)
    }
}

pub fn write_matrix(m: &Matrix, path: &Path) -> Result<()> {
    let bytes = match MatrixFormat::from_path(path) {
        MatrixFormat::Dsvd => encode_dsvd(m)?,
        MatrixFormat::Csv => encode_csv(m).into_bytes(),
    };
    write_atomic(path, &bytes)
}

/// Writes to a sibling temp file, then renames over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_sibling(path);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsvd_errors_carry_offsets() {
        let p = Path::new("x.dsvd");
        match decode_dsvd(b"", p) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_dsvd(b"NOPE00000000", p), Err(Error::Format { offset: 0, .. })));

        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let bytes = encode_dsvd(&m).unwrap();
        match decode_dsvd(&bytes[..bytes.len() - 3], p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len() - 3),
            other => panic!("{other:?}"),
        }
        let mut huge = b"DSVD".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_dsvd(&huge, p), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_ragged_row_named() {
        let err = decode_csv("1,2\n3,4\n5\n", Path::new("a.csv")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ragged row 3"), "{msg}");
        assert!(matches!(err, Error::Format { offset: 8, .. }));
        assert!(decode_csv("", Path::new("a.csv")).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let m = Matrix::from_rows(&[vec![0.1, -1e-300, 1.0 / 3.0], vec![2.5e10, 0.0, -7.0]]).unwrap();
        let back = decode_csv(&encode_csv(&m), Path::new("a.csv")).unwrap();
        assert_eq!(back, m);
    }
}
