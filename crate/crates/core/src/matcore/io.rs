//! Matrix fixture formats.
//!
//! Text: a `rows cols` header line followed by `rows` lines of
//! whitespace-separated values.
//!
//! Binary: magic `XMD1`, then `rows` and `cols` as little-endian `u64`,
//! then `rows * cols` little-endian IEEE-754 doubles in row-major order.

use super::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XMD1";

pub fn to_text(m: &Matrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn from_text(text: &str) -> Result<Matrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (hline, header) = lines.next().ok_or(Error::Empty("matrix text"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: hline + 1,
            msg: e.to_string(),
        })?;
    let [rows, cols] = dims[..] else {
        return Err(Error::Parse {
            line: hline + 1,
            msg: "expected `rows cols`".into(),
        });
    };
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (ln, line) = lines.next().ok_or(Error::Parse {
            line: 0,
            msg: format!("expected {rows} data rows"),
        })?;
        let before = data.len();
        for tok in line.split_whitespace() {
            data.push(tok.parse::<f64>().map_err(|e| Error::Parse {
                line: ln + 1,
                msg: format!("{tok:?}: {e}"),
            })?);
        }
        if data.len() - before != cols {
            return Err(Error::Parse {
                line: ln + 1,
                msg: format!("expected {cols} values, found {}", data.len() - before),
            });
        }
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::Parse {
            line: ln + 1,
            msg: "trailing data after matrix".into(),
        });
    }
    Matrix::new(rows, cols, data)
}

pub fn to_bytes(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 20 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing XMD1 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("matrix size overflows".into()))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "{rows}x{cols} matrix needs {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::new(rows, cols, data)
}
