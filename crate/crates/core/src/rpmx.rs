//! RPMX binary matrix files, CSV ingestion and label files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"RPMX"`               |
//! | 4      | 2    | version, `u16` = 1            |
//! | 6      | 1    | dtype (0 = f32, 1 = f64)      |
//! | 7      | 1    | reserved, 0                   |
//! | 8      | 8    | rows, `u64`                   |
//! | 16     | 8    | cols, `u64`                   |
//! | 24     | ...  | rows×cols values, row-major   |
//!
//! f32 payloads are widened to f64 on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

pub const MAGIC: &[u8; 4] = b"RPMX";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(m: &DenseMatrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(0);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    match dtype {
        Dtype::F64 => {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for v in m.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Decodes an RPMX byte buffer; `origin` is only used in error messages.
pub fn decode(bytes: &[u8], origin: &Path) -> Result<DenseMatrix> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(origin.to_path_buf()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    let dtype_byte = bytes[6];
    let dtype = match (version, dtype_byte) {
        (VERSION, 0) => Dtype::F32,
        (VERSION, 1) => Dtype::F64,
        _ => {
            return Err(Error::UnsupportedVersion {
                version,
                dtype: dtype_byte,
            })
        }
    };
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::ShapeMismatch(format!("{rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * dtype.width() {
        return Err(Error::ShapeMismatch(format!(
            "{}: header says {rows}x{cols} but payload has {} bytes",
            origin.display(),
            payload.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    DenseMatrix::new(rows, cols, data)
}

/// Writes `m` as an f64 RPMX file.
pub fn save_matrix(m: &DenseMatrix, path: &Path) -> Result<()> {
    save_matrix_as(m, path, Dtype::F64)
}

pub fn save_matrix_as(m: &DenseMatrix, path: &Path, dtype: Dtype) -> Result<()> {
    fs::write(path, encode(m, dtype)).map_err(|e| Error::io(path, e))
}

/// Loads an RPMX file, or a headerless CSV when the extension is `.csv`.
pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    if has_extension(path, "csv") {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        return parse_csv(&text, path);
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn parse_csv(text: &str, origin: &Path) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::ManifestParse(format!(
                        "{}:{}: bad number {tok:?}",
                        origin.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    DenseMatrix::from_rows(&rows)
}

/// Writes labels as UTF-8 text, one integer per LF-terminated line.
pub fn save_labels(labels: &[usize], path: &Path) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 3);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a text label file or an RPMX n×1 label matrix.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    if has_extension(path, "rpmx") {
        let m = load_matrix(path)?;
        if m.cols() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "{}: label matrix must be n x 1, got {}x{}",
                path.display(),
                m.rows(),
                m.cols()
            )));
        }
        return m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::ManifestParse(format!(
                        "{}: label {i} is not a non-negative integer ({v})",
                        path.display()
                    )))
                }
            })
            .collect();
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|_| {
                Error::ManifestParse(format!("{}:{}: bad label {l:?}", path.display(), i + 1))
            })
        })
        .collect()
}
