//! Feature-matrix files.
//!
//! Binary layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `CBMF`                  |
//! | 4      | 4    | u32 format version (= 1)      |
//! | 8      | 8    | u64 rows (frames)             |
//! | 16     | 8    | u64 cols (feature dim)        |
//! | 24     | 8    | f64 frame rate (frames / s)   |
//! | 32     | 8·rows·cols | f64 values, row-major  |
//!
//! Text layout: a first line `frame_rate <value>`, then one frame per line with
//! whitespace-separated values. Lines starting with `#` are ignored.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"CBMF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub features: Tensor<f64>,
    pub frame_rate: f64,
}

pub fn encode_binary(m: &FeatureMatrix) -> Vec<u8> {
    let (rows, cols) = m.features.as_matrix_dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    out.extend_from_slice(&m.frame_rate.to_le_bytes());
    for v in m.features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Data("not a CBMF feature file".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32_at(4);
    if version != FEATURE_VERSION {
        return Err(Error::Data(format!("unsupported feature file version {version}")));
    }
    let rows = u64_at(8) as usize;
    let cols = u64_at(16) as usize;
    let frame_rate = f64::from_bits(u64_at(24));
    if !(frame_rate > 0.0) || cols == 0 || rows == 0 {
        return Err(Error::Data("feature header has invalid frame rate or size".into()));
    }
    let n = rows
        .checked_mul(cols)
        .filter(|n| bytes.len() == HEADER_LEN + 8 * n)
        .ok_or_else(|| Error::Data(format!("feature payload size does not match {rows}x{cols}")))?;
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .take(n)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(FeatureMatrix {
        features: Tensor::new(&[rows, cols], data)?,
        frame_rate,
    })
}

pub fn encode_text(m: &FeatureMatrix) -> String {
    let mut out = format!("frame_rate {}\n", m.frame_rate);
    for r in 0..m.features.rows() {
        let row: Vec<String> = m.features.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn decode_text(text: &str) -> Result<FeatureMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let (hl, header) = lines.next().ok_or_else(|| Error::Data("empty feature file".into()))?;
    let frame_rate = header
        .trim()
        .strip_prefix("frame_rate")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|v| *v > 0.0)
        .ok_or_else(|| Error::Parse {
            line: hl + 1,
            msg: "expected 'frame_rate <positive number>'".into(),
        })?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("'{t}' is not a number"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first().map(Vec::len) {
            if row.len() != first {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {first} values, found {}", row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Data("feature file has no frames".into()));
    }
    Ok(FeatureMatrix {
        features: Tensor::from_rows(&rows)?,
        frame_rate,
    })
}

/// Reads either layout, detected by the magic bytes.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let wrap = |e: Error| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    };
    if bytes.starts_with(FEATURE_MAGIC) {
        decode_binary(&bytes).map_err(wrap)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{}: not UTF-8 text", path.display())))?;
        decode_text(&text).map_err(wrap)
    }
}

pub fn write_features(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    std::fs::write(path.as_ref(), encode_binary(m)).map_err(|e| Error::io(path, e))
}
