//! Binary feature files.
//!
//! Layout, all little-endian: `b"FSEQ"`, u16 version (1), u32 frames T,
//! u32 dim D, u16 dtype code (1 = f32), then T·D f32 values, frame-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FSEQ";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u16 = 1;
pub const HEADER_LEN: usize = 16;

pub fn encode_features(features: &Tensor<f32>) -> Result<Vec<u8>> {
    let (frames, dim) = features.require_2d("encode_features")?;
    let (t, d) = match (u32::try_from(frames), u32::try_from(dim)) {
        (Ok(t), Ok(d)) => (t, d),
        _ => return Err(Error::InvalidArgument("feature extents exceed u32".into())),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + features.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in features.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let corrupt = |msg: String| Error::Corrupt {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!(
            "header truncated at {} bytes",
            bytes.len()
        )));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let (frames, dim) = (u32_at(6) as usize, u32_at(10) as usize);
    let dtype = u16_at(14);
    if dtype != DTYPE_F32 {
        return Err(corrupt(format!("unsupported dtype code {dtype}")));
    }
    if frames == 0 || dim == 0 {
        return Err(corrupt(format!("empty extents {frames}×{dim}")));
    }
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("extents overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(corrupt(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(&[frames, dim], data)
}

pub fn save_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let bytes = encode_features(features)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

/// Reads one frame per line of comma- or whitespace-separated numbers.
/// Blank lines are skipped; every frame must have the same width.
pub fn import_csv(path: &Path) -> Result<Tensor<f32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let rows = parse_number_rows::<f32>(&text, path)?;
    Tensor::from_rows(&rows)
}

pub(crate) fn parse_number_rows<T: std::str::FromStr>(
    text: &str,
    path: &Path,
) -> Result<Vec<Vec<T>>> {
    let mut rows: Vec<Vec<T>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|tok| {
                tok.parse::<T>()
                    .map_err(|_| parse_err(format!("not a number: {tok:?}")))
            })
            .collect::<Result<Vec<T>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(format!(
                    "{} values, expected {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no rows".into(),
        });
    }
    Ok(rows)
}
