//! QFLD binary field files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | content                          |
//! |--------|------|----------------------------------|
//! | 0      | 4    | magic `QFLD`                     |
//! | 4      | 4    | format version, `u32`            |
//! | 8      | 4    | `n`, `u32`                       |
//! | 12     | 8    | period, `f64`                    |
//! | 20     | 4    | axis order tag `X0-3`            |
//! | 24     | 8n⁴  | values, `f64`, last axis fastest |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{make_grid, ScalarField};

pub const MAGIC: [u8; 4] = *b"QFLD";
pub const FORMAT_VERSION: u32 = 1;
/// Axes stored in order x₀, x₁, x₂, x₃ with x₃ varying fastest.
pub const AXIS_TAG: [u8; 4] = *b"X0-3";
pub const HEADER_LEN: usize = 24;

pub fn encode_field(field: &ScalarField) -> Vec<u8> {
    let g = field.grid();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * field.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(g.n() as u32).to_le_bytes());
    out.extend_from_slice(&g.period().to_le_bytes());
    out.extend_from_slice(&AXIS_TAG);
    for v in field.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_field(bytes: &[u8]) -> Result<ScalarField> {
    if bytes.len() < HEADER_LEN || bytes[0..4] != MAGIC {
        return Err(Error::Format("not a QFLD file".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported QFLD version {version} (expected {FORMAT_VERSION})"
        )));
    }
    if bytes[20..24] != AXIS_TAG {
        return Err(Error::Format(format!(
            "unknown axis order tag {:?}",
            String::from_utf8_lossy(&bytes[20..24])
        )));
    }
    let n = word(8) as usize;
    let period = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let grid = make_grid(n, period)?;
    let expected = 8 * grid.total_points();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header n = {n} requires {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ScalarField::new(grid, values)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_field(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_field(field))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<ScalarField> {
    decode_field(&fs::read(path)?)
}
