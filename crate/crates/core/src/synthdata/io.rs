//! File formats: binary PPM images, raw disparity maps and pose JSON.
//!
//! Disparity files start with a 16-byte header — the magic `DISPF32\0`, then
//! height and width as little-endian `u32` — followed by `H·W` little-endian
//! `f32` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{io_err, Error, Result};
use crate::matchpose::{PoseRecord, SE3Pose};

pub const DISPARITY_MAGIC: &[u8; 8] = b"DISPF32\0";

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(rgb);
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads a binary (P6) PPM with maxval 255. Comments are not supported.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        return Err(format_err(path, format!("expected P6 magic, found {:?}", fields[0])));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad PPM header field {s:?}")));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    let data = bytes.get(pos..).unwrap_or_default();
    if data.len() != w * h * 3 {
        return Err(format_err(path, format!("expected {} raster bytes, found {}", w * h * 3, data.len())));
    }
    Ok((w, h, data.to_vec()))
}

pub fn write_disparity(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    assert_eq!(values.len(), width * height);
    let mut buf = Vec::with_capacity(16 + 4 * values.len());
    buf.extend_from_slice(DISPARITY_MAGIC);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))
}

pub fn read_disparity(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() < 16 || &bytes[..8] != DISPARITY_MAGIC {
        return Err(format_err(path, "missing disparity header"));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() != 4 * w * h {
        return Err(format_err(path, format!("expected {} disparity bytes, found {}", 4 * w * h, body.len())));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((w, h, values))
}

pub fn write_pose(path: &Path, pose: &SE3Pose) -> Result<()> {
    let text = serde_json::to_string_pretty(&pose.to_record()).expect("pose serializes");
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_pose(path: &Path) -> Result<SE3Pose> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let rec: PoseRecord = serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    Ok(SE3Pose::from_record(&rec))
}
