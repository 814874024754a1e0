//! Single-channel portable float maps (`Pf`), written little-endian with
//! scale `-1.0` and rows stored bottom to top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode(width: usize, height: usize, values: &[f32]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::shape(format!(
            "PFM {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(values.len() * 4);
    for row in (0..height).rev() {
        for v in &values[row * width..(row + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Returns `(width, height, row-major top-to-bottom values)`.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    // four whitespace-separated header tokens, the last followed by one whitespace byte
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PFM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("non-ASCII PFM header".into()))?);
    }
    pos += 1;
    match fields[0] {
        "Pf" => {}
        "PF" => return Err(Error::Format("three-channel PFM is not supported".into())),
        other => return Err(Error::Format(format!("not a PFM file (magic `{other}`)"))),
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PFM dimension `{s}`")));
    let (w, h) = (parse(fields[1])?, parse(fields[2])?);
    let scale: f32 = fields[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale `{}`", fields[3])))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != w * h * 4 {
        return Err(Error::Format(format!(
            "PFM body holds {} bytes, expected {}",
            body.len(),
            w * h * 4
        )));
    }
    let mut values = vec![0f32; w * h];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("4 bytes");
        let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (r, c) = (k / w, k % w);
        values[(h - 1 - r) * w + c] = v;
    }
    Ok((w, h, values))
}

pub fn write(path: &Path, width: usize, height: usize, values: &[f32]) -> Result<()> {
    fs::write(path, encode(width, height, values)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
