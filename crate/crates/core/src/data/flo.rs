//! Middlebury `.flo` files: magic `202021.25` (f32), width and height (i32),
//! then row-major interleaved `(u, v)` pairs (f32), all little-endian.

use std::fs;
use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};

pub const FLO_MAGIC: f32 = 202021.25;
const HEADER: usize = 12;

/// Encodes a `2 x H x W` flow image.
pub fn encode_flo(flow: &Image) -> Result<Vec<u8>> {
    if flow.channels != 2 {
        return Err(Error::dim("write_flo", "channels", 2, flow.channels));
    }
    let (h, w) = (flow.height, flow.width);
    let mut out = Vec::with_capacity(HEADER + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            out.extend_from_slice(&(flow.at(0, y, x) as f32).to_le_bytes());
            out.extend_from_slice(&(flow.at(1, y, x) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<Image> {
    let word = |i: usize| -> Result<[u8; 4]> {
        bytes
            .get(i..i + 4)
            .map(|b| b.try_into().expect("four bytes"))
            .ok_or_else(|| Error::format(path, i as u64, "truncated header"))
    };
    let magic = f32::from_le_bytes(word(0)?);
    if magic != FLO_MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {magic}")));
    }
    let w = i32::from_le_bytes(word(4)?);
    let h = i32::from_le_bytes(word(8)?);
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, 4, format!("invalid size {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER))
        .ok_or_else(|| Error::format(path, 4, "size overflows"))?;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            bytes.len() as u64,
            format!("truncated payload, expected {need} bytes"),
        ));
    }
    if bytes.len() > need {
        return Err(Error::format(path, need as u64, "trailing bytes after payload"));
    }
    let mut flow = Image::zeros(2, h, w);
    for y in 0..h {
        for x in 0..w {
            let i = HEADER + 8 * (y * w + x);
            flow.set(0, y, x, f32::from_le_bytes(word(i)?) as f64);
            flow.set(1, y, x, f32::from_le_bytes(word(i + 4)?) as f64);
        }
    }
    Ok(flow)
}

pub fn read_flo(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes, path)
}

pub fn write_flo(flow: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_flo(flow)?).map_err(|e| Error::io(path, e))
}
