//! KITTI flow PNGs: 16-bit RGB with `u = (r - 2^15) / 64`,
//! `v = (g - 2^15) / 64` and `b` the validity flag.

use std::path::Path;

use super::image::Image;
use super::pngio;
use crate::error::{Error, Result};

const OFFSET: f64 = 32768.0;
const SCALE: f64 = 64.0;

fn encode_component(v: f64) -> Result<u16> {
    let q = (v * SCALE + OFFSET).round();
    if !(0.0..=65535.0).contains(&q) {
        return Err(Error::Domain(format!("flow component {v} outside the KITTI range")));
    }
    Ok(q as u16)
}

/// Returns the `2 x H x W` flow and the `1 x H x W` validity mask.
pub fn read_kitti_png(path: &Path) -> Result<(Image, Image)> {
    let raw = pngio::read(path)?;
    if !raw.sixteen_bit {
        return Err(Error::format(path, 0, "expected a 16-bit image"));
    }
    if raw.channels != 3 {
        return Err(Error::format(
            path,
            0,
            format!("expected 3 channels, found {}", raw.channels),
        ));
    }
    let (h, w) = (raw.height, raw.width);
    let mut flow = Image::zeros(2, h, w);
    let mut valid = Image::zeros(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let px = &raw.samples[3 * (y * w + x)..3 * (y * w + x) + 3];
            flow.set(0, y, x, (px[0] as f64 - OFFSET) / SCALE);
            flow.set(1, y, x, (px[1] as f64 - OFFSET) / SCALE);
            valid.set(0, y, x, f64::from(u8::from(px[2] > 0)));
        }
    }
    Ok((flow, valid))
}

/// `valid` defaults to all ones. Components are rounded to the 1/64 px grid.
pub fn write_kitti_png(flow: &Image, valid: Option<&Image>, path: &Path) -> Result<()> {
    if flow.channels != 2 {
        return Err(Error::dim("write_kitti_png", "channels", 2, flow.channels));
    }
    let (h, w) = (flow.height, flow.width);
    if let Some(m) = valid {
        if (m.channels, m.height, m.width) != (1, h, w) {
            return Err(Error::dim(
                "write_kitti_png",
                "mask shape",
                format!("1x{h}x{w}"),
                format!("{}x{}x{}", m.channels, m.height, m.width),
            ));
        }
    }
    let mut samples = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            samples.push(encode_component(flow.at(0, y, x))?);
            samples.push(encode_component(flow.at(1, y, x))?);
            samples.push(u16::from(valid.is_none_or(|m| m.at(0, y, x) > 0.5)));
        }
    }
    pngio::write(path, w, h, 3, true, &samples)
}
