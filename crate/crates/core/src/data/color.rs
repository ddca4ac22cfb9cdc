//! Flow visualisation on the Middlebury colour wheel: hue encodes direction,
//! saturation encodes magnitude relative to `max_mag`.

use super::image::Image;
use crate::error::{Error, Result};

const SEGMENTS: [(usize, [i32; 3], [i32; 3]); 6] = [
    // (length, start colour, per-step direction)
    (15, [255, 0, 0], [0, 1, 0]),   // red -> yellow
    (6, [255, 255, 0], [-1, 0, 0]), // yellow -> green
    (4, [0, 255, 0], [0, 0, 1]),    // green -> cyan
    (11, [0, 255, 255], [0, -1, 0]), // cyan -> blue
    (13, [0, 0, 255], [1, 0, 0]),   // blue -> magenta
    (6, [255, 0, 255], [0, 0, -1]), // magenta -> red
];

/// The 55-entry wheel, colours in `[0, 255]`.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(55);
    for (len, start, dir) in SEGMENTS {
        for i in 0..len {
            let step = (255 * i / len) as i32;
            wheel.push([0, 1, 2].map(|c| (start[c] + dir[c] * step) as f64));
        }
    }
    wheel
}

/// Colour of one flow vector already divided by the normalising magnitude.
pub fn flow_color(u: f64, v: f64, wheel: &[[f64; 3]]) -> [u8; 3] {
    let n = wheel.len();
    let rad = u.hypot(v);
    // normalise signed zeros so (m, 0) and (m, -0) agree
    let a = (-v + 0.0).atan2(-u + 0.0) / std::f64::consts::PI;
    let fk = (a + 1.0) / 2.0 * (n - 1) as f64;
    let k0 = (fk.floor() as usize).min(n - 1);
    let k1 = (k0 + 1) % n;
    let f = fk - k0 as f64;
    [0, 1, 2].map(|c| {
        let col = ((1.0 - f) * wheel[k0][c] + f * wheel[k1][c]) / 255.0;
        let col = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
        (255.0 * col).floor().clamp(0.0, 255.0) as u8
    })
}

/// Renders a `2 x H x W` flow as interleaved 8-bit RGB.
///
/// Without `max_mag` the largest magnitude in the field is used.
pub fn flow_to_color(flow: &Image, max_mag: Option<f64>) -> Result<Vec<u8>> {
    if flow.channels != 2 {
        return Err(Error::dim("flow_to_color", "channels", 2, flow.channels));
    }
    let (u, v) = (flow.plane(0), flow.plane(1));
    let max = max_mag.unwrap_or_else(|| {
        u.iter()
            .zip(v)
            .map(|(a, b)| a.hypot(*b))
            .filter(|m| m.is_finite())
            .fold(0.0, f64::max)
    });
    let norm = if max > 0.0 { max } else { 1.0 };
    let wheel = color_wheel();
    Ok(u.iter()
        .zip(v)
        .flat_map(|(&a, &b)| {
            if a.is_finite() && b.is_finite() {
                flow_color(a / norm, b / norm, &wheel)
            } else {
                [0, 0, 0]
            }
        })
        .collect())
}
