use std::fs::File;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};

/// Decoded samples; 16-bit files are widened from big-endian pairs.
pub(crate) struct RawPng {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub sixteen_bit: bool,
    pub samples: Vec<u16>,
}

fn channels_of(c: ColorType) -> Option<usize> {
    match c {
        ColorType::Grayscale => Some(1),
        ColorType::GrayscaleAlpha => Some(2),
        ColorType::Rgb => Some(3),
        ColorType::Rgba => Some(4),
        ColorType::Indexed => None,
    }
}

pub(crate) fn decode(bytes: &[u8], path: &Path) -> Result<RawPng> {
    let fail = |e: png::DecodingError| Error::format(path, 0, e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, 0, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    let channels = channels_of(info.color_type)
        .ok_or_else(|| Error::format(path, 0, "palette images are not supported"))?;
    let (width, height) = (info.width as usize, info.height as usize);
    let n = width * height * channels;
    let samples = match info.bit_depth {
        BitDepth::Eight => buf[..n].iter().map(|&b| b as u16).collect(),
        BitDepth::Sixteen => buf[..2 * n]
            .chunks_exact(2)
            .map(|p| u16::from_be_bytes([p[0], p[1]]))
            .collect(),
        d => return Err(Error::format(path, 0, format!("unsupported bit depth {d:?}"))),
    };
    Ok(RawPng {
        width,
        height,
        channels,
        sixteen_bit: info.bit_depth == BitDepth::Sixteen,
        samples,
    })
}

pub(crate) fn read(path: &Path) -> Result<RawPng> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Writes interleaved samples; `sixteen_bit` selects the sample width.
pub(crate) fn write(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    sixteen_bit: bool,
    samples: &[u16],
) -> Result<()> {
    let colour = match channels {
        1 => ColorType::Grayscale,
        3 => ColorType::Rgb,
        c => return Err(Error::dim("write_png", "channels", "1 or 3", c)),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(colour);
    let data: Vec<u8> = if sixteen_bit {
        enc.set_depth(BitDepth::Sixteen);
        samples.iter().flat_map(|s| s.to_be_bytes()).collect()
    } else {
        enc.set_depth(BitDepth::Eight);
        samples.iter().map(|&s| s.min(255) as u8).collect()
    };
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&data).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
