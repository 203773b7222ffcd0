//! PNG reading and writing for RGB images and index masks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::{Shape4, Tensor};

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

fn decode(path: &Path, transform: Transformations) -> Result<(Vec<u8>, png::OutputInfo)> {
    let file = File::open(path).map_err(|e| decode_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(transform);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    buf.truncate(info.buffer_size());
    Ok((buf, info))
}

/// Reads an 8-bit PNG as a `(1, 3, H, W)` tensor in `[0, 1]`. Grayscale is
/// replicated, alpha dropped, palettes expanded.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let (buf, info) = decode(path, Transformations::EXPAND | Transformations::STRIP_16)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(decode_err(path, "palette was not expanded")),
    };
    let mut t = Tensor::zeros(Shape4::new(1, 3, h, w)?)?;
    let plane = h * w;
    let data = t.data_mut();
    for p in 0..plane {
        let px = &buf[p * channels..(p + 1) * channels];
        for c in 0..3 {
            let v = if channels < 3 { px[0] } else { px[c] };
            data[c * plane + p] = v as f32 / 255.0;
        }
    }
    Ok(t)
}

/// Reads an 8-bit single-channel PNG (grayscale or indexed) keeping the raw
/// index values.
pub fn read_index_png(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let (buf, info) = decode(path, Transformations::IDENTITY)?;
    match (info.color_type, info.bit_depth) {
        (ColorType::Grayscale | ColorType::Indexed, BitDepth::Eight) => {}
        (c, d) => {
            return Err(decode_err(
                path,
                format!("index mask must be 8-bit single channel, found {c:?} at {d:?}"),
            ))
        }
    }
    LabelMask::new(info.height as usize, info.width as usize, buf)
}

fn encode(path: &Path, w: usize, h: usize, color: ColorType, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| decode_err(path, e))?;
    writer.write_image_data(data).map_err(|e| decode_err(path, e))?;
    writer.finish().map_err(|e| decode_err(path, e))?;
    Ok(())
}

/// Quantizes `[0, 1]` values to 8 bits, clamping out-of-range values.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes item 0 of a 3-channel tensor as an RGB PNG.
pub fn write_rgb_png(path: impl AsRef<Path>, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.c != 3 {
        return Err(Error::shape("write_rgb_png", format!("expected 3 channels, got {s}")));
    }
    let plane = s.plane();
    let src = image.item(0);
    let mut buf = Vec::with_capacity(plane * 3);
    for p in 0..plane {
        for c in 0..3 {
            buf.push(to_u8(src[c * plane + p]));
        }
    }
    encode(path.as_ref(), s.w, s.h, ColorType::Rgb, &buf)
}

/// Writes an 8-bit grayscale PNG.
pub fn write_gray_png(path: impl AsRef<Path>, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::shape("write_gray_png", format!("{} bytes for {width}x{height}", data.len())));
    }
    encode(path.as_ref(), width, height, ColorType::Grayscale, data)
}

pub fn write_index_png(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    write_gray_png(path, mask.width(), mask.height(), mask.labels())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_at_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut t = Tensor::<f32>::zeros(Shape4::new(1, 3, 2, 3).unwrap()).unwrap();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i * 13 % 256) as f32 / 255.0;
        }
        write_rgb_png(&path, &t).unwrap();
        assert_eq!(read_rgb_png(&path).unwrap(), t);
    }

    #[test]
    fn mask_keeps_raw_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let m = LabelMask::new(2, 2, vec![0, 3, 255, 20]).unwrap();
        write_index_png(&path, &m).unwrap();
        assert_eq!(read_index_png(&path).unwrap(), m);
    }
}
