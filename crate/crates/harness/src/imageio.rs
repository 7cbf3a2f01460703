//! Raster files: PNG (8/16-bit gray, 8-bit RGB) and raw float maps.
//!
//! A float map (`.dmap`) is `"DMAP"`, `u32` width, `u32` height, then
//! `width * height` little-endian `f32` values, row-major. Disparity maps
//! from a monocular estimator are expected in this form.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use convot_core::Image;

use crate::error::{Error, Result};

pub const DMAP_MAGIC: &[u8; 4] = b"DMAP";

fn decode(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Grayscale PNG of depth 8 or 16 as raw integer levels.
pub fn read_gray(path: &Path) -> Result<Image<u16>> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, format!("expected grayscale, got {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data: Vec<u16> = match info.bit_depth {
        png::BitDepth::Eight => (0..h)
            .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter().map(|&v| v as u16))
            .collect(),
        png::BitDepth::Sixteen => (0..h)
            .flat_map(|y| {
                buf[y * info.line_size..y * info.line_size + 2 * w]
                    .chunks_exact(2)
                    .map(|b| u16::from_be_bytes([b[0], b[1]]))
            })
            .collect(),
        d => return Err(Error::format(path, format!("unsupported bit depth {d:?}"))),
    };
    Ok(Image::new(w, h, data)?)
}

pub fn read_rgb(path: &Path) -> Result<Image<[u8; 3]>> {
    let (info, buf) = decode(path)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..h)
        .flat_map(|y| {
            buf[y * info.line_size..y * info.line_size + 3 * w]
                .chunks_exact(3)
                .map(|p| [p[0], p[1], p[2]])
        })
        .collect();
    Ok(Image::new(w, h, data)?)
}

fn encode(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(data).map_err(fail)?;
    writer.finish().map_err(fail)
}

pub fn write_gray8(path: &Path, image: &Image<u8>) -> Result<()> {
    encode(path, image.width, image.height, png::ColorType::Grayscale, png::BitDepth::Eight, &image.data)
}

pub fn write_gray16(path: &Path, image: &Image<u16>) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode(path, image.width, image.height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

pub fn write_rgb(path: &Path, image: &Image<[u8; 3]>) -> Result<()> {
    let bytes: Vec<u8> = image.data.iter().flatten().copied().collect();
    encode(path, image.width, image.height, png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

pub fn read_dmap(path: &Path) -> Result<Image<f32>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    if data.len() < 12 || &data[..4] != DMAP_MAGIC {
        return Err(Error::format(path, "not a float map"));
    }
    let w = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(12));
    if expected != Some(data.len()) {
        return Err(Error::format(path, format!("{} bytes for a {w}x{h} map", data.len())));
    }
    let values = data[12..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(Image::new(w, h, values)?)
}

pub fn write_dmap(path: &Path, image: &Image<f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(12 + 4 * image.data.len());
    bytes.extend_from_slice(DMAP_MAGIC);
    bytes.extend_from_slice(&(image.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(image.height as u32).to_le_bytes());
    for v in &image.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}
