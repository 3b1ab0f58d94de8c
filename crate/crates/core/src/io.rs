//! PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{ColorSpace, ImageBuf};

/// Loads an 8- or 16-bit RGB/RGBA PNG as a gamma-encoded image in `[0, 1]`.
/// Alpha is discarded.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuf> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    let stride = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: color type {other:?}",
                path.display()
            )))
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf)?;
    let bytes = &buf[..frame.buffer_size()];
    let row_bytes = frame.line_size;

    let mut img = ImageBuf::new(width, height, 3, ColorSpace::GammaEncoded);
    let n = width * height;
    let data = img.data_mut();
    match depth {
        png::BitDepth::Eight => {
            for y in 0..height {
                let row = &bytes[y * row_bytes..];
                for x in 0..width {
                    for c in 0..3 {
                        data[c * n + y * width + x] = row[x * stride + c] as f64 / 255.0;
                    }
                }
            }
        }
        png::BitDepth::Sixteen => {
            for y in 0..height {
                let row = &bytes[y * row_bytes..];
                for x in 0..width {
                    for c in 0..3 {
                        let i = 2 * (x * stride + c);
                        let v = u16::from_be_bytes([row[i], row[i + 1]]);
                        data[c * n + y * width + x] = v as f64 / 65535.0;
                    }
                }
            }
        }
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "{}: bit depth {other:?}",
                path.display()
            )))
        }
    }
    Ok(img)
}

/// Quantizes a sample to 8 bits: clamp to `[0, 1]`, round to nearest.
#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB PNG.
pub fn save_png(img: &ImageBuf, path: impl AsRef<Path>) -> Result<()> {
    img.ensure_channels(3)?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let (w, h) = (img.width(), img.height());
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    let n = img.plane_len();
    let data = img.data();
    let mut bytes = Vec::with_capacity(n * 3);
    for i in 0..n {
        for c in 0..3 {
            bytes.push(quantize_u8(data[c * n + i]));
        }
    }
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// All `.png` files in `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Loads every PNG in `dir`, in file-name order.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<ImageBuf>> {
    list_pngs(dir)?.iter().map(load_png).collect()
}
