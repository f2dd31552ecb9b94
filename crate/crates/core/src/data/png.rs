//! Grayscale and label-map PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::Array2;
use png::{BitDepth, ColorType};

use crate::error::{Error, Result};

fn image_err(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

struct Raw {
    width: usize,
    height: usize,
    color: ColorType,
    depth: BitDepth,
    bytes: Vec<u8>,
    line: usize,
}

fn decode(path: &Path) -> Result<Raw> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut bytes = vec![0; size];
    let info = reader.next_frame(&mut bytes).map_err(|e| image_err(path, e))?;
    bytes.truncate(info.buffer_size());
    Ok(Raw {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        depth: info.bit_depth,
        bytes,
        line: info.line_size,
    })
}

/// Reads a single-channel PNG at its native range: 16-bit samples as-is,
/// 8-bit samples scaled by 257 onto the 16-bit range.
pub fn read_gray16(path: &Path) -> Result<Array2<u16>> {
    let raw = decode(path)?;
    if raw.color != ColorType::Grayscale {
        return Err(image_err(path, format!("expected grayscale, found {:?}", raw.color)));
    }
    match raw.depth {
        BitDepth::Sixteen => Ok(Array2::from_shape_fn((raw.height, raw.width), |(r, c)| {
            let o = r * raw.line + 2 * c;
            u16::from_be_bytes([raw.bytes[o], raw.bytes[o + 1]])
        })),
        BitDepth::Eight => Ok(Array2::from_shape_fn((raw.height, raw.width), |(r, c)| {
            raw.bytes[r * raw.line + c] as u16 * 257
        })),
        other => Err(image_err(path, format!("unsupported bit depth {other:?}"))),
    }
}

/// Reads a grayscale PNG and maps it onto `[0, 1]`.
pub fn read_unit(path: &Path) -> Result<Array2<f32>> {
    Ok(read_gray16(path)?.mapv(|v| v as f32 / 65535.0))
}

/// Reads a label map stored as 8-bit palette indices or 8-bit gray values.
pub fn read_labels(path: &Path) -> Result<Array2<u8>> {
    let raw = decode(path)?;
    if !matches!(raw.color, ColorType::Indexed | ColorType::Grayscale) || raw.depth != BitDepth::Eight {
        return Err(image_err(
            path,
            format!("expected an 8-bit label image, found {:?} {:?}", raw.color, raw.depth),
        ));
    }
    Ok(Array2::from_shape_fn((raw.height, raw.width), |(r, c)| raw.bytes[r * raw.line + c]))
}

fn encode(path: &Path, width: usize, height: usize, color: ColorType, depth: BitDepth, palette: Option<Vec<u8>>, data: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(depth);
    if let Some(p) = palette {
        encoder.set_palette(p);
    }
    let mut writer = encoder.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

pub fn write_gray16(path: &Path, image: &Array2<u16>) -> Result<()> {
    let (h, w) = image.dim();
    let data: Vec<u8> = image.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode(path, w, h, ColorType::Grayscale, BitDepth::Sixteen, None, &data)
}

pub fn write_gray8(path: &Path, image: &Array2<u8>) -> Result<()> {
    let (h, w) = image.dim();
    let data: Vec<u8> = image.iter().copied().collect();
    encode(path, w, h, ColorType::Grayscale, BitDepth::Eight, None, &data)
}

/// Writes interleaved RGB rows, `data.len() == 3 * width * height`.
pub fn write_rgb8(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    if data.len() != 3 * width * height {
        return Err(image_err(path, format!("{} bytes for a {width}x{height} RGB image", data.len())));
    }
    encode(path, width, height, ColorType::Rgb, BitDepth::Eight, None, data)
}

/// RGB colour shown for a label by ordinary viewers of an indexed mask.
pub fn label_color(label: u8) -> [u8; 3] {
    const BASE: [[u8; 3]; 17] = [
        [0, 0, 0],
        [90, 90, 90],
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
    ];
    BASE.get(label as usize).copied().unwrap_or([label; 3])
}

/// Writes labels as 8-bit palette indices.
pub fn write_labels(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    let palette: Vec<u8> = (0..=255u8).flat_map(label_color).collect();
    let data: Vec<u8> = mask.iter().copied().collect();
    encode(path, w, h, ColorType::Indexed, BitDepth::Eight, Some(palette), &data)
}

/// Maps `[0, 1]` to 8-bit with rounding; values outside are clamped.
pub fn unit_to_u8(image: &Array2<f32>) -> Array2<u8> {
    image.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn unit_to_u16(image: &Array2<f32>) -> Array2<u16> {
    image.mapv(|v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
}
