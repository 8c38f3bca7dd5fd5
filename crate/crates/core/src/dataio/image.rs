//! 8-bit PNG export for renders, heatmaps and masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn quantize<T: Real>(v: T) -> u8 {
    let x = v.as_f64().clamp(0.0, 1.0);
    (x * 255.0).round() as u8
}

fn encode(width: usize, height: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header().map_err(|e| Error::Image(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn rgb_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode(width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

pub fn gray_png(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    encode(width, height, png::ColorType::Grayscale, png::BitDepth::Eight, gray)
}

/// 1-bit grayscale PNG; rows are packed MSB-first.
pub fn mask_png(width: usize, height: usize, mask: &[bool]) -> Result<Vec<u8>> {
    let stride = width.div_ceil(8);
    let mut packed = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    encode(width, height, png::ColorType::Grayscale, png::BitDepth::One, &packed)
}

/// Blue → cyan → yellow → red ramp over [0, 1].
pub fn heatmap_rgb<T: Real>(scores: &[T]) -> Vec<u8> {
    const STOPS: [(f64, [f64; 3]); 4] = [
        (0.0, [0.05, 0.05, 0.45]),
        (0.35, [0.0, 0.75, 0.85]),
        (0.65, [0.95, 0.9, 0.1]),
        (1.0, [0.85, 0.05, 0.05]),
    ];
    let mut out = Vec::with_capacity(scores.len() * 3);
    for &s in scores {
        let s = s.as_f64().clamp(0.0, 1.0);
        let k = STOPS
            .iter()
            .rposition(|(p, _)| *p <= s)
            .unwrap_or(0)
            .min(STOPS.len() - 2);
        let (p0, c0) = STOPS[k];
        let (p1, c1) = STOPS[k + 1];
        let w = (s - p0) / (p1 - p0);
        for ch in 0..3 {
            out.push(((c0[ch] + (c1[ch] - c0[ch]) * w) * 255.0).round() as u8);
        }
    }
    out
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes an 8-bit or 1-bit grayscale / RGB PNG into (width, height, channels, samples).
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| Error::Image(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Image(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trips_through_png() {
        let (w, h) = (13, 5);
        let mask: Vec<bool> = (0..w * h).map(|i| i % 3 == 0 || i % 7 == 1).collect();
        let bytes = mask_png(w, h, &mask).unwrap();
        let (dw, dh, ch, data) = decode_png(&bytes).unwrap();
        assert_eq!((dw, dh, ch), (w, h, 1));
        let back: Vec<bool> = data.iter().map(|&v| v > 0).collect();
        assert_eq!(back, mask);
    }

    #[test]
    fn heatmap_endpoints() {
        let rgb = heatmap_rgb(&[0.0f64, 1.0]);
        assert_eq!(&rgb[..3], &[13, 13, 115]);
        assert_eq!(&rgb[3..], &[217, 13, 13]);
    }
}
