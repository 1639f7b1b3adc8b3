//! 8-bit grayscale PNG I/O, difference maps and figure grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Quantize a `[0, 1]` intensity to a byte (values outside are clamped).
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_u8(b: u8) -> f32 {
    b as f32 / 255.0
}

/// Round-trip through 8-bit quantization.
pub fn quantize(pixels: &mut [f32]) {
    for p in pixels {
        *p = from_u8(to_u8(*p));
    }
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn write_gray(path: &Path, side: usize, pixels: &[f32]) -> Result<()> {
    if pixels.len() != side * side {
        return Err(Error::Shape {
            expected: vec![side, side],
            got: vec![pixels.len()],
        });
    }
    let bytes: Vec<u8> = pixels.iter().map(|&v| to_u8(v)).collect();
    write_png(path, side, side, png::ColorType::Grayscale, &bytes)
}

/// Read an 8-bit grayscale PNG; returns `(side, pixels in [0, 1])`.
pub fn read_gray(path: &Path) -> Result<(usize, Vec<f32>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected 8-bit grayscale"));
    }
    if info.width != info.height {
        return Err(png_err(path, "expected a square image"));
    }
    let side = info.width as usize;
    Ok((side, buf[..side * side].iter().map(|&b| from_u8(b)).collect()))
}

/// Diverging color map for a signed difference: blue for negative, red for
/// positive, white at zero. `scale` is the magnitude mapped to full color.
pub fn diverging_rgb(diff: &[f32], scale: f32) -> Vec<u8> {
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let mut out = Vec::with_capacity(diff.len() * 3);
    for &d in diff {
        let a = (d / scale).clamp(-1.0, 1.0);
        let fade = to_u8(1.0 - a.abs());
        if a >= 0.0 {
            out.extend_from_slice(&[255, fade, fade]);
        } else {
            out.extend_from_slice(&[fade, fade, 255]);
        }
    }
    out
}

pub fn write_difference_map(path: &Path, side: usize, factual: &[f32], counterfactual: &[f32]) -> Result<()> {
    let diff: Vec<f32> = counterfactual.iter().zip(factual).map(|(c, f)| c - f).collect();
    let peak = diff.iter().fold(0.0f32, |m, d| m.max(d.abs()));
    write_png(path, side, side, png::ColorType::Rgb, &diverging_rgb(&diff, peak))
}

/// One figure row: factual | counterfactual | difference map, each upscaled
/// by `zoom` and separated by a white gutter.
pub fn write_triptych(path: &Path, side: usize, factual: &[f32], counterfactual: &[f32], zoom: usize) -> Result<()> {
    let gutter = 2;
    let cell = side * zoom;
    let width = 3 * cell + 2 * gutter;
    let mut rgb = vec![255u8; width * cell * 3];
    let diff: Vec<f32> = counterfactual.iter().zip(factual).map(|(c, f)| c - f).collect();
    let peak = diff.iter().fold(0.0f32, |m, d| m.max(d.abs()));
    let diff_rgb = diverging_rgb(&diff, peak);
    let panels: [Box<dyn Fn(usize) -> [u8; 3]>; 3] = [
        Box::new(|i| [to_u8(factual[i]); 3]),
        Box::new(|i| [to_u8(counterfactual[i]); 3]),
        Box::new(|i| [diff_rgb[3 * i], diff_rgb[3 * i + 1], diff_rgb[3 * i + 2]]),
    ];
    for (p, panel) in panels.iter().enumerate() {
        let x0 = p * (cell + gutter);
        for y in 0..cell {
            for x in 0..cell {
                let px = panel((y / zoom) * side + x / zoom);
                let o = (y * width + x0 + x) * 3;
                rgb[o..o + 3].copy_from_slice(&px);
            }
        }
    }
    write_png(path, width, cell, png::ColorType::Rgb, &rgb)
}
