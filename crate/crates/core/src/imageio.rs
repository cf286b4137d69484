//! 8-bit image input and PNG figure output.

use std::path::Path;

use image::{imageops::FilterType, GrayImage, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Planar-free RGB image with values in `[0, 1]`, layout `(y, x, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbF64 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

/// Reads an 8-bit PNG or PPM/PGM file as RGB.
pub fn read_rgb(path: &Path) -> Result<RgbF64> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_f64(&img))
}

fn rgb_to_f64(img: &RgbImage) -> RgbF64 {
    RgbF64 {
        width: img.width() as usize,
        height: img.height() as usize,
        data: img.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
    }
}

/// Center-crops to a square and resamples to `n x n` (triangle filter).
pub fn square_resize(img: &RgbF64, n: usize) -> RgbF64 {
    let raw: Vec<u8> = img.data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let rgb = RgbImage::from_raw(img.width as u32, img.height as u32, raw).expect("buffer size");
    let side = img.width.min(img.height) as u32;
    let x0 = (img.width as u32 - side) / 2;
    let y0 = (img.height as u32 - side) / 2;
    let crop = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
    let out = image::imageops::resize(&crop, n as u32, n as u32, FilterType::Triangle);
    rgb_to_f64(&out)
}

/// Lists `.png`, `.ppm`, `.pgm` and `.pnm` files in a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = p
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if matches!(ext.as_deref(), Some("png" | "ppm" | "pgm" | "pnm")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn scale_to_u8(data: &[f64]) -> Vec<u8> {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    data.iter()
        .map(|v| (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes a min-max scaled grayscale PNG of a row-major `height x width` array.
pub fn save_gray(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Shape(format!("{} values for a {width}x{height} image", data.len())));
    }
    let img = GrayImage::from_raw(width as u32, height as u32, scale_to_u8(data)).expect("buffer size");
    if let Some(parent) = path.parent() {
        crate::fsutil::create_dir(parent)?;
    }
    img.save(path)?;
    Ok(())
}

/// Writes an RGB PNG from `(y, x, c)` values in `[0, 1]`.
pub fn save_rgb(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    if data.len() != width * height * 3 {
        return Err(Error::Shape(format!("{} values for a {width}x{height} RGB image", data.len())));
    }
    let raw = data.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let img = RgbImage::from_raw(width as u32, height as u32, raw).expect("buffer size");
    if let Some(parent) = path.parent() {
        crate::fsutil::create_dir(parent)?;
    }
    img.save(path)?;
    Ok(())
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// Line plot of several series on shared axes, without labels.
pub fn save_line_plot(path: &Path, series: &[Vec<f64>]) -> Result<()> {
    let (w, h, m) = (640u32, 400u32, 30u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let finite = series.iter().flatten().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    for x in m..w - m {
        img.put_pixel(x, h - m, Rgb([0, 0, 0]));
    }
    for y in m..h - m {
        img.put_pixel(m, y, Rgb([0, 0, 0]));
    }
    let px = |i: usize, n: usize| m as f64 + (w - 2 * m) as f64 * i as f64 / (n.max(2) - 1) as f64;
    let py = |v: f64| (h - m) as f64 - (h - 2 * m) as f64 * (v - lo) / span;
    for (k, s) in series.iter().enumerate() {
        let col = Rgb(PALETTE[k % PALETTE.len()]);
        for i in 1..s.len() {
            if !(s[i - 1].is_finite() && s[i].is_finite()) {
                continue;
            }
            let (x0, y0, x1, y1) = (px(i - 1, s.len()), py(s[i - 1]), px(i, s.len()), py(s[i]));
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for t in 0..=steps {
                let a = t as f64 / steps as f64;
                let (x, y) = (x0 + a * (x1 - x0), y0 + a * (y1 - y0));
                if x >= 0.0 && y >= 0.0 && (x as u32) < w && (y as u32) < h {
                    img.put_pixel(x as u32, y as u32, col);
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        crate::fsutil::create_dir(parent)?;
    }
    img.save(path)?;
    Ok(())
}
