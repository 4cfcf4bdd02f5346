//! Minimal raster figures so every table ships with a rendered PNG and no
//! plotting environment is required to inspect a run.

use std::path::Path;

use crate::error::{Error, Result};

pub fn write_gray_png(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), (width * height) as usize);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Invalid(format!("png header: {e}")))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::Invalid(format!("png data: {e}")))?;
    Ok(())
}

pub fn write_rgb_png(path: &Path, width: u32, height: u32, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), (width * height * 3) as usize);
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Invalid(format!("png header: {e}")))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| Error::Invalid(format!("png data: {e}")))?;
    Ok(())
}

pub const BLUE: [u8; 3] = [31, 119, 180];
pub const ORANGE: [u8; 3] = [255, 127, 14];
pub const GREEN: [u8; 3] = [44, 160, 44];
pub const GRAY: [u8; 3] = [160, 160, 160];

/// Fixed-size canvas with data-space line and scatter drawing.
pub struct Plot {
    width: usize,
    height: usize,
    margin: usize,
    pixels: Vec<u8>,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

fn widen(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = (hi - lo).abs().max(1e-12);
    (lo - 0.05 * span, hi + 0.05 * span)
}

impl Plot {
    pub fn new(width: usize, height: usize, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let margin = 12;
        let mut p = Plot {
            width,
            height,
            margin,
            pixels: vec![255; width * height * 3],
            x_range: widen(x_range.0, x_range.1),
            y_range: widen(y_range.0, y_range.1),
        };
        p.frame();
        p
    }

    /// Ranges inferred from the data to draw.
    pub fn fit(width: usize, height: usize, xs: &[f64], ys: &[f64]) -> Self {
        let xmin = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        let xmax = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ymin = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let ymax = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Plot::new(width, height, (xmin, xmax), (ymin, ymax))
    }

    fn frame(&mut self) {
        let m = self.margin;
        for x in m..self.width - m {
            self.put(x, m, GRAY);
            self.put(x, self.height - m - 1, GRAY);
        }
        for y in m..self.height - m {
            self.put(m, y, GRAY);
            self.put(self.width - m - 1, y, GRAY);
        }
    }

    fn put(&mut self, x: usize, y: usize, color: [u8; 3]) {
        if x < self.width && y < self.height {
            let i = (y * self.width + x) * 3;
            self.pixels[i..i + 3].copy_from_slice(&color);
        }
    }

    fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let m = self.margin as f64;
        let w = (self.width - 2 * self.margin) as f64;
        let h = (self.height - 2 * self.margin) as f64;
        let px = m + (x - self.x_range.0) / (self.x_range.1 - self.x_range.0) * w;
        let py = m + (1.0 - (y - self.y_range.0) / (self.y_range.1 - self.y_range.0)) * h;
        (px.round() as i64, py.round() as i64)
    }

    pub fn point(&mut self, x: f64, y: f64, color: [u8; 3]) {
        if !(x.is_finite() && y.is_finite()) {
            return;
        }
        let (px, py) = self.to_px(x, y);
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                if px + dx >= 0 && py + dy >= 0 {
                    self.put((px + dx) as usize, (py + dy) as usize, color);
                }
            }
        }
    }

    pub fn line(&mut self, xs: &[f64], ys: &[f64], color: [u8; 3]) {
        for pair in xs.iter().zip(ys).collect::<Vec<_>>().windows(2) {
            let ((&x0, &y0), (&x1, &y1)) = (pair[0], pair[1]);
            if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
                continue;
            }
            let (mut px0, mut py0) = self.to_px(x0, y0);
            let (px1, py1) = self.to_px(x1, y1);
            let dx = (px1 - px0).abs();
            let dy = -(py1 - py0).abs();
            let sx = if px0 < px1 { 1 } else { -1 };
            let sy = if py0 < py1 { 1 } else { -1 };
            let mut err = dx + dy;
            loop {
                if px0 >= 0 && py0 >= 0 {
                    self.put(px0 as usize, py0 as usize, color);
                }
                if px0 == px1 && py0 == py1 {
                    break;
                }
                let e2 = 2 * err;
                if e2 >= dy {
                    err += dy;
                    px0 += sx;
                }
                if e2 <= dx {
                    err += dx;
                    py0 += sy;
                }
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_rgb_png(path, self.width as u32, self.height as u32, &self.pixels)
    }
}
