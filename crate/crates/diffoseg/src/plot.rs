//! Static PNG output: grouped bar charts and grayscale maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::{Error, Result};

const PALETTE: [[u8; 3]; 6] = [
    [0x1f, 0x77, 0xb4],
    [0xff, 0x7f, 0x0e],
    [0x2c, 0xa0, 0x2c],
    [0xd6, 0x27, 0x28],
    [0x94, 0x67, 0xbd],
    [0x8c, 0x56, 0x4b],
];

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(data).map_err(fail)?;
    writer.finish().map_err(fail)
}

/// Grayscale image of `values` in `[0, 1]`, each pixel drawn as a
/// `scale x scale` block.
pub fn gray_map(path: &Path, height: usize, width: usize, values: &[f64], scale: usize) -> Result<()> {
    if values.len() != height * width || scale == 0 {
        return Err(Error::config("gray map size mismatch"));
    }
    let (h, w) = (height * scale, width * scale);
    let mut data = vec![0u8; h * w];
    for (y, row) in data.chunks_mut(w).enumerate() {
        for (x, px) in row.iter_mut().enumerate() {
            let v = values[(y / scale) * width + x / scale];
            *px = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    write_png(path, w, h, png::ColorType::Grayscale, &data)
}

/// One group of bars per row of `values` (`values[group][series]`), on a
/// `[0, y_max]` axis with light gridlines at tenths. Non-finite values are
/// left blank.
pub fn bar_chart(path: &Path, values: &[Vec<f64>], y_max: f64) -> Result<()> {
    let series = values.iter().map(Vec::len).max().unwrap_or(0);
    if values.is_empty() || series == 0 || !(y_max > 0.0) {
        return Err(Error::config("bar chart needs data and a positive axis"));
    }
    const BAR: usize = 18;
    const GAP: usize = 24;
    const MARGIN: usize = 16;
    const PLOT_H: usize = 240;
    let group_w = series * BAR + GAP;
    let width = 2 * MARGIN + values.len() * group_w;
    let height = PLOT_H + 2 * MARGIN;
    let mut rgb = vec![255u8; width * height * 3];
    let put = |x: usize, y: usize, c: [u8; 3], rgb: &mut [u8]| {
        let i = (y * width + x) * 3;
        rgb[i..i + 3].copy_from_slice(&c);
    };
    let base = MARGIN + PLOT_H;
    for k in 0..=10 {
        let y = base - k * PLOT_H / 10;
        let shade = if k == 0 { [0, 0, 0] } else { [225, 225, 225] };
        for x in MARGIN..width - MARGIN {
            put(x, y, shade, &mut rgb);
        }
    }
    for (g, row) in values.iter().enumerate() {
        for (s, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                continue;
            }
            let bar_h = ((v / y_max).clamp(0.0, 1.0) * PLOT_H as f64).round() as usize;
            let x0 = MARGIN + g * group_w + GAP / 2 + s * BAR;
            for y in base - bar_h..base {
                for x in x0 + 1..x0 + BAR - 1 {
                    put(x, y, PALETTE[s % PALETTE.len()], &mut rgb);
                }
            }
        }
    }
    write_png(path, width, height, png::ColorType::Rgb, &rgb)
}
