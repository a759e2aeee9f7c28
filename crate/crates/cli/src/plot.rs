//! Minimal PNG line-plot renderer for ROC/FROC/loss curves: axes, numeric
//! tick labels (bitmap digits), and one colored polyline per series.

use anyhow::Result;
use image::{Rgb, RgbImage};
use std::path::Path;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

pub const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

// 5x7 glyphs for the characters used in tick labels.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (ry, row) in g.iter().enumerate() {
            for rx in 0..5 {
                if row & (0x10 >> rx) != 0 {
                    let px = cx + rx;
                    let py = y + ry as u32;
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb(color));
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
    let n = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 0.01 && v.abs() < 10000.0 {
        let s = format!("{v:.2}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.1e}")
    }
}

/// Render one plot with linear axes sized to the data.
pub fn line_plot(path: &Path, series: &[Series], size: (u32, u32)) -> Result<()> {
    let (w, h) = size;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let (ml, mr, mt, mb) = (56u32, 16u32, 16u32, 32u32);
    let plot_w = (w - ml - mr) as f64;
    let plot_h = (h - mt - mb) as f64;

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if x_max <= x_min {
        x_max = x_min + 1.0;
    }
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }

    let to_px = |x: f64, y: f64| {
        (
            ml as f64 + (x - x_min) / (x_max - x_min) * plot_w,
            (h - mb) as f64 - (y - y_min) / (y_max - y_min) * plot_h,
        )
    };

    let axis = [40u8, 40, 40];
    draw_line(&mut img, to_px(x_min, y_min), to_px(x_max, y_min), axis);
    draw_line(&mut img, to_px(x_min, y_min), to_px(x_min, y_max), axis);
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let (px, py) = to_px(fx, y_min);
        draw_line(&mut img, (px, py), (px, py + 4.0), axis);
        draw_text(&mut img, px as u32, py as u32 + 7, &fmt_tick(fx), axis);
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let (qx, qy) = to_px(x_min, fy);
        draw_line(&mut img, (qx - 4.0, qy), (qx, qy), axis);
        draw_text(&mut img, 8, qy as u32, &fmt_tick(fy), axis);
    }

    for (si, s) in series.iter().enumerate() {
        for pair in s.points.windows(2) {
            draw_line(&mut img, to_px(pair[0].0, pair[0].1), to_px(pair[1].0, pair[1].1), s.color);
        }
        // Legend swatch + series index.
        let ly = mt + 10 * si as u32;
        for dx in 0..8 {
            for dy in 0..8 {
                img.put_pixel(w - mr - 24 + dx, ly + dy, Rgb(s.color));
            }
        }
        draw_text(&mut img, w - mr - 12, ly, &si.to_string(), axis);
    }

    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path)?;
    // Color legend with the series labels, since the bitmap font covers
    // digits only.
    let legend: Vec<serde_json::Value> = series
        .iter()
        .enumerate()
        .map(|(i, s)| serde_json::json!({"index": i, "label": s.label, "rgb": s.color}))
        .collect();
    std::fs::write(
        path.with_extension("legend.json"),
        serde_json::to_string_pretty(&legend)?,
    )?;
    Ok(())
}

/// Parse a simple numeric CSV with a header line.
pub fn read_csv_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        for (i, field) in line.split(',').enumerate() {
            if i < cols.len() {
                cols[i].push(field.trim().parse::<f64>().unwrap_or(f64::NAN));
            }
        }
    }
    Ok((header, cols))
}
