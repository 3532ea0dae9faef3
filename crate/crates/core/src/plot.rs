//! Minimal raster plotting for the report: axes, polylines, markers and a
//! 5×7 bitmap font. Output is an [`RgbImage`] ready for PNG encoding.

use crate::cam::RgbImage;
use crate::stats::{AblationRow, RocPoint};

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GRAY: Rgb = [170, 170, 170];
pub const RED: Rgb = [200, 30, 30];
pub const BLUE: Rgb = [30, 60, 200];

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// Rows of a glyph, top first, 5 bits each with the leftmost pixel in bit 4.
/// Lowercase letters render as uppercase.
fn glyph(c: char) -> Option<[u8; GLYPH_H]> {
    Some(match c.to_ascii_uppercase() {
        'A' => [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'B' => [0x1e, 0x11, 0x11, 0x1e, 0x11, 0x11, 0x1e],
        'C' => [0x0e, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0e],
        'D' => [0x1e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1e],
        'E' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x1f],
        'F' => [0x1f, 0x10, 0x10, 0x1e, 0x10, 0x10, 0x10],
        'G' => [0x0e, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0f],
        'H' => [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'I' => [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0c],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1f],
        'M' => [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'P' => [0x1e, 0x11, 0x11, 0x1e, 0x10, 0x10, 0x10],
        'Q' => [0x0e, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0d],
        'R' => [0x1e, 0x11, 0x11, 0x1e, 0x14, 0x12, 0x11],
        'S' => [0x0f, 0x10, 0x10, 0x0e, 0x01, 0x01, 0x1e],
        'T' => [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0a],
        'X' => [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1f],
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0c, 0x04, 0x08],
        ':' => [0x00, 0x0c, 0x0c, 0x00, 0x0c, 0x0c, 0x00],
        '=' => [0x00, 0x00, 0x1f, 0x00, 0x1f, 0x00, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        ' ' => [0; 7],
        _ => return None,
    })
}

/// Text width in pixels at `scale`.
pub fn text_width(text: &str, scale: usize) -> usize {
    let n = text.chars().count();
    if n == 0 {
        0
    } else {
        (n * (GLYPH_W + 1) - 1) * scale
    }
}

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl Canvas {
    pub fn new(width: usize, height: usize, background: Rgb) -> Self {
        Canvas {
            width,
            height,
            data: background.repeat(width * height),
        }
    }

    pub fn set(&mut self, x: i64, y: i64, color: Rgb) {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return;
        }
        let i = (y as usize * self.width + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&color);
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Bresenham line, `thickness` pixels square brush.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb, thickness: i64) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let lo = -(thickness - 1) / 2;
        loop {
            for ox in lo..lo + thickness {
                for oy in lo..lo + thickness {
                    self.set(x + ox, y + oy, color);
                }
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, color);
            }
        }
    }

    /// Draws `text` with its top-left corner at `(x, y)`. Characters without
    /// a glyph render as a filled box.
    pub fn text(&mut self, x: i64, y: i64, text: &str, color: Rgb, scale: usize) {
        let s = scale as i64;
        for (i, c) in text.chars().enumerate() {
            let rows = glyph(c).unwrap_or([0x1f; GLYPH_H]);
            let gx = x + i as i64 * (GLYPH_W as i64 + 1) * s;
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                        self.fill_rect(gx + col as i64 * s, y + r as i64 * s, s, s, color);
                    }
                }
            }
        }
    }

    pub fn into_image(self) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data,
        }
    }
}

/// Plot frame mapping data coordinates into a pixel rectangle.
pub struct Axes {
    pub left: i64,
    pub top: i64,
    pub right: i64,
    pub bottom: i64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

impl Axes {
    pub fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
        let px = self.left as f64 + fx * (self.right - self.left) as f64;
        let py = self.bottom as f64 - fy * (self.bottom - self.top) as f64;
        (px.round() as i64, py.round() as i64)
    }

    /// Frame, ticks with labels and axis titles.
    pub fn draw(&self, c: &mut Canvas, x_ticks: &[(f64, String)], y_ticks: &[(f64, String)], x_title: &str, y_title: &str) {
        for (x, label) in x_ticks {
            let (px, _) = self.to_px(*x, self.y_range.0);
            c.line((px, self.top), (px, self.bottom), GRAY, 1);
            c.text(px - text_width(label, 1) as i64 / 2, self.bottom + 6, label, BLACK, 1);
        }
        for (y, label) in y_ticks {
            let (_, py) = self.to_px(self.x_range.0, *y);
            c.line((self.left, py), (self.right, py), GRAY, 1);
            c.text(self.left - 6 - text_width(label, 1) as i64, py - 3, label, BLACK, 1);
        }
        c.line((self.left, self.bottom), (self.right, self.bottom), BLACK, 1);
        c.line((self.left, self.top), (self.left, self.bottom), BLACK, 1);
        c.line((self.right, self.top), (self.right, self.bottom), BLACK, 1);
        c.line((self.left, self.top), (self.right, self.top), BLACK, 1);
        let mid = (self.left + self.right) / 2;
        c.text(mid - text_width(x_title, 1) as i64 / 2, self.bottom + 20, x_title, BLACK, 1);
        c.text(4, self.top - 14, y_title, BLACK, 1);
    }

    pub fn polyline(&self, c: &mut Canvas, pts: &[(f64, f64)], color: Rgb, thickness: i64) {
        for w in pts.windows(2) {
            c.line(self.to_px(w[0].0, w[0].1), self.to_px(w[1].0, w[1].1), color, thickness);
        }
    }

    pub fn markers(&self, c: &mut Canvas, pts: &[(f64, f64)], color: Rgb) {
        for &(x, y) in pts {
            let (px, py) = self.to_px(x, y);
            c.fill_rect(px - 2, py - 2, 5, 5, color);
        }
    }
}

fn unit_ticks() -> Vec<(f64, String)> {
    (0..=5).map(|i| (i as f64 / 5.0, format!("{:.1}", i as f64 / 5.0))).collect()
}

/// ROC curve with the chance diagonal and an AUC annotation.
pub fn roc_plot(points: &[RocPoint], auc: f64) -> RgbImage {
    let mut c = Canvas::new(360, 340, WHITE);
    let ax = Axes {
        left: 50,
        top: 40,
        right: 330,
        bottom: 300,
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
    };
    ax.draw(&mut c, &unit_ticks(), &unit_ticks(), "FALSE POSITIVE RATE", "TRUE POSITIVE RATE");
    ax.polyline(&mut c, &[(0.0, 0.0), (1.0, 1.0)], GRAY, 1);
    let pts: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    ax.polyline(&mut c, &pts, RED, 2);
    let label = format!("AUC = {auc:.4}");
    c.text(ax.right - text_width(&label, 2) as i64 - 8, ax.bottom - 24, &label, BLACK, 2);
    c.text(ax.left, 8, "ROC", BLACK, 2);
    c.into_image()
}

/// Test accuracy against training-set size. A single row plots as one
/// marker in a padded range.
pub fn ablation_plot(rows: &[AblationRow]) -> RgbImage {
    let mut c = Canvas::new(400, 340, WHITE);
    let xs: Vec<f64> = rows.iter().map(|r| r.train_size as f64).collect();
    let (mut lo, mut hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.1).max(25.0);
    let ax = Axes {
        left: 50,
        top: 40,
        right: 370,
        bottom: 300,
        x_range: (lo - pad, hi + pad),
        y_range: (0.0, 1.0),
    };
    let x_ticks: Vec<(f64, String)> = xs.iter().map(|&x| (x, format!("{x:.0}"))).collect();
    ax.draw(&mut c, &x_ticks, &unit_ticks(), "TRAINING CASES", "TEST ACCURACY");
    let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.train_size as f64, r.test_accuracy)).collect();
    ax.polyline(&mut c, &pts, BLUE, 2);
    ax.markers(&mut c, &pts, BLUE);
    c.text(ax.left, 8, "ACCURACY VS TRAINING SIZE", BLACK, 2);
    c.into_image()
}
