//! Minimal line plots rendered straight into an RGB image.

use anyface_core::tensor::Tensor;
use anyface_core::world::ToyImage;

const PALETTE: [[f64; 3]; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.35, 0.85],
    [0.10, 0.60, 0.20],
    [0.80, 0.50, 0.05],
    [0.55, 0.20, 0.70],
    [0.10, 0.60, 0.65],
];
const MARGIN: usize = 12;

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            px: vec![1.0; w * h * 3],
        }
    }

    fn set(&mut self, x: i64, y: i64, rgb: [f64; 3]) {
        if x < 0 || y < 0 || x as usize >= self.w || y as usize >= self.h {
            return;
        }
        let i = (y as usize * self.w + x as usize) * 3;
        self.px[i..i + 3].copy_from_slice(&rgb);
    }

    // Bresenham, drawn two pixels thick.
    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [f64; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, rgb);
            self.set(x, y + 1, rgb);
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
}

/// Plots each series (x, y) on shared axes; the y range is padded by 5%.
/// Colors follow series order through a fixed palette.
pub fn line_plot(series: &[Vec<(f64, f64)>], width: usize, height: usize) -> ToyImage {
    let mut c = Canvas::new(width, height);
    let points = series.iter().flatten();
    let (mut x_lo, mut x_hi, mut y_lo, mut y_hi) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in points {
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
    }
    let pad = 0.05 * (y_hi - y_lo).max(1e-12);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
    let x_span = (x_hi - x_lo).max(1e-12);
    let (pw, ph) = ((width - 2 * MARGIN) as f64, (height - 2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            (MARGIN as f64 + (x - x_lo) / x_span * pw).round() as i64,
            (MARGIN as f64 + (y_hi - y) / (y_hi - y_lo) * ph).round() as i64,
        )
    };
    let axis = [0.2; 3];
    let (left, bottom) = (MARGIN as i64, (height - MARGIN) as i64);
    c.line((left, MARGIN as i64), (left, bottom), axis);
    c.line((left, bottom), ((width - MARGIN) as i64, bottom), axis);
    for (i, s) in series.iter().enumerate() {
        let rgb = PALETTE[i % PALETTE.len()];
        for pair in s.windows(2) {
            c.line(to_px(pair[0]), to_px(pair[1]), rgb);
        }
    }
    let data = c.px.into_iter().map(|v| v * 2.0 - 1.0).collect();
    ToyImage::new(Tensor::new(vec![height, width, 3], data).expect("canvas shape")).expect("3-d")
}
