//! Static scatter plots comparing methods on two measures.
//!
//! Each method gets a fixed palette color; Pareto-optimal points (higher is
//! better on both axes) are ringed. There is no text rendering, so callers
//! write the legend next to the image.

use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub method: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub method: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPlot {
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub legend: Vec<LegendEntry>,
    pub points: Vec<ScatterPoint>,
    pub pareto: Vec<bool>,
}

/// Marks points not dominated by any other point (`>=` on both axes and `>`
/// on at least one).
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .map(|&(x, y)| !points.iter().any(|&(ox, oy)| ox >= x && oy >= y && (ox > x || oy > y)))
        .collect()
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.08 * (hi - lo);
    (lo - pad, hi + pad)
}

impl ScatterPlot {
    pub fn new(x_label: &str, y_label: &str, points: Vec<ScatterPoint>) -> Self {
        let mut legend: Vec<LegendEntry> = Vec::new();
        for p in &points {
            if !legend.iter().any(|l| l.method == p.method) {
                legend.push(LegendEntry {
                    method: p.method.clone(),
                    color: PALETTE[legend.len() % PALETTE.len()],
                });
            }
        }
        let coords: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.y)).collect();
        Self {
            x_label: x_label.to_string(),
            y_label: y_label.to_string(),
            x_range: padded_range(coords.iter().map(|c| c.0)),
            y_range: padded_range(coords.iter().map(|c| c.1)),
            legend,
            pareto: pareto_front(&coords),
            points,
        }
    }

    fn color(&self, method: &str) -> Rgb<u8> {
        Rgb(self
            .legend
            .iter()
            .find(|l| l.method == method)
            .map_or([0, 0, 0], |l| l.color))
    }

    pub fn render(&self, width: u32, height: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
        let margin = 40i64;
        let (w, h) = (i64::from(width), i64::from(height));
        let (left, right, top, bottom) = (margin, w - margin / 2, margin / 2, h - margin);
        let axis = Rgb([40, 40, 40]);
        let grid = Rgb([225, 225, 225]);
        for i in 0..=4 {
            let gx = left + (right - left) * i / 4;
            let gy = top + (bottom - top) * i / 4;
            line(&mut img, (gx, top), (gx, bottom), grid);
            line(&mut img, (left, gy), (right, gy), grid);
            line(&mut img, (gx, bottom), (gx, bottom + 5), axis);
            line(&mut img, (left - 5, gy), (left, gy), axis);
        }
        line(&mut img, (left, bottom), (right, bottom), axis);
        line(&mut img, (left, top), (left, bottom), axis);

        let to_px = |p: &ScatterPoint| {
            let fx = (p.x - self.x_range.0) / (self.x_range.1 - self.x_range.0);
            let fy = (p.y - self.y_range.0) / (self.y_range.1 - self.y_range.0);
            (
                left + (fx * (right - left) as f64).round() as i64,
                bottom - (fy * (bottom - top) as f64).round() as i64,
            )
        };
        for (p, &front) in self.points.iter().zip(&self.pareto) {
            let c = to_px(p);
            disc(&mut img, c, 4, self.color(&p.method));
            if front {
                ring(&mut img, c, 7, axis);
            }
        }
        img
    }

    /// Writes `<stem>.png` and `<stem>.json` (axes, legend, points).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), crate::corpus::CorpusError> {
        crate::corpus::save_png(&self.render(480, 360), &dir.join(format!("{stem}.png")))?;
        crate::corpus::write_json(&dir.join(format!("{stem}.json")), self)
    }
}

fn put(img: &mut RgbImage, (x, y): (i64, i64), c: Rgb<u8>) {
    if x >= 0 && y >= 0 && x < i64::from(img.width()) && y < i64::from(img.height()) {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for i in 0..=steps {
        let x = a.0 + (b.0 - a.0) * i / steps;
        let y = a.1 + (b.1 - a.1) * i / steps;
        put(img, (x, y), c);
    }
}

fn disc(img: &mut RgbImage, (cx, cy): (i64, i64), r: i64, c: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, (cx + dx, cy + dy), c);
            }
        }
    }
}

fn ring(img: &mut RgbImage, (cx, cy): (i64, i64), r: i64, c: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = dx * dx + dy * dy;
            if d2 <= r * r && d2 > (r - 2) * (r - 2) {
                put(img, (cx + dx, cy + dy), c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pareto_front_of_small_set() {
        let pts = [(0.9, 0.1), (0.5, 0.5), (0.4, 0.4), (0.1, 0.9), (0.5, 0.5)];
        assert_eq!(pareto_front(&pts), vec![true, true, false, true, true]);
        assert_eq!(pareto_front(&[]), Vec::<bool>::new());
    }

    #[test]
    fn render_places_colored_points() {
        let pts = vec![
            ScatterPoint {
                method: "dreambooth".into(),
                x: 0.0,
                y: 0.0,
            },
            ScatterPoint {
                method: "dreambooth+sid".into(),
                x: 1.0,
                y: 1.0,
            },
        ];
        let plot = ScatterPlot::new("SA", "NSD", pts);
        assert_eq!(plot.legend.len(), 2);
        assert_eq!(plot.pareto, vec![false, true]);
        let img = plot.render(200, 160);
        assert_eq!(img.dimensions(), (200, 160));
        let blue = Rgb(PALETTE[0]);
        let orange = Rgb(PALETTE[1]);
        assert!(img.pixels().any(|p| *p == blue));
        assert!(img.pixels().any(|p| *p == orange));
    }
}
