//! Anti-aliased rasterization of the four primitive shapes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
        }
    }
}

const SQUARE_HALF: f64 = 0.8;
const CROSS_ARM: f64 = 0.32;
/// Subsamples per pixel side.
const SUPERSAMPLE: usize = 4;

/// One shape instance in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub kind: ShapeKind,
    /// Center in pixels.
    pub cx: f64,
    pub cy: f64,
    /// Circumradius in pixels.
    pub radius: f64,
    /// Rotation in radians.
    pub rotation: f64,
    pub color: [f64; 3],
}

impl ShapeParams {
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rotation.sin_cos();
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Point-in-shape test in pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        let r = self.radius;
        match self.kind {
            ShapeKind::Circle => u * u + v * v <= r * r,
            ShapeKind::Square => u.abs() <= SQUARE_HALF * r && v.abs() <= SQUARE_HALF * r,
            ShapeKind::Triangle => {
                let verts = self.local_vertices();
                let sign = |p: (f64, f64), a: (f64, f64), b: (f64, f64)| {
                    (p.0 - b.0) * (a.1 - b.1) - (a.0 - b.0) * (p.1 - b.1)
                };
                let d1 = sign((u, v), verts[0], verts[1]);
                let d2 = sign((u, v), verts[1], verts[2]);
                let d3 = sign((u, v), verts[2], verts[0]);
                let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
                let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
                !(neg && pos)
            }
            ShapeKind::Cross => {
                let w = CROSS_ARM * r;
                (u.abs() <= r && v.abs() <= w) || (u.abs() <= w && v.abs() <= r)
            }
        }
    }

    fn local_vertices(&self) -> Vec<(f64, f64)> {
        let r = self.radius;
        match self.kind {
            ShapeKind::Circle => Vec::new(),
            ShapeKind::Square => {
                let a = SQUARE_HALF * r;
                vec![(-a, -a), (a, -a), (a, a), (-a, a)]
            }
            ShapeKind::Triangle => (0..3)
                .map(|k| {
                    let t = -std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    (r * t.cos(), r * t.sin())
                })
                .collect(),
            ShapeKind::Cross => {
                let w = CROSS_ARM * r;
                vec![
                    (-r, -w),
                    (-w, -w),
                    (-w, -r),
                    (w, -r),
                    (w, -w),
                    (r, -w),
                    (r, w),
                    (w, w),
                    (w, r),
                    (-w, r),
                    (-w, w),
                    (-r, w),
                ]
            }
        }
    }

    /// Exact axis-aligned bounds `(x0, y0, x1, y1)` in pixels.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        if self.kind == ShapeKind::Circle {
            let r = self.radius;
            return (self.cx - r, self.cy - r, self.cx + r, self.cy + r);
        }
        let (s, c) = self.rotation.sin_cos();
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (u, v) in self.local_vertices() {
            // inverse of `local`
            let x = self.cx + c * u - s * v;
            let y = self.cy + s * u + c * v;
            b = (b.0.min(x), b.1.min(y), b.2.max(x), b.3.max(y));
        }
        b
    }

    /// Fractional pixel coverage in `[0,1]` for pixel `(px, py)`.
    pub fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }

    /// Composites the shape over an RGB float canvas of side `size`.
    pub fn paint(&self, canvas: &mut [f64], size: usize) {
        let (x0, y0, x1, y1) = self.bounds();
        let lo = |v: f64| (v.floor().max(0.0) as usize).min(size);
        let hi = |v: f64| (v.ceil().max(0.0) as usize).min(size);
        for py in lo(y0)..hi(y1) {
            for px in lo(x0)..hi(x1) {
                let a = self.coverage(px, py);
                if a > 0.0 {
                    let base = (py * size + px) * 3;
                    for ch in 0..3 {
                        canvas[base + ch] = canvas[base + ch] * (1.0 - a) + self.color[ch] * a;
                    }
                }
            }
        }
    }
}

/// HSV (hue in degrees) to RGB in `[0,1]`.
pub fn hsv_to_rgb(hue: f64, sat: f64, val: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = val * sat;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = val - c;
    [r + m, g + m, b + m]
}

/// Smooth low-amplitude value noise: bilinear interpolation of a coarse
/// random lattice, returned per pixel.
pub fn value_noise(lattice: &[f64], cells: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    let step = size as f64 / cells as f64;
    let at = |i: usize, j: usize| lattice[j.min(cells) * (cells + 1) + i.min(cells)];
    for py in 0..size {
        for px in 0..size {
            let fx = (px as f64 + 0.5) / step;
            let fy = (py as f64 + 0.5) / step;
            let (i, j) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (fx - i as f64, fy - j as f64);
            let top = at(i, j) * (1.0 - tx) + at(i + 1, j) * tx;
            let bot = at(i, j + 1) * (1.0 - tx) + at(i + 1, j + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primary_hues() {
        let close = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]));
        assert!(close(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]));
        assert!(close(hsv_to_rgb(240.0, 1.0, 1.0), [0.0, 0.0, 1.0]));
        assert!(close(hsv_to_rgb(-120.0, 1.0, 1.0), [0.0, 0.0, 1.0]));
    }

    #[test]
    fn vertices_are_inside() {
        for kind in ShapeKind::ALL {
            let s = ShapeParams { kind, cx: 32.0, cy: 32.0, radius: 10.0, rotation: 0.4, color: [1.0; 3] };
            assert!(s.contains(32.0, 32.0), "{kind:?}");
            let (x0, y0, x1, y1) = s.bounds();
            assert!(x1 > x0 && y1 > y0);
            assert!(!s.contains(x0 - 0.5, 32.0));
            assert!(!s.contains(32.0, y1 + 0.5));
        }
    }
}
