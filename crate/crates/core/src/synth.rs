//! Procedural test images: piecewise-smooth scenes with sharp edges and
//! oriented stripes, rendered with 4×4 supersampling.

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::imaging::Image;

#[derive(Clone, Debug)]
enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64, cos: f64, sin: f64 },
    Stripes { cy: f64, cx: f64, r: f64, freq: f64, cos: f64, sin: f64, alt: [f64; 3] },
}

#[derive(Clone, Debug)]
struct Layer {
    shape: Shape,
    color: [f64; 3],
}

fn color(rng: &mut Xoshiro256PlusPlus) -> [f64; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

impl Layer {
    fn sample(&self, y: f64, x: f64) -> Option<[f64; 3]> {
        match self.shape {
            Shape::Disk { cy, cx, r } => ((y - cy).powi(2) + (x - cx).powi(2) <= r * r).then_some(self.color),
            Shape::Rect { cy, cx, hy, hx, cos, sin } => {
                let (dy, dx) = (y - cy, x - cx);
                let (u, v) = (cos * dy - sin * dx, sin * dy + cos * dx);
                (u.abs() <= hy && v.abs() <= hx).then_some(self.color)
            }
            Shape::Stripes { cy, cx, r, freq, cos, sin, alt } => {
                let (dy, dx) = (y - cy, x - cx);
                if dy * dy + dx * dx > r * r {
                    return None;
                }
                let phase = (cos * dy + sin * dx) * freq;
                Some(if phase.rem_euclid(1.0) < 0.5 { self.color } else { alt })
            }
        }
    }
}

/// A deterministic `size × size` scene for `seed`.
pub fn texture(size: usize, seed: u64) -> Image {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let n = size as f64;
    let bg0 = color(&mut rng);
    let bg1 = color(&mut rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let layers: Vec<Layer> = (0..rng.random_range(4..9))
        .map(|_| {
            let (cy, cx) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let shape = match rng.random_range(0..3) {
                0 => Shape::Disk { cy, cx, r: rng.random_range(0.08..0.3) * n },
                1 => Shape::Rect {
                    cy,
                    cx,
                    hy: rng.random_range(0.05..0.3) * n,
                    hx: rng.random_range(0.05..0.3) * n,
                    cos: angle.cos(),
                    sin: angle.sin(),
                },
                _ => Shape::Stripes {
                    cy,
                    cx,
                    r: rng.random_range(0.15..0.4) * n,
                    freq: 1.0 / rng.random_range(3.0..9.0),
                    cos: angle.cos(),
                    sin: angle.sin(),
                    alt: color(&mut rng),
                },
            };
            Layer { shape, color: color(&mut rng) }
        })
        .collect();
    const SS: usize = 4;
    Image::from_fn(size, size, |y, x, c| {
        let mut acc = 0.0;
        for sy in 0..SS {
            for sx in 0..SS {
                let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                let t = ((py * theta.cos() + px * theta.sin()) / (n * 1.5) + 0.5).clamp(0.0, 1.0);
                let mut v = bg0[c] * (1.0 - t) + bg1[c] * t;
                for l in &layers {
                    if let Some(col) = l.sample(py, px) {
                        v = col[c];
                    }
                }
                acc += v;
            }
        }
        (acc / (SS * SS) as f64) as f32
    })
}

/// `count` textures with seeds `seed, seed+1, …`.
pub fn textures(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count as u64).map(|i| texture(size, seed.wrapping_add(i))).collect()
}

/// Two-color checkerboard with `cell`-pixel squares.
pub fn checkerboard(h: usize, w: usize, cell: usize, a: [f32; 3], b: [f32; 3]) -> Image {
    let cell = cell.max(1);
    Image::from_fn(h, w, |y, x, c| if (y / cell + x / cell) % 2 == 0 { a[c] } else { b[c] })
}
