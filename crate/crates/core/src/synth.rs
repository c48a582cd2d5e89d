//! Deterministic synthetic radiance maps for experiments and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

fn normalise(mut img: Image, lo: f64, hi: f64) -> Image {
    let (a, b) = (img.min(), img.max());
    let s = if b > a { (hi - lo) / (b - a) } else { 0.0 };
    for v in img.data_mut() {
        *v = lo + (*v - a) * s;
    }
    img
}

/// A gentle gradient plus a handful of broad Gaussian blobs, in `[0.1, 0.9]`.
pub fn smooth_scene(width: usize, height: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let gx = rng.gen_range(-1.0..1.0);
    let gy = rng.gen_range(-1.0..1.0);
    let blobs: Vec<[f64; 5]> = (0..8)
        .map(|_| {
            [
                rng.gen_range(0.0..w),
                rng.gen_range(0.0..h),
                rng.gen_range(0.08..0.3) * w,
                rng.gen_range(0.08..0.3) * h,
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    let img = Image::from_fn(width, height, |x, y| {
        let (x, y) = (x as f64, y as f64);
        let mut v = 0.5 * (gx * x / w + gy * y / h);
        for b in &blobs {
            let dx = (x - b[0]) / b[2];
            let dy = (y - b[1]) / b[3];
            v += b[4] * (-0.5 * (dx * dx + dy * dy)).exp();
        }
        v
    });
    normalise(img, 0.1, 0.9)
}

/// [`smooth_scene`] plus sharp-edged objects (rectangles and discs) and
/// a few fine gratings, in `[0.1, 0.9]`.
pub fn textured_scene(width: usize, height: usize, seed: u64) -> Image {
    let base = smooth_scene(width, height, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (w, h) = (width as f64, height as f64);
    let rects: Vec<[f64; 5]> = (0..6)
        .map(|_| {
            let cx = rng.gen_range(0.0..w);
            let cy = rng.gen_range(0.0..h);
            let rw = rng.gen_range(0.05..0.2) * w;
            let rh = rng.gen_range(0.05..0.2) * h;
            [cx - rw, cy - rh, cx + rw, cy + rh, rng.gen_range(-0.5..0.5)]
        })
        .collect();
    let discs: Vec<[f64; 4]> = (0..5)
        .map(|_| {
            [
                rng.gen_range(0.0..w),
                rng.gen_range(0.0..h),
                rng.gen_range(0.03..0.12) * w.min(h),
                rng.gen_range(-0.5..0.5),
            ]
        })
        .collect();
    let gratings: Vec<[f64; 6]> = (0..3)
        .map(|_| {
            let period = rng.gen_range(4.0..10.0) * w / 128.0;
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            [
                rng.gen_range(0.2..0.8) * w,
                rng.gen_range(0.2..0.8) * h,
                0.12 * w.min(h),
                std::f64::consts::TAU * angle.cos() / period,
                std::f64::consts::TAU * angle.sin() / period,
                0.25,
            ]
        })
        .collect();
    let img = Image::from_fn(width, height, |xi, yi| {
        let (x, y) = (xi as f64, yi as f64);
        let mut v = base.get(xi, yi);
        for r in &rects {
            if x >= r[0] && x < r[2] && y >= r[1] && y < r[3] {
                v += r[4];
            }
        }
        for d in &discs {
            if (x - d[0]).powi(2) + (y - d[1]).powi(2) < d[2] * d[2] {
                v += d[3];
            }
        }
        for g in &gratings {
            if (x - g[0]).abs() < g[2] && (y - g[1]).abs() < g[2] {
                v += g[5] * (g[3] * x + g[4] * y).sin();
            }
        }
        v
    });
    normalise(img, 0.1, 0.9)
}
