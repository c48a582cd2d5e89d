//! Bilinear resampling under a [`TransformParams`] map.

use crate::error::Result;
use crate::geometry::transform::{center_of, TransformParams};
use crate::image::Image;

/// Bilinear footprint of a sample point: top-left index, right/down
/// neighbour offsets, and fractional position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Footprint {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

/// Locates `(x, y)` on a `width x height` grid. `None` outside
/// `[0, W-1] x [0, H-1]`. The footprint at an exact integer coordinate is
/// the cell to its right (or the last cell on the far border), which makes
/// the derivative the right-limit.
#[inline]
pub(crate) fn locate(x: f64, y: f64, width: usize, height: usize) -> Option<Footprint> {
    let xmax = (width - 1) as f64;
    let ymax = (height - 1) as f64;
    if !(x >= 0.0 && x <= xmax && y >= 0.0 && y <= ymax) {
        return None;
    }
    let x0 = (x.floor() as usize).min(width.saturating_sub(2));
    let y0 = (y.floor() as usize).min(height.saturating_sub(2));
    Some(Footprint {
        x0,
        y0,
        x1: (x0 + 1).min(width - 1),
        y1: (y0 + 1).min(height - 1),
        fx: x - x0 as f64,
        fy: y - y0 as f64,
    })
}

impl Footprint {
    #[inline]
    pub fn sample(&self, data: &[f64], width: usize) -> f64 {
        let (a, b, c, d) = self.corners(data, width);
        let top = a + self.fx * (b - a);
        let bottom = c + self.fx * (d - c);
        top + self.fy * (bottom - top)
    }

    /// Partial derivatives of the bilinear surface w.r.t. x and y.
    #[inline]
    pub fn gradient(&self, data: &[f64], width: usize) -> (f64, f64) {
        let (a, b, c, d) = self.corners(data, width);
        let gx = (1.0 - self.fy) * (b - a) + self.fy * (d - c);
        let gy = (1.0 - self.fx) * (c - a) + self.fx * (d - b);
        (gx, gy)
    }

    #[inline]
    fn corners(&self, data: &[f64], width: usize) -> (f64, f64, f64, f64) {
        (
            data[self.y0 * width + self.x0],
            data[self.y0 * width + self.x1],
            data[self.y1 * width + self.x0],
            data[self.y1 * width + self.x1],
        )
    }

    /// Adds `g` times the bilinear weights into `out`.
    #[inline]
    pub fn scatter(&self, out: &mut [f64], width: usize, g: f64) {
        let (fx, fy) = (self.fx, self.fy);
        out[self.y0 * width + self.x0] += g * (1.0 - fx) * (1.0 - fy);
        out[self.y0 * width + self.x1] += g * fx * (1.0 - fy);
        out[self.y1 * width + self.x0] += g * (1.0 - fx) * fy;
        out[self.y1 * width + self.x1] += g * fx * fy;
    }
}

/// Samples `image` at `t(u, v)` for every output pixel. Samples outside the
/// image are 0 and flagged `false` in the returned mask.
pub fn warp(image: &Image, t: &TransformParams) -> Result<(Image, Vec<bool>)> {
    let (w, h) = image.dims();
    t.check_invertible(w, h)?;
    let c = center_of(w, h);
    let mut out = Image::new(w, h);
    let mut mask = vec![false; w * h];
    let src = image.data();
    for v in 0..h {
        for u in 0..w {
            let (x, y) = t.map(u as f64, v as f64, c);
            if let Some(fp) = locate(x, y, w, h) {
                out.set(u, v, fp.sample(src, w));
                mask[v * w + u] = true;
            }
        }
    }
    Ok((out, mask))
}

/// Validity mask of `warp` on a `width x height` grid without sampling.
pub fn valid_mask(width: usize, height: usize, t: &TransformParams) -> Vec<bool> {
    let c = center_of(width, height);
    let mut mask = vec![false; width * height];
    for v in 0..height {
        for u in 0..width {
            let (x, y) = t.map(u as f64, v as f64, c);
            mask[v * width + u] = locate(x, y, width, height).is_some();
        }
    }
    mask
}
