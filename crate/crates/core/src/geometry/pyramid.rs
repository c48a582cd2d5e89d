use crate::geometry::resample::gaussian_blur;
use crate::image::Image;

pub const PYRAMID_SIGMA: f64 = 1.0;
pub const MIN_LEVEL_SIZE: usize = 16;

/// Gaussian pyramid; level 0 is full resolution.
#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<Image>,
}

impl Pyramid {
    /// Builds up to `levels` levels, stopping early rather than producing a
    /// level smaller than 16x16.
    pub fn build(image: &Image, levels: usize) -> Self {
        let mut out = vec![image.clone()];
        while out.len() < levels.max(1) {
            let prev = out.last().unwrap();
            let (w, h) = (prev.width().div_ceil(2), prev.height().div_ceil(2));
            if w < MIN_LEVEL_SIZE || h < MIN_LEVEL_SIZE {
                break;
            }
            let blurred = gaussian_blur(prev, PYRAMID_SIGMA);
            // 2x2 block means keep each level centred on the one above it.
            let (pw, ph) = blurred.dims();
            out.push(Image::from_fn(w, h, |x, y| {
                let (x1, y1) = ((2 * x + 1).min(pw - 1), (2 * y + 1).min(ph - 1));
                0.25 * (blurred.get(2 * x, 2 * y)
                    + blurred.get(x1, 2 * y)
                    + blurred.get(2 * x, y1)
                    + blurred.get(x1, y1))
            }));
        }
        Self { levels: out }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_dims_and_floor() {
        let img = Image::from_fn(100, 70, |x, y| (x + 2 * y) as f64);
        let p = Pyramid::build(&img, 10);
        let dims: Vec<_> = p.levels.iter().map(|l| l.dims()).collect();
        assert_eq!(dims, vec![(100, 70), (50, 35), (25, 18)]);
    }

    #[test]
    fn level_means_track_full_resolution() {
        let img = Image::from_fn(128, 128, |x, y| {
            1.0 + 0.5 * ((x as f64) * 0.37).sin() * ((y as f64) * 0.23).cos()
        });
        let p = Pyramid::build(&img, 4);
        assert_eq!(p.len(), 4);
        for l in &p.levels {
            assert!((l.mean() - img.mean()).abs() / img.mean() < 0.01);
        }
    }
}
