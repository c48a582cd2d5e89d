//! Reconstruction quality metrics.

use crate::error::Result;
use crate::image::Image;

pub fn mse(estimate: &Image, truth: &Image) -> Result<f64> {
    estimate.check_same(truth)?;
    let s: f64 = estimate
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(s / truth.len() as f64)
}

/// `10 log10(peak^2 / MSE)` with `peak = max(truth) - min(truth)`.
/// Identical images give `+inf`.
pub fn psnr(estimate: &Image, truth: &Image) -> Result<f64> {
    let m = mse(estimate, truth)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = truth.max() - truth.min();
    Ok(10.0 * (peak * peak / m).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_is_infinite() {
        let a = Image::from_fn(4, 4, |x, y| (x + y) as f64);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn constant_offset_on_unit_range() {
        let t = Image::from_fn(8, 8, |x, _| x as f64 / 7.0);
        let e = t.map(|v| v + 0.1);
        assert!((psnr(&e, &t).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(psnr(&Image::new(2, 2), &Image::new(2, 3)).is_err());
    }
}
