//! Box downsampling, bicubic upsampling and Gaussian blur.

use crate::error::{Error, Result};
use crate::image::Image;

/// Output of [`box_downsample`]. `cropped` is the `(width, height)` of the
/// region actually used when the input was not divisible by the factor.
#[derive(Clone, Debug)]
pub struct Downsampled {
    pub image: Image,
    pub cropped: Option<(usize, usize)>,
}

/// Mean over non-overlapping `q x q` blocks. Inputs not divisible by `q` are
/// cropped to the largest divisible top-left region.
pub fn box_downsample(image: &Image, q: usize) -> Result<Downsampled> {
    if q < 1 {
        return Err(Error::BadFactor(q));
    }
    let (w, h) = image.dims();
    let (ow, oh) = (w / q, h / q);
    let cropped = if ow * q != w || oh * q != h {
        Some((ow * q, oh * q))
    } else {
        None
    };
    let mut out = vec![0.0; ow * oh];
    box_downsample_into(image.data(), w, q, ow, oh, &mut out);
    Ok(Downsampled {
        image: Image::from_vec(ow, oh, out)?,
        cropped,
    })
}

pub(crate) fn box_downsample_into(
    src: &[f64],
    src_width: usize,
    q: usize,
    ow: usize,
    oh: usize,
    out: &mut [f64],
) {
    let norm = 1.0 / (q * q) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for dy in 0..q {
                let row = (oy * q + dy) * src_width + ox * q;
                for dx in 0..q {
                    acc += src[row + dx];
                }
            }
            out[oy * ow + ox] = acc * norm;
        }
    }
}

/// A low-resolution pixel is valid only if every high-resolution sample in
/// its block is.
pub fn downsample_mask(mask: &[bool], width: usize, q: usize) -> Vec<bool> {
    let height = mask.len() / width;
    let (ow, oh) = (width / q, height / q);
    let mut out = vec![true; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            'block: for dy in 0..q {
                for dx in 0..q {
                    if !mask[(oy * q + dy) * width + ox * q + dx] {
                        out[oy * ow + ox] = false;
                        break 'block;
                    }
                }
            }
        }
    }
    out
}

fn cubic_weight(t: f64) -> f64 {
    // Keys kernel, a = -0.5
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic upsampling by `q`, pixel-centre aligned with [`box_downsample`]:
/// high-resolution pixel `X` sits at low-resolution coordinate
/// `(X - (q-1)/2) / q`. Borders are clamped.
pub fn bicubic_upsample(image: &Image, q: usize) -> Result<Image> {
    if q < 1 {
        return Err(Error::BadFactor(q));
    }
    let (w, h) = image.dims();
    let offset = (q as f64 - 1.0) / 2.0;
    let taps = |n: usize, len: usize| -> ([usize; 4], [f64; 4]) {
        let pos = (n as f64 - offset) / q as f64;
        let base = pos.floor();
        let mut idx = [0usize; 4];
        let mut wts = [0.0; 4];
        for k in 0..4 {
            let i = base as i64 - 1 + k as i64;
            idx[k] = i.clamp(0, len as i64 - 1) as usize;
            wts[k] = cubic_weight(pos - i as f64);
        }
        (idx, wts)
    };
    let xtaps: Vec<_> = (0..w * q).map(|x| taps(x, w)).collect();
    let ytaps: Vec<_> = (0..h * q).map(|y| taps(y, h)).collect();
    Ok(Image::from_fn(w * q, h * q, |x, y| {
        let (xi, xw) = &xtaps[x];
        let (yi, yw) = &ytaps[y];
        let mut acc = 0.0;
        for a in 0..4 {
            let row = image.row(yi[a]);
            let mut r = 0.0;
            for b in 0..4 {
                r += xw[b] * row[xi[b]];
            }
            acc += yw[a] * r;
        }
        acc
    }))
}

/// Normalised 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with symmetric (reflect) borders.
pub fn gaussian_blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = image.dims();
    let reflect = |i: i64, n: usize| -> usize {
        let n = n as i64;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let mut m = i.rem_euclid(period);
        if m >= n {
            m = period - m;
        }
        m as usize
    };
    let mut tmp = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * image.get(reflect(x as i64 + j as i64 - r, w), y);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * tmp.get(x, reflect(y as i64 + j as i64 - r, h));
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Suppresses multiplicative column and row stripes for registration.
///
/// Each column is divided by the ratio of its mean to a Gaussian-smoothed
/// (width `sigma`) version of the column-mean profile, then the same is done
/// for rows. Smooth scene structure is left alone.
pub fn destripe(image: &Image, sigma: f64) -> Image {
    let (w, h) = image.dims();
    let ratios = |profile: Vec<f64>| -> Vec<f64> {
        let line = Image::from_vec(profile.len(), 1, profile).expect("non-empty profile");
        let smooth = gaussian_blur(&line, sigma);
        line.data()
            .iter()
            .zip(smooth.data())
            .map(|(&m, &s)| if m > 0.0 && s > 0.0 { m / s } else { 1.0 })
            .collect()
    };
    let cols = ratios((0..w).map(|x| (0..h).map(|y| image.get(x, y)).sum::<f64>() / h as f64).collect());
    let mut out = Image::from_fn(w, h, |x, y| image.get(x, y) / cols[x]);
    let rows = ratios((0..h).map(|y| out.row(y).iter().sum::<f64>() / w as f64).collect());
    for y in 0..h {
        for x in 0..w {
            let v = out.get(x, y) / rows[y];
            out.set(x, y, v);
        }
    }
    out
}
