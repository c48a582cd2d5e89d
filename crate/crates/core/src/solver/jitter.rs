//! Spatial and temporal correlation of fixed-pattern noise from a
//! flat-field stack, and the jitter recommendations that follow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::gaussian_blur;
use crate::image::Image;
use crate::sensor::FrameStack;

pub const PATCHES: usize = 48;
pub const MIN_PATCH: usize = 16;
pub const MAX_PATCH: usize = 64;
/// Shift recommendation threshold on the diagonal spatial correlation.
pub const SPATIAL_THRESHOLD: f64 = 0.1;
/// Frame-count recommendation threshold on the temporal correlation.
pub const TEMPORAL_THRESHOLD: f64 = 0.8;
/// Fraction of mean-frame variance surviving a sigma-4 blur above which the
/// stack is flagged as containing scene structure.
pub const FLATNESS_LIMIT: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct JitterStats {
    /// Lag actually used (clamped to what the frame size allows).
    pub max_lag: usize,
    pub patch_size: usize,
    pub patches: usize,
    /// `(2 max_lag + 1)^2` map; pixel `(max_lag + dx, max_lag + dy)` holds
    /// the correlation at shift `(dx, dy)`.
    pub spatial_autocorr: Image,
    /// Correlation between frames `t` and `t + lag`, `lag = 0..L`.
    pub temporal_autocorr: Vec<f64>,
    /// Smallest diagonal shift with correlation below 0.1, if any.
    pub recommended_shift_px: Option<usize>,
    /// Last lag before the temporal correlation first drops below 0.8.
    pub recommended_max_frames: usize,
    pub warnings: Vec<String>,
}

fn ncc(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (da, db) = (x - ma, y - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 && sbb == 0.0 {
        return 1.0;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn patch(img: &Image, x0: usize, y0: usize, p: usize, out: &mut Vec<f64>) {
    out.clear();
    for y in y0..y0 + p {
        out.extend_from_slice(&img.row(y)[x0..x0 + p]);
    }
}

/// Computes spatial and temporal fixed-pattern correlations.
pub fn estimate_jitter_stats(stack: &FrameStack, max_lag: usize) -> Result<JitterStats> {
    let first = stack.frames.first().ok_or(Error::EmptyStack)?;
    if stack.len() < 2 {
        return Err(Error::Config("jitter statistics need at least 2 frames".into()));
    }
    let (w, h) = first.dims();
    let side = w.min(h);
    if side < MIN_PATCH {
        return Err(Error::Config(format!("frames must be at least {MIN_PATCH}x{MIN_PATCH}")));
    }
    let lag = max_lag.min((side - MIN_PATCH) / 2);
    let p = (side - 2 * lag).clamp(MIN_PATCH, MAX_PATCH);
    let mut warnings = Vec::new();
    if lag < max_lag {
        warnings.push(format!("max lag reduced from {max_lag} to {lag} to fit the frame"));
    }

    let l = stack.len();
    let mut mean = Image::new(w, h);
    for f in &stack.frames {
        for (m, v) in mean.data_mut().iter_mut().zip(f.data()) {
            *m += v / l as f64;
        }
    }
    let total_var = mean.variance();
    if total_var > 0.0 && gaussian_blur(&mean, 4.0).variance() / total_var > FLATNESS_LIMIT {
        warnings.push("frames contain low-frequency structure; statistics may be confounded by scene content".into());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x6a17_7e55);
    let k = 2 * lag + 1;
    let mut map = vec![0.0; k * k];
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..PATCHES {
        let x0 = rng.gen_range(lag..=w - lag - p);
        let y0 = rng.gen_range(lag..=h - lag - p);
        patch(&mean, x0, y0, p, &mut a);
        for dy in 0..k {
            for dx in 0..k {
                patch(&mean, x0 + dx - lag, y0 + dy - lag, p, &mut b);
                map[dy * k + dx] += ncc(&a, &b) / PATCHES as f64;
            }
        }
    }
    let centre = lag * k + lag;
    map[centre] = 1.0;
    let spatial = Image::from_vec(k, k, map)?;

    let mut temporal = vec![0.0; l];
    for (tau, slot) in temporal.iter_mut().enumerate() {
        let pairs = l - tau;
        *slot = (0..pairs)
            .map(|t| ncc(stack.frames[t].data(), stack.frames[t + tau].data()))
            .sum::<f64>()
            / pairs as f64;
    }
    temporal[0] = 1.0;

    let recommended_shift_px = (1..=lag).find(|&d| {
        let c = spatial.get(lag + d, lag + d)
            + spatial.get(lag - d, lag - d)
            + spatial.get(lag + d, lag - d)
            + spatial.get(lag - d, lag + d);
        c / 4.0 < SPATIAL_THRESHOLD
    });
    let recommended_max_frames = temporal
        .iter()
        .position(|&c| c < TEMPORAL_THRESHOLD)
        .map(|i| i - 1)
        .unwrap_or(l - 1);

    Ok(JitterStats {
        max_lag: lag,
        patch_size: p,
        patches: PATCHES,
        spatial_autocorr: spatial,
        temporal_autocorr: temporal,
        recommended_shift_px,
        recommended_max_frames,
        warnings,
    })
}
