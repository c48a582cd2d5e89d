//! Coarse-to-fine intensity registration.
//!
//! [`register_pair`] estimates `t` with `warp(reference, t) ≈ moving`, i.e.
//! the same convention the forward model uses for frame `k`. Both images are
//! normalised to zero mean and unit variance first, so an unknown global
//! gain/offset between them does not bias the fit.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::pyramid::Pyramid;
use crate::geometry::transform::{center_of, TransformKind, TransformParams};
use crate::geometry::warp::locate;
use crate::image::Image;

pub const MAX_ITERS_PER_LEVEL: usize = 50;
/// Convergence threshold on the largest corner displacement of an update.
pub const CONVERGENCE_PX: f64 = 1e-4;
pub const DIVERGENCE_STREAK: usize = 5;
pub const DEFAULT_LEVELS: usize = 4;
/// Extra border band (pixels, per level) excluded beyond the displacement.
pub const BORDER_PAD: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub transform: TransformParams,
    pub converged: bool,
    /// Mean squared difference of the normalised images at the solution.
    pub ssd: f64,
}

fn normalized(img: &Image) -> Image {
    let m = img.mean();
    let s = img.variance().sqrt();
    let s = if s > 0.0 { s } else { 1.0 };
    img.map(|v| (v - m) / s)
}

fn central_gradients(img: &Image) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = img.dims();
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let dxs = (xr - xl).max(1) as f64;
            let dys = (yd - yu).max(1) as f64;
            gx[y * w + x] = (img.get(xr, y) - img.get(xl, y)) / dxs;
            gy[y * w + x] = (img.get(x, yd) - img.get(x, yu)) / dys;
        }
    }
    (gx, gy)
}

/// Photometric correction `moving ≈ gain * reference + bias` estimated
/// alongside the geometry.
#[derive(Clone, Copy, Debug)]
struct Photometric {
    gain: f64,
    bias: f64,
}

impl Default for Photometric {
    fn default() -> Self {
        Self { gain: 1.0, bias: 0.0 }
    }
}

/// Mean squared residual over valid samples, or `None` with no overlap.
fn mean_ssd(
    reference: &Image,
    moving: &Image,
    t: &TransformParams,
    ph: Photometric,
    margin: usize,
) -> Option<f64> {
    let (w, h) = reference.dims();
    let c = center_of(w, h);
    let src = reference.data();
    let mut acc = 0.0;
    let mut n = 0usize;
    for v in margin..h - margin {
        for u in margin..w - margin {
            let (x, y) = t.map(u as f64, v as f64, c);
            if let Some(fp) = locate(x, y, w, h) {
                let r = ph.gain * fp.sample(src, w) + ph.bias - moving.get(u, v);
                acc += r * r;
                n += 1;
            }
        }
    }
    (n > 0).then(|| acc / n as f64)
}

struct LevelOutcome {
    transform: TransformParams,
    photometric: Photometric,
    ssd: f64,
    converged: bool,
}

fn gauss_newton_level(
    reference: &Image,
    moving: &Image,
    start: TransformParams,
    photometric: Photometric,
) -> Result<LevelOutcome> {
    let (w, h) = reference.dims();
    let c = center_of(w, h);
    let kind = start.kind;
    let np = kind.param_count();
    // geometric parameters, then photometric gain and bias
    let nt = np + 2;
    let (gx, gy) = central_gradients(reference);
    let src = reference.data();

    // Pixels near the moving frame's border may see content the reference
    // never imaged; skip a band as wide as the expected displacement.
    let margin = (start.max_corner_displacement(w, h).ceil() as usize + BORDER_PAD).min(w.min(h) / 4);
    let mut t = start;
    let mut ph = photometric;
    let mut best_ssd = mean_ssd(reference, moving, &t, ph, margin).unwrap_or(f64::INFINITY);
    let mut best = (t.clone(), ph);
    let mut prev_ssd = best_ssd;
    let mut streak = 0;
    let mut converged = false;

    for _ in 0..MAX_ITERS_PER_LEVEL {
        t.check_invertible(w, h)?;
        let mut jtj = DMatrix::<f64>::zeros(nt, nt);
        let mut jtr = DVector::<f64>::zeros(nt);
        let mut row = [0.0; 10];
        let mut n = 0usize;
        for v in margin..h - margin {
            for u in margin..w - margin {
                let m = t.map_with_jacobian(u as f64, v as f64, c);
                let Some(fp) = locate(m.x, m.y, w, h) else {
                    continue;
                };
                let sampled = fp.sample(src, w);
                let r = ph.gain * sampled + ph.bias - moving.get(u, v);
                let ix = ph.gain * fp.sample(&gx, w);
                let iy = ph.gain * fp.sample(&gy, w);
                for i in 0..np {
                    row[i] = ix * m.dx[i] + iy * m.dy[i];
                }
                row[np] = sampled;
                row[np + 1] = 1.0;
                for i in 0..nt {
                    jtr[i] += row[i] * r;
                    for j in i..nt {
                        jtj[(i, j)] += row[i] * row[j];
                    }
                }
                n += 1;
            }
        }
        if n < nt {
            break;
        }
        for i in 0..nt {
            for j in 0..i {
                jtj[(i, j)] = jtj[(j, i)];
            }
        }
        // Tiny Tikhonov term keeps flat patches solvable.
        let damp = 1e-9 * (jtj.trace() / nt as f64).max(1e-12);
        for i in 0..nt {
            jtj[(i, i)] += damp;
        }
        let Some(delta) = jtj.cholesky().map(|ch| ch.solve(&(-jtr))) else {
            break;
        };
        let mut next = t.clone();
        for i in 0..np {
            next.params[i] += delta[i];
        }
        let step_px = corner_shift(&t, &next, w, h);
        t = next;
        ph.gain += delta[np];
        ph.bias += delta[np + 1];
        let ssd = mean_ssd(reference, moving, &t, ph, margin).unwrap_or(f64::INFINITY);
        if ssd < best_ssd {
            best_ssd = ssd;
            best = (t.clone(), ph);
        }
        if ssd > prev_ssd {
            streak += 1;
            if streak >= DIVERGENCE_STREAK {
                return Ok(LevelOutcome {
                    transform: best.0,
                    photometric: best.1,
                    ssd: best_ssd,
                    converged: false,
                });
            }
        } else {
            streak = 0;
        }
        prev_ssd = ssd;
        if step_px < CONVERGENCE_PX {
            converged = true;
            break;
        }
    }
    Ok(LevelOutcome {
        transform: best.0,
        photometric: best.1,
        ssd: best_ssd,
        converged,
    })
}

fn corner_shift(a: &TransformParams, b: &TransformParams, w: usize, h: usize) -> f64 {
    let c = center_of(w, h);
    let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
    [(0.0, 0.0), (wf, 0.0), (0.0, hf), (wf, hf)]
        .iter()
        .map(|&(x, y)| {
            let (ax, ay) = a.map(x, y, c);
            let (bx, by) = b.map(x, y, c);
            ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Finds `t` of the given kind minimising the normalised SSD between
/// `warp(reference, t)` and `moving`, coarse to fine over `levels`
/// pyramid levels.
pub fn register_pair(
    reference: &Image,
    moving: &Image,
    kind: TransformKind,
    levels: usize,
) -> Result<Registration> {
    reference.check_same(moving)?;
    if levels < 1 {
        return Err(Error::Config("registration needs at least one level".into()));
    }
    let rp = Pyramid::build(&normalized(reference), levels);
    let mp = Pyramid::build(&normalized(moving), levels);
    let mut t = TransformParams::identity(kind);
    let mut ph = Photometric::default();
    let mut outcome = None;
    for level in (0..rp.len()).rev() {
        if level + 1 < rp.len() {
            t = t.scaled(2.0);
        }
        let o = gauss_newton_level(&rp.levels[level], &mp.levels[level], t, ph)?;
        t = o.transform.clone();
        ph = o.photometric;
        outcome = Some(o);
    }
    let o = outcome.expect("pyramid has at least one level");
    Ok(Registration {
        transform: o.transform,
        converged: o.converged,
        ssd: o.ssd,
    })
}

/// Registers every frame against frame 0. Frame 0 gets the identity.
pub fn register_stack(
    frames: &[Image],
    kind: TransformKind,
    levels: usize,
) -> Result<Vec<Registration>> {
    let Some(first) = frames.first() else {
        return Err(Error::EmptyStack);
    };
    let rest: Vec<Result<Registration>> = frames[1..]
        .par_iter()
        .enumerate()
        .map(|(i, f)| {
            register_pair(first, f, kind, levels).map_err(|e| Error::Registration {
                frame: i + 1,
                source: Box::new(e),
            })
        })
        .collect();
    let mut out = vec![Registration {
        transform: TransformParams::identity(kind),
        converged: true,
        ssd: 0.0,
    }];
    for r in rest {
        out.push(r?);
    }
    Ok(out)
}
