//! Forward and adjoint numeric kernels used by the tape.
//!
//! Feature maps are `[C, H, W]`, row-major. Every reduction runs in a fixed
//! order so repeated evaluations are bit-identical.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in 4 * chunks..n {
        tail += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

pub(crate) fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j];
        acc[1] += a[j + 1];
        acc[2] += a[j + 2];
        acc[3] += a[j + 3];
    }
    let mut tail = 0.0;
    for v in &a[4 * chunks..] {
        tail += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a same-padded 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    /// For kernel tap `(ky, kx)`, the ranges of output rows/cols whose
    /// shifted input position is inside the image, and the shift.
    #[inline]
    fn tap(&self, ky: usize, kx: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, isize, isize) {
        let r = (self.k / 2) as isize;
        let dy = ky as isize - r;
        let dx = kx as isize - r;
        let ys = (-dy).max(0) as usize..((self.h as isize - dy).min(self.h as isize)) as usize;
        let xs = (-dx).max(0) as usize..((self.w as isize - dx).min(self.w as isize)) as usize;
        (ys, xs, dy, dx)
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above keeps every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(d: ConvDims, x: &[f64], wt: &[f64], bias: &[f64], out: &mut [f64]) {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    if d.k == 1 {
        for o in 0..d.cout {
            out[o * hw..(o + 1) * hw].fill(bias[o]);
        }
        gemm_acc(d.cout, d.cin, hw, wt, false, x, false, out);
        return;
    }
    for o in 0..d.cout {
        let orow = &mut out[o * hw..(o + 1) * hw];
        orow.fill(bias[o]);
        for i in 0..d.cin {
            let xin = &x[i * hw..(i + 1) * hw];
            let wbase = (o * d.cin + i) * kk;
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let wv = wt[wbase + ky * d.k + kx];
                    let (ys, xs, dy, dx) = d.tap(ky, kx);
                    for y in ys {
                        let sy = (y as isize + dy) as usize;
                        let src = &xin[sy * d.w..(sy + 1) * d.w];
                        let dst = &mut orow[y * d.w..(y + 1) * d.w];
                        let sx0 = (xs.start as isize + dx) as usize;
                        axpy(wv, &src[sx0..sx0 + xs.len()], &mut dst[xs.clone()]);
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients. Any of the outputs may be
/// skipped by passing `None`.
pub(crate) fn conv2d_backward(
    d: ConvDims,
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let hw = d.h * d.w;
    let kk = d.k * d.k;
    if let Some(gb) = gb {
        for o in 0..d.cout {
            gb[o] += sum(&g[o * hw..(o + 1) * hw]);
        }
    }
    if d.k == 1 {
        if let Some(gw) = gw {
            gemm_acc(d.cout, hw, d.cin, g, false, x, true, gw);
        }
        if let Some(gx) = gx {
            gemm_acc(d.cin, d.cout, hw, wt, true, g, false, gx);
        }
        return;
    }
    for o in 0..d.cout {
        let grow = &g[o * hw..(o + 1) * hw];
        for i in 0..d.cin {
            let wbase = (o * d.cin + i) * kk;
            let xin = &x[i * hw..(i + 1) * hw];
            for ky in 0..d.k {
                for kx in 0..d.k {
                    let widx = wbase + ky * d.k + kx;
                    let (ys, xs, dy, dx) = d.tap(ky, kx);
                    let sx0 = (xs.start as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in ys {
                        let sy = (y as isize + dy) as usize;
                        let gseg = &grow[y * d.w + xs.start..y * d.w + xs.end];
                        if gw.is_some() {
                            acc += dot(gseg, &xin[sy * d.w + sx0..sy * d.w + sx0 + xs.len()]);
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let base = i * hw + sy * d.w + sx0;
                            axpy(wt[widx], gseg, &mut gx[base..base + xs.len()]);
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

pub(crate) fn upsample_nearest_forward(c: usize, h: usize, w: usize, x: &[f64], out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let src = &x[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for (xo, v) in dst.iter_mut().enumerate() {
                *v = src[xo / 2];
            }
        }
    }
}

pub(crate) fn upsample_nearest_backward(c: usize, h: usize, w: usize, g: &[f64], gx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        for y in 0..oh {
            let src = &g[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            let dst = &mut gx[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            for (xo, v) in src.iter().enumerate() {
                dst[xo / 2] += v;
            }
        }
    }
}

/// 1-D taps of half-pixel-centred 2x linear upsampling: output `j` reads
/// input coordinate `j/2 - 1/4`, clamped at the borders.
fn linear_up_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|j| {
            let pos = (j as f64 / 2.0 - 0.25).clamp(0.0, (n - 1) as f64);
            let i0 = (pos.floor() as usize).min(n.saturating_sub(2));
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_bilinear_forward(c: usize, h: usize, w: usize, x: &[f64], out: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    let yt = linear_up_taps(h);
    let xt = linear_up_taps(w);
    // Rows upsampled horizontally once, then blended vertically.
    let mut wide = vec![0.0; h * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (r, dst) in src.chunks_exact(w).zip(wide.chunks_exact_mut(ow)) {
            for (o, &(x0, x1, fx)) in dst.iter_mut().zip(&xt) {
                *o = r[x0] + fx * (r[x1] - r[x0]);
            }
        }
        let plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (dst, &(y0, y1, fy)) in plane.chunks_exact_mut(ow).zip(&yt) {
            let r0 = &wide[y0 * ow..(y0 + 1) * ow];
            let r1 = &wide[y1 * ow..(y1 + 1) * ow];
            for ((o, &a), &b) in dst.iter_mut().zip(r0).zip(r1) {
                *o = a + fy * (b - a);
            }
        }
    }
}

pub(crate) fn upsample_bilinear_backward(c: usize, h: usize, w: usize, g: &[f64], gx: &mut [f64]) {
    let (oh, ow) = (2 * h, 2 * w);
    let yt = linear_up_taps(h);
    let xt = linear_up_taps(w);
    let mut wide = vec![0.0; h * ow];
    for ch in 0..c {
        wide.fill(0.0);
        let plane = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for (grow, &(y0, y1, fy)) in plane.chunks_exact(ow).zip(&yt) {
            let (a, b) = (1.0 - fy, fy);
            let r0 = &mut wide[y0 * ow..(y0 + 1) * ow];
            for (o, &v) in r0.iter_mut().zip(grow) {
                *o += a * v;
            }
            let r1 = &mut wide[y1 * ow..(y1 + 1) * ow];
            for (o, &v) in r1.iter_mut().zip(grow) {
                *o += b * v;
            }
        }
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (r, d) in wide.chunks_exact(ow).zip(dst.chunks_exact_mut(w)) {
            for (&v, &(x0, x1, fx)) in r.iter().zip(&xt) {
                d[x0] += (1.0 - fx) * v;
                d[x1] += fx * v;
            }
        }
    }
}

/// Per-channel standardisation. Returns `(mean, inv_std)` per channel.
pub(crate) fn channel_norm_forward(
    c: usize,
    hw: usize,
    eps: f64,
    x: &[f64],
    out: &mut [f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut means = Vec::with_capacity(c);
    let mut inv = Vec::with_capacity(c);
    for ch in 0..c {
        let xs = &x[ch * hw..(ch + 1) * hw];
        let m = sum(xs) / hw as f64;
        let mut var = 0.0;
        for v in xs {
            var += (v - m) * (v - m);
        }
        var /= hw as f64;
        let is = 1.0 / (var + eps).sqrt();
        for (o, v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(xs) {
            *o = (v - m) * is;
        }
        means.push(m);
        inv.push(is);
    }
    (means, inv)
}

pub(crate) fn channel_norm_backward(
    c: usize,
    hw: usize,
    y: &[f64],
    inv: &[f64],
    g: &[f64],
    gx: &mut [f64],
) {
    let n = hw as f64;
    for ch in 0..c {
        let ys = &y[ch * hw..(ch + 1) * hw];
        let gs = &g[ch * hw..(ch + 1) * hw];
        let sg = sum(gs);
        let sgy = dot(gs, ys);
        let k = inv[ch] / n;
        for ((o, &gv), &yv) in gx[ch * hw..(ch + 1) * hw].iter_mut().zip(gs).zip(ys) {
            *o += k * (n * gv - sg - yv * sgy);
        }
    }
}

/// Anisotropic Charbonnier total variation with forward differences; the
/// last row/column contributes nothing.
pub(crate) fn charbonnier_tv(h: usize, w: usize, eps: f64, x: &[f64]) -> f64 {
    let mut total = 0.0;
    for y in 0..h {
        let mut row_acc = 0.0;
        for xx in 0..w {
            let v = x[y * w + xx];
            if xx + 1 < w {
                let d = x[y * w + xx + 1] - v;
                row_acc += (d * d + eps * eps).sqrt() - eps;
            }
            if y + 1 < h {
                let d = x[(y + 1) * w + xx] - v;
                row_acc += (d * d + eps * eps).sqrt() - eps;
            }
        }
        total += row_acc;
    }
    total
}

pub(crate) fn charbonnier_tv_backward(h: usize, w: usize, eps: f64, x: &[f64], g: f64, gx: &mut [f64]) {
    for y in 0..h {
        for xx in 0..w {
            let i = y * w + xx;
            let v = x[i];
            if xx + 1 < w {
                let d = x[i + 1] - v;
                let t = g * d / (d * d + eps * eps).sqrt();
                gx[i + 1] += t;
                gx[i] -= t;
            }
            if y + 1 < h {
                let d = x[i + w] - v;
                let t = g * d / (d * d + eps * eps).sqrt();
                gx[i + w] += t;
                gx[i] -= t;
            }
        }
    }
}
