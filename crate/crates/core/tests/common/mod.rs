#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use thermal_nuc::geometry::TransformKind;
use thermal_nuc::sensor::{ar1_field, random_jitter, sample_nonuniformity, simulate_capture, FrameStack, NoiseConfig};
use thermal_nuc::synth::{smooth_scene, textured_scene};
use thermal_nuc::Image;

/// Fixed-pattern and shot noise shared by the desk-scale and
/// super-resolution experiments.
pub fn desk_noise(seed: u64, range: f64) -> NoiseConfig {
    NoiseConfig {
        column_gain_sigma: 0.1,
        offset_amplitude: 0.05 * range,
        poisson_scale: 100.0,
        seed,
        ..NoiseConfig::default()
    }
}

/// 128x128 smooth scene, three frames, affine jitter of up to 4 px and
/// 2 degrees.
pub fn desk_stack(seed: u64, jitter: f64) -> FrameStack {
    desk_stack_of(smooth_scene(128, 128, seed), seed, jitter)
}

/// [`desk_stack`] with a caller-supplied 128x128 scene.
pub fn desk_stack_of(x0: Image, seed: u64, jitter: f64) -> FrameStack {
    let cfg = desk_noise(seed, x0.max() - x0.min());
    let nu = sample_nonuniformity(128, 128, &cfg).unwrap();
    let rot = if jitter > 0.0 { 2.0 } else { 0.0 };
    let ts = random_jitter(3, jitter, TransformKind::Affine, rot, seed);
    simulate_capture(&x0, &nu, &ts, &cfg, 1).unwrap()
}

/// 256x256 textured scene seen by a 64x64 sensor in 16 frames.
pub fn superres_stack(seed: u64) -> FrameStack {
    let x0 = textured_scene(256, 256, seed);
    let cfg = desk_noise(seed, x0.max() - x0.min());
    let nu = sample_nonuniformity(64, 64, &cfg).unwrap();
    let ts = random_jitter(16, 16.0, TransformKind::Affine, 2.0, seed);
    simulate_capture(&x0, &nu, &ts, &cfg, 4).unwrap()
}

/// Monte Carlo variance of `(1/L) sum_k g(s_k)` with `g = 1 + sigma f` and
/// `f` a unit AR(1) field (white when `length == 0`). Returns the estimate
/// and its standard error.
pub fn mc_average_variance(shifts: &[(usize, usize)], sigma: f64, length: f64, samples: usize, seed: u64) -> (f64, f64) {
    let w = shifts.iter().map(|s| s.0).max().unwrap() + 1;
    let h = shifts.iter().map(|s| s.1).max().unwrap() + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = shifts.len() as f64;
    let mut sq = Vec::with_capacity(samples);
    for _ in 0..samples {
        let f = ar1_field(w, h, length, &mut rng);
        let avg = shifts.iter().map(|&(x, y)| 1.0 + sigma * f.get(x, y)).sum::<f64>() / l;
        sq.push((avg - 1.0).powi(2));
    }
    let n = samples as f64;
    let m = sq.iter().sum::<f64>() / n;
    let v = sq.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Flat-field stack whose gain is an AR(1) field of the given length.
pub fn ar1_flat_stack(length: f64, seed: u64) -> FrameStack {
    let cfg = NoiseConfig {
        pixel_gain_sigma: 0.05,
        gain_correlation_length: length,
        ..NoiseConfig::noiseless(seed)
    };
    let nu = sample_nonuniformity(256, 256, &cfg).unwrap();
    let flat = Image::filled(256, 256, 0.5);
    let ts = vec![thermal_nuc::geometry::TransformParams::identity(TransformKind::Translation); 4];
    simulate_capture(&flat, &nu, &ts, &cfg, 1).unwrap()
}

/// Frames `cos(w t) A + sin(w t) B` for independent white fields `A`, `B`:
/// the correlation between frames `tau` apart is exactly `cos(w tau)`.
pub fn drift_stack(omega: f64, frames: usize, seed: u64) -> FrameStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = ar1_field(96, 96, 0.0, &mut rng);
    let b = ar1_field(96, 96, 0.0, &mut rng);
    let fs = (0..frames)
        .map(|t| {
            let (c, s) = ((omega * t as f64).cos(), (omega * t as f64).sin());
            a.zip_map(&b, |x, y| 1.0 + 0.05 * (c * x + s * y)).unwrap()
        })
        .collect();
    FrameStack::from_frames(fs).unwrap()
}

/// Little-endian PFM bytes of every image, concatenated.
pub fn fingerprint(images: &[&Image]) -> Vec<u8> {
    images.iter().flat_map(|i| thermal_nuc::io::encode_pfm(i)).collect()
}
