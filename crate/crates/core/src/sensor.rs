//! Microbolometer physics and synthetic frame-stack generation.
//!
//! Frames follow `y_k = g ⊙ (D_Q warp(x0, T_k) + o) + n`: the offset sits
//! inside the gain, the same model the solvers invert.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::resample::{box_downsample, downsample_mask, gaussian_blur};
use crate::geometry::transform::TransformParams;
use crate::geometry::warp::warp;
use crate::image::Image;

pub const MIN_GAIN: f64 = 0.05;
/// Largest tolerated fraction of out-of-bounds samples in a simulated frame.
pub const MAX_INVALID_FRACTION: f64 = 0.5;

const STREAM_COLUMN: u64 = 1;
const STREAM_ROW: u64 = 2;
const STREAM_PIXEL: u64 = 3;
const STREAM_OFFSET: u64 = 4;
const STREAM_FRAME: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BolometerParams {
    /// Conversion efficiency, in (0, 1].
    pub alpha: f64,
    /// Thermal capacitance C (J/K).
    pub capacitance: f64,
    /// Thermal conductance G (W/K).
    pub conductance: f64,
    /// Temperature coefficient of resistance (1/K).
    pub beta: f64,
    /// Average resistance (ohm).
    pub r_avg: f64,
    /// Bias current (A).
    pub i_bias: f64,
}

impl BolometerParams {
    pub fn new(
        alpha: f64,
        capacitance: f64,
        conductance: f64,
        beta: f64,
        r_avg: f64,
        i_bias: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {alpha}")));
        }
        if !(capacitance > 0.0 && conductance > 0.0) {
            return Err(Error::Config(
                "thermal capacitance and conductance must be positive".into(),
            ));
        }
        Ok(Self {
            alpha,
            capacitance,
            conductance,
            beta,
            r_avg,
            i_bias,
        })
    }

    /// Thermal time constant C / G (s).
    pub fn tau(&self) -> f64 {
        self.capacitance / self.conductance
    }
}

/// Pixel temperature change `t` seconds after the incident flux steps from
/// `phi1` to `phi2` (watts).
pub fn step_response(p: &BolometerParams, phi1: f64, phi2: f64, t: f64) -> f64 {
    let decay = (-t / p.tau()).exp();
    p.alpha * phi1 / p.conductance * decay + p.alpha * phi2 / p.conductance * (1.0 - decay)
}

/// Steady-state linear response `ΔV = g Φ + o` with `g = I α β R / G` and
/// `o = -g Φ_fpa`.
pub fn gain_offset_from_physics(p: &BolometerParams, phi_fpa: f64) -> (f64, f64) {
    let g = p.i_bias * p.alpha * p.beta * p.r_avg / p.conductance;
    (g, -g * phi_fpa)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoissonStage {
    /// Photon noise on the scene radiance, before gain and offset.
    Pre,
    /// Photon noise on the gained signal.
    #[default]
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Photons per count; 0 disables shot noise.
    pub poisson_scale: f64,
    pub poisson_stage: PoissonStage,
    /// Gaussian readout noise std, counts.
    pub read_sigma: f64,
    pub column_gain_sigma: f64,
    pub row_gain_sigma: f64,
    /// Std of the per-pixel gain field.
    pub pixel_gain_sigma: f64,
    /// AR(1) correlation length of the per-pixel gain field, pixels; 0 = iid.
    pub gain_correlation_length: f64,
    /// Gaussian blur sigma of the structured offset, pixels.
    pub offset_smoothness: f64,
    /// Peak absolute value of the structured offset, counts.
    pub offset_amplitude: f64,
    /// Peak of an optional centred radial offset bump.
    pub narcissus_amplitude: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            poisson_scale: 100.0,
            poisson_stage: PoissonStage::Post,
            read_sigma: 0.0,
            column_gain_sigma: 0.1,
            row_gain_sigma: 0.0,
            pixel_gain_sigma: 0.0,
            gain_correlation_length: 0.0,
            offset_smoothness: 16.0,
            offset_amplitude: 0.0,
            narcissus_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// Every noise and non-uniformity term disabled.
    pub fn noiseless(seed: u64) -> Self {
        Self {
            poisson_scale: 0.0,
            read_sigma: 0.0,
            column_gain_sigma: 0.0,
            row_gain_sigma: 0.0,
            pixel_gain_sigma: 0.0,
            gain_correlation_length: 0.0,
            offset_amplitude: 0.0,
            narcissus_amplitude: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("poisson_scale", self.poisson_scale),
            ("read_sigma", self.read_sigma),
            ("column_gain_sigma", self.column_gain_sigma),
            ("row_gain_sigma", self.row_gain_sigma),
            ("pixel_gain_sigma", self.pixel_gain_sigma),
            ("gain_correlation_length", self.gain_correlation_length),
            ("offset_smoothness", self.offset_smoothness),
            ("offset_amplitude", self.offset_amplitude),
        ];
        for (name, v) in fields {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Scene-independent per-pixel sensor state.
#[derive(Clone, Debug, PartialEq)]
pub struct NonUniformity {
    pub gain: Image,
    pub offset: Image,
}

impl NonUniformity {
    pub fn uniform(width: usize, height: usize, gain: f64, offset: f64) -> Self {
        Self {
            gain: Image::filled(width, height, gain),
            offset: Image::filled(width, height, offset),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.gain.dims()
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n).map(|_| normal.sample(rng)).collect()
}

/// Unit-variance field with separable autocorrelation
/// `exp(-|dx|/length) * exp(-|dy|/length)`; white noise when `length == 0`.
pub fn ar1_field(width: usize, height: usize, length: f64, rng: &mut ChaCha8Rng) -> Image {
    let mut f = Image::from_vec(width, height, gaussian_vec(rng, width * height))
        .expect("sized to the image");
    if length <= 0.0 {
        return f;
    }
    let rho = (-1.0 / length).exp();
    let innov = (1.0 - rho * rho).sqrt();
    for y in 0..height {
        for x in 1..width {
            let v = rho * f.get(x - 1, y) + innov * f.get(x, y);
            f.set(x, y, v);
        }
    }
    for y in 1..height {
        for x in 0..width {
            let v = rho * f.get(x, y - 1) + innov * f.get(x, y);
            f.set(x, y, v);
        }
    }
    f
}

/// Draws gain and offset maps for a `width x height` sensor.
///
/// gain = 1 + column term + row term + pixel field (AR(1) correlated),
/// clamped to at least 0.05. offset = amplitude × (blurred white noise,
/// zero mean, peak |value| 1) + optional centred radial bump.
pub fn sample_nonuniformity(width: usize, height: usize, cfg: &NoiseConfig) -> Result<NonUniformity> {
    if width < 8 || height < 8 {
        return Err(Error::Config(format!(
            "sensor must be at least 8x8, got {width}x{height}"
        )));
    }
    cfg.validate()?;
    let col = gaussian_vec(&mut cfg.rng(STREAM_COLUMN), width);
    let row = gaussian_vec(&mut cfg.rng(STREAM_ROW), height);
    let field = if cfg.pixel_gain_sigma > 0.0 {
        Some(ar1_field(
            width,
            height,
            cfg.gain_correlation_length,
            &mut cfg.rng(STREAM_PIXEL),
        ))
    } else {
        None
    };
    let gain = Image::from_fn(width, height, |x, y| {
        let mut g = 1.0 + cfg.column_gain_sigma * col[x] + cfg.row_gain_sigma * row[y];
        if let Some(f) = &field {
            g += cfg.pixel_gain_sigma * f.get(x, y);
        }
        g.max(MIN_GAIN)
    });

    let mut offset = Image::new(width, height);
    if cfg.offset_amplitude > 0.0 {
        let white = Image::from_vec(
            width,
            height,
            gaussian_vec(&mut cfg.rng(STREAM_OFFSET), width * height),
        )?;
        let blurred = gaussian_blur(&white, cfg.offset_smoothness);
        let m = blurred.mean();
        let peak = blurred.data().iter().fold(0.0f64, |a, v| a.max((v - m).abs()));
        let k = if peak > 0.0 { cfg.offset_amplitude / peak } else { 0.0 };
        offset = blurred.map(|v| (v - m) * k);
    }
    if cfg.narcissus_amplitude != 0.0 {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let s = 0.3 * width.min(height) as f64;
        for y in 0..height {
            for x in 0..width {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = offset.get(x, y) + cfg.narcissus_amplitude * (-r2 / (2.0 * s * s)).exp();
                offset.set(x, y, v);
            }
        }
    }
    Ok(NonUniformity { gain, offset })
}

/// Everything used to synthesise a stack.
#[derive(Clone, Debug)]
pub struct GroundTruth {
    /// Latent scene at the reconstruction (possibly super-resolved) grid.
    pub scene: Image,
    pub nonuniformity: NonUniformity,
    /// Per-frame transforms in scene-grid pixel units; frame 0 is identity.
    pub transforms: Vec<TransformParams>,
}

#[derive(Clone, Debug)]
pub struct FrameStack {
    pub frames: Vec<Image>,
    /// Per-frame validity of every sensor pixel (all true for real captures).
    pub masks: Vec<Vec<bool>>,
    /// Downsampling factor between scene grid and sensor.
    pub downsample: usize,
    pub truth: Option<GroundTruth>,
}

impl FrameStack {
    /// Stack of captured frames without ground truth; every pixel is valid.
    pub fn from_frames(frames: Vec<Image>) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptyStack)?;
        for f in &frames[1..] {
            first.check_same(f)?;
        }
        let masks = frames.iter().map(|f| vec![true; f.len()]).collect();
        Ok(Self {
            frames,
            masks,
            downsample: 1,
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(width, height)` of the sensor frames.
    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

/// Renders `L` frames of `x0` through the sensor.
///
/// `x0` lives on a grid `downsample` times finer than the sensor described
/// by `nu`; the transforms are in that grid's pixels and the first must be
/// the identity.
pub fn simulate_capture(
    x0: &Image,
    nu: &NonUniformity,
    transforms: &[TransformParams],
    cfg: &NoiseConfig,
    downsample: usize,
) -> Result<FrameStack> {
    cfg.validate()?;
    if downsample < 1 {
        return Err(Error::BadFactor(downsample));
    }
    let (sw, sh) = nu.dims();
    if x0.dims() != (sw * downsample, sh * downsample) {
        return Err(Error::Config(format!(
            "scene is {}x{} but sensor {sw}x{sh} at factor {downsample} needs {}x{}",
            x0.width(),
            x0.height(),
            sw * downsample,
            sh * downsample
        )));
    }
    let first = transforms
        .first()
        .ok_or_else(|| Error::Config("at least one transform is required".into()))?;
    if !first.is_identity(0.0) {
        return Err(Error::Config("first transform must be the identity".into()));
    }

    let rendered: Vec<Result<(Image, Vec<bool>)>> = transforms
        .par_iter()
        .enumerate()
        .map(|(k, t)| {
            let (warped, mask_hr) = warp(x0, t)?;
            let invalid = mask_hr.iter().filter(|m| !**m).count() as f64 / mask_hr.len() as f64;
            if invalid > MAX_INVALID_FRACTION {
                return Err(Error::JitterTooLarge {
                    frame: k,
                    fraction: 100.0 * invalid,
                });
            }
            let clean = box_downsample(&warped, downsample)?.image;
            let mask = downsample_mask(&mask_hr, x0.width(), downsample);

            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ k as u64);
            rng.set_stream(STREAM_FRAME);
            let read = Normal::new(0.0, cfg.read_sigma.max(f64::MIN_POSITIVE))
                .expect("finite sigma");
            let shot = |v: f64, rng: &mut ChaCha8Rng| -> f64 {
                if cfg.poisson_scale <= 0.0 {
                    return v;
                }
                let lambda = v * cfg.poisson_scale;
                if lambda <= 0.0 {
                    return 0.0;
                }
                Poisson::new(lambda).expect("positive rate").sample(rng) / cfg.poisson_scale
            };
            let mut frame = Image::new(sw, sh);
            for i in 0..sw * sh {
                let g = nu.gain.data()[i];
                let o = nu.offset.data()[i];
                let x = clean.data()[i];
                let mut y = match cfg.poisson_stage {
                    PoissonStage::Post => shot(g * (x + o), &mut rng),
                    PoissonStage::Pre => g * (shot(x, &mut rng) + o),
                };
                if cfg.read_sigma > 0.0 {
                    y += read.sample(&mut rng);
                }
                frame.data_mut()[i] = y;
            }
            Ok((frame, mask))
        })
        .collect();

    let mut frames = Vec::with_capacity(transforms.len());
    let mut masks = Vec::with_capacity(transforms.len());
    for r in rendered {
        let (f, m) = r?;
        frames.push(f);
        masks.push(m);
    }
    Ok(FrameStack {
        frames,
        masks,
        downsample,
        truth: Some(GroundTruth {
            scene: x0.clone(),
            nonuniformity: nu.clone(),
            transforms: transforms.to_vec(),
        }),
    })
}

/// Random jitter transforms: frame 0 is the identity, the others shift
/// uniformly in `[-jitter, jitter]^2` pixels and, for non-translation kinds,
/// rotate by up to `max_rotation_deg`.
pub fn random_jitter(
    count: usize,
    jitter: f64,
    kind: crate::geometry::TransformKind,
    max_rotation_deg: f64,
    seed: u64,
) -> Vec<TransformParams> {
    use crate::geometry::TransformKind;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_FRAME + 1);
    let mut out = vec![TransformParams::identity(kind)];
    for _ in 1..count {
        let tx = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        let ty = if jitter > 0.0 { rng.gen_range(-jitter..=jitter) } else { 0.0 };
        let theta = if max_rotation_deg > 0.0 {
            rng.gen_range(-max_rotation_deg..=max_rotation_deg).to_radians()
        } else {
            0.0
        };
        let t = match kind {
            TransformKind::Translation => TransformParams::translation(tx, ty),
            _ => TransformParams::rigid(theta, tx, ty).promote(kind),
        };
        out.push(t);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> BolometerParams {
        BolometerParams::new(0.8, 2e-9, 2e-7, 0.02, 1e5, 1e-4).unwrap()
    }

    #[test]
    fn step_response_limits() {
        let p = params();
        let r0 = step_response(&p, 3e-7, 1e-7, 0.0);
        assert!((r0 - 0.8 * 3e-7 / 2e-7).abs() < 1e-15);
        let inf = step_response(&p, 3e-7, 1e-7, 50.0 * p.tau());
        let target = 0.8 * 1e-7 / 2e-7;
        assert!(((inf - target) / target).abs() < 1e-15);
    }

    #[test]
    fn step_response_at_tau() {
        // 0.4 * (1 - e^-1), evaluated independently.
        let p = params();
        let v = step_response(&p, 0.0, 1e-7, p.tau());
        assert!((v - 0.252_848_223_531_423).abs() < 1e-12);
    }

    #[test]
    fn step_response_monotone_for_rising_flux() {
        let p = params();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let v = step_response(&p, 1e-8, 1e-7, i as f64 * p.tau() / 10.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn physical_gain_and_offset() {
        let p = params();
        let (g, o) = gain_offset_from_physics(&p, 0.0);
        assert!((g - 8e5).abs() < 1e-6);
        assert_eq!(o, 0.0);
        let mut p2 = p;
        p2.i_bias *= 2.0;
        let (g1, o1) = gain_offset_from_physics(&p, 1e-7);
        let (g2, o2) = gain_offset_from_physics(&p2, 1e-7);
        assert!((g2 - 2.0 * g1).abs() < 1e-9);
        assert!((o2 - 2.0 * o1).abs() < 1e-9);
        assert!((o1 + g1 * 1e-7).abs() < 1e-12);
    }

    #[test]
    fn invalid_bolometer_params_are_rejected() {
        assert!(BolometerParams::new(0.0, 1.0, 1.0, 0.0, 1.0, 1.0).is_err());
        assert!(BolometerParams::new(0.5, -1.0, 1.0, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_config_gives_unit_gain_zero_offset() {
        let nu = sample_nonuniformity(16, 12, &NoiseConfig::noiseless(3)).unwrap();
        assert!(nu.gain.data().iter().all(|&g| g == 1.0));
        assert!(nu.offset.data().iter().all(|&o| o == 0.0));
    }

    #[test]
    fn column_gain_is_constant_per_column() {
        let cfg = NoiseConfig {
            column_gain_sigma: 0.1,
            ..NoiseConfig::noiseless(5)
        };
        let nu = sample_nonuniformity(32, 20, &cfg).unwrap();
        for x in 0..32 {
            let g0 = nu.gain.get(x, 0);
            assert!((0..20).all(|y| nu.gain.get(x, y) == g0));
        }
    }

    #[test]
    fn offset_peak_matches_amplitude() {
        let cfg = NoiseConfig {
            offset_amplitude: 0.05,
            offset_smoothness: 4.0,
            ..NoiseConfig::noiseless(9)
        };
        let nu = sample_nonuniformity(32, 32, &cfg).unwrap();
        let peak = nu.offset.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!((peak - 0.05).abs() < 1e-12);
        assert!(nu.offset.mean().abs() < 1e-12);
    }

    #[test]
    fn tiny_sensor_is_rejected() {
        assert!(sample_nonuniformity(4, 16, &NoiseConfig::default()).is_err());
    }

    #[test]
    fn noiseless_identity_capture_returns_scene() {
        let x0 = Image::from_fn(16, 16, |x, y| 1.0 + (x * y) as f64 * 0.01);
        let nu = NonUniformity::uniform(16, 16, 1.0, 0.0);
        let s = simulate_capture(
            &x0,
            &nu,
            &[TransformParams::translation(0.0, 0.0)],
            &NoiseConfig::noiseless(0),
            1,
        )
        .unwrap();
        assert_eq!(s.frames[0], x0);
    }

    #[test]
    fn gain_and_offset_substitute_directly() {
        let x0 = Image::from_fn(12, 10, |x, y| 0.5 + (x + y) as f64 * 0.1);
        let nu = NonUniformity::uniform(12, 10, 2.0, 10.0);
        let s = simulate_capture(
            &x0,
            &nu,
            &[TransformParams::translation(0.0, 0.0)],
            &NoiseConfig::noiseless(0),
            1,
        )
        .unwrap();
        for (y, x) in s.frames[0].data().iter().zip(x0.data()) {
            assert!((y - (2.0 * x + 20.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn first_transform_must_be_identity() {
        let x0 = Image::filled(16, 16, 1.0);
        let nu = NonUniformity::uniform(16, 16, 1.0, 0.0);
        let r = simulate_capture(
            &x0,
            &nu,
            &[TransformParams::translation(1.0, 0.0)],
            &NoiseConfig::noiseless(0),
            1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn excessive_jitter_is_rejected() {
        let x0 = Image::filled(16, 16, 1.0);
        let nu = NonUniformity::uniform(16, 16, 1.0, 0.0);
        let ts = [
            TransformParams::translation(0.0, 0.0),
            TransformParams::translation(12.0, 0.0),
        ];
        assert!(matches!(
            simulate_capture(&x0, &nu, &ts, &NoiseConfig::noiseless(0), 1),
            Err(Error::JitterTooLarge { frame: 1, .. })
        ));
    }

    #[test]
    fn capture_is_deterministic() {
        let x0 = Image::from_fn(32, 32, |x, y| 0.2 + 0.01 * (x + 2 * y) as f64);
        let cfg = NoiseConfig {
            read_sigma: 0.01,
            seed: 42,
            ..NoiseConfig::default()
        };
        let nu = sample_nonuniformity(32, 32, &cfg).unwrap();
        let ts = random_jitter(4, 2.0, crate::geometry::TransformKind::Affine, 1.0, 42);
        let a = simulate_capture(&x0, &nu, &ts, &cfg, 1).unwrap();
        let b = simulate_capture(&x0, &nu, &ts, &cfg, 1).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.masks, b.masks);
    }
}
