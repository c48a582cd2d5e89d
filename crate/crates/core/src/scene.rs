//! Latent-image representations `x0 = N(p)` rendered onto a [`Tape`].
//!
//! * pixel grid: one `H x W` parameter, clamped at zero;
//! * deep decoder: a fixed noise tensor pushed through 1x1 convolutions,
//!   2x upsampling, leaky ReLU and channel normalisation;
//! * coordinate MLP: fixed Fourier features of the pixel grid through 1x1
//!   convolutions (a per-pixel MLP).
//!
//! Neural outputs pass through a sigmoid scaled by `radiance_max`.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffengine::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr;
use crate::optim::{Adam, AdamConfig};

/// Headroom of `radiance_max` over the initialisation's maximum.
pub const RADIANCE_HEADROOM: f64 = 1.2;
const CHECKPOINT_MAGIC: &[u8; 8] = b"TNUCCKP1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    #[serde(alias = "pixel")]
    PixelGrid,
    DeepDecoder,
    CoordMlp,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::PixelGrid => "pixel-grid",
            SceneKind::DeepDecoder => "deep-decoder",
            SceneKind::CoordMlp => "coord-mlp",
        }
    }

    pub fn is_neural(self) -> bool {
        self != SceneKind::PixelGrid
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" | "pixel-grid" => Ok(SceneKind::PixelGrid),
            "deep-decoder" => Ok(SceneKind::DeepDecoder),
            "coord-mlp" => Ok(SceneKind::CoordMlp),
            other => Err(Error::Config(format!("unknown scene model {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeepDecoderConfig {
    pub channels: usize,
    pub layers: usize,
    pub upsample: Upsample,
    pub leaky_slope: f64,
}

impl Default for DeepDecoderConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            layers: 5,
            upsample: Upsample::Bilinear,
            leaky_slope: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordMlpConfig {
    pub fourier_features: usize,
    pub sigma: f64,
    pub hidden: usize,
    pub depth: usize,
    pub leaky_slope: f64,
}

impl Default for CoordMlpConfig {
    fn default() -> Self {
        Self {
            fourier_features: 128,
            sigma: 6.0,
            hidden: 128,
            depth: 3,
            leaky_slope: 0.05,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub deep_decoder: DeepDecoderConfig,
    pub coord_mlp: CoordMlpConfig,
}

#[derive(Clone, Debug)]
pub struct SceneModel {
    pub kind: SceneKind,
    pub config: SceneConfig,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub radiance_max: f64,
    params: Vec<Tensor>,
    fixed_input: Option<Tensor>,
}

/// Nodes created by [`SceneModel::render`].
#[derive(Clone, Debug)]
pub struct SceneGraph {
    /// `[H, W]` image node.
    pub output: NodeId,
    /// Parameter leaves, in [`SceneModel::params`] order.
    pub params: Vec<NodeId>,
    pub fixed_input: Option<NodeId>,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn normal_tensor(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let d = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape, (0..n).map(|_| d.sample(rng)).collect()).expect("non-empty shape")
}

/// 1x1 convolution weights and zero bias, He-initialised.
fn conv_params(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> [Tensor; 2] {
    [
        normal_tensor(vec![cout, cin, 1, 1], (2.0 / cin as f64).sqrt(), rng),
        Tensor::zeros(vec![cout]).expect("non-empty"),
    ]
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(0.01, 0.99);
    (p / (1.0 - p)).ln()
}

impl SceneModel {
    /// Builds a model for a `width x height` output.
    ///
    /// `init` seeds the pixel grid directly and sets `radiance_max` (1.2 x
    /// its maximum) plus the final bias of neural kinds so their first
    /// render has the right mean. Without it the range defaults to `[0, 1]`.
    pub fn build(
        kind: SceneKind,
        width: usize,
        height: usize,
        seed: u64,
        config: &SceneConfig,
        init: Option<&Image>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Config("scene shape must be non-empty".into()));
        }
        if let Some(img) = init {
            if img.dims() != (width, height) {
                return Err(Error::ImageShape {
                    a: img.dims(),
                    b: (width, height),
                });
            }
        }
        let peak = init.map(|i| i.max()).unwrap_or(1.0 / RADIANCE_HEADROOM);
        let radiance_max = if peak > 0.0 { RADIANCE_HEADROOM * peak } else { 1.0 };
        let mean = init.map(|i| i.mean()).unwrap_or(0.5 * radiance_max);
        let mut params = Vec::new();
        let mut fixed_input = None;
        match kind {
            SceneKind::PixelGrid => {
                let img = init.cloned().unwrap_or_else(|| Image::new(width, height));
                params.push(Tensor::from_image(&img));
            }
            SceneKind::DeepDecoder => {
                let cfg = &config.deep_decoder;
                if cfg.channels == 0 || cfg.layers == 0 {
                    return Err(Error::Config("deep decoder needs channels and layers >= 1".into()));
                }
                let f = 1usize << cfg.layers;
                if width < 16 || height < 16 || width % f != 0 || height % f != 0 {
                    let pad = |n: usize| n.max(16).div_ceil(f) * f;
                    return Err(Error::DecoderShape {
                        height,
                        width,
                        layers: cfg.layers,
                        pad_height: pad(height),
                        pad_width: pad(width),
                    });
                }
                let c = cfg.channels;
                fixed_input = Some(normal_tensor(vec![c, height / f, width / f], 1.0, &mut rng(seed, 1)));
                let mut wr = rng(seed, 2);
                for _ in 0..cfg.layers {
                    params.extend(conv_params(c, c, &mut wr));
                }
                let [w, mut b] = conv_params(c, 1, &mut wr);
                b.data_mut()[0] = logit(mean / radiance_max);
                params.extend([w, b]);
            }
            SceneKind::CoordMlp => {
                let cfg = &config.coord_mlp;
                if cfg.fourier_features == 0 || cfg.hidden == 0 {
                    return Err(Error::Config("coordinate MLP needs features and hidden units".into()));
                }
                let f = cfg.fourier_features;
                let freqs = normal_tensor(vec![f, 2], cfg.sigma, &mut rng(seed, 1));
                let mut feats = vec![0.0; 2 * f * height * width];
                let sx = 1.0 / (width.max(2) - 1) as f64;
                let sy = 1.0 / (height.max(2) - 1) as f64;
                for k in 0..f {
                    let (bx, by) = (freqs.data()[2 * k], freqs.data()[2 * k + 1]);
                    for y in 0..height {
                        for x in 0..width {
                            let a = std::f64::consts::TAU * (bx * x as f64 * sx + by * y as f64 * sy);
                            let i = y * width + x;
                            feats[k * height * width + i] = a.sin();
                            feats[(f + k) * height * width + i] = a.cos();
                        }
                    }
                }
                fixed_input = Some(Tensor::new(vec![2 * f, height, width], feats)?);
                let mut wr = rng(seed, 2);
                let mut cin = 2 * f;
                for _ in 0..cfg.depth {
                    params.extend(conv_params(cin, cfg.hidden, &mut wr));
                    cin = cfg.hidden;
                }
                let [w, mut b] = conv_params(cin, 1, &mut wr);
                b.data_mut()[0] = logit(mean / radiance_max);
                params.extend([w, b]);
            }
        }
        Ok(Self {
            kind,
            config: config.clone(),
            seed,
            width,
            height,
            radiance_max,
            params,
            fixed_input,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn fixed_input(&self) -> Option<&Tensor> {
        self.fixed_input.as_ref()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Appends the model to `tape`; parameters become gradient leaves and
    /// the fixed input a constant.
    pub fn render(&self, tape: &mut Tape) -> Result<SceneGraph> {
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone().with_grad(true)))
            .collect();
        let fixed = self.fixed_input.as_ref().map(|t| tape.constant(t.clone()));
        let output = match self.kind {
            SceneKind::PixelGrid => tape.clamp_min(params[0], 0.0),
            SceneKind::DeepDecoder => {
                let cfg = &self.config.deep_decoder;
                let mut h = fixed.expect("decoder has a fixed input");
                for l in 0..cfg.layers {
                    h = tape.conv2d(h, params[2 * l], params[2 * l + 1])?;
                    h = match cfg.upsample {
                        Upsample::Nearest => tape.upsample_nearest2x(h)?,
                        Upsample::Bilinear => tape.upsample_bilinear2x(h)?,
                    };
                    h = tape.leaky_relu(h, cfg.leaky_slope);
                    h = tape.channel_norm(h)?;
                }
                let n = params.len();
                self.head(tape, h, params[n - 2], params[n - 1])?
            }
            SceneKind::CoordMlp => {
                let cfg = &self.config.coord_mlp;
                let mut h = fixed.expect("coordinate MLP has a fixed input");
                for l in 0..cfg.depth {
                    h = tape.conv2d(h, params[2 * l], params[2 * l + 1])?;
                    h = tape.leaky_relu(h, cfg.leaky_slope);
                }
                let n = params.len();
                self.head(tape, h, params[n - 2], params[n - 1])?
            }
        };
        Ok(SceneGraph {
            output,
            params,
            fixed_input: fixed,
        })
    }

    fn head(&self, tape: &mut Tape, h: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tape.conv2d(h, w, b)?;
        let out = tape.sigmoid(out);
        let out = tape.scale(out, self.radiance_max);
        tape.reshape(out, vec![self.height, self.width])
    }

    /// Copies the parameter leaves of `graph` back into the model.
    pub fn load_from_tape(&mut self, tape: &Tape, graph: &SceneGraph) {
        for (p, id) in self.params.iter_mut().zip(&graph.params) {
            p.data_mut().copy_from_slice(tape.value(*id));
        }
    }

    pub fn render_image(&self) -> Result<Image> {
        let mut tape = Tape::new();
        let g = self.render(&mut tape)?;
        let out = tape.forward(&[g.output])?;
        out[0].to_image()
    }

    /// Writes the header and raw little-endian `f64` parameters. The fixed
    /// input is regenerated from the seed on load.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = CheckpointHeader {
            kind: self.kind,
            config: self.config.clone(),
            seed: self.seed,
            width: self.width,
            height: self.height,
            radiance_max: self.radiance_max,
            shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.parameter_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |m: &str| Error::format(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a scene checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(json).map_err(|e| Error::format(path, e.to_string()))?;
        let mut model = Self::build(
            header.kind,
            header.width,
            header.height,
            header.seed,
            &header.config,
            None,
        )?;
        model.radiance_max = header.radiance_max;
        let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.shape().to_vec()).collect();
        if shapes != header.shapes {
            return Err(bad("parameter shapes do not match the model configuration"));
        }
        let mut pos = 16 + hlen;
        for p in &mut model.params {
            for v in p.data_mut() {
                let b = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated parameters"))?;
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
                pos += 8;
            }
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after parameters"));
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: SceneKind,
    config: SceneConfig,
    seed: u64,
    width: usize,
    height: usize,
    radiance_max: f64,
    shapes: Vec<Vec<usize>>,
}

/// Per-iteration diagnostics of [`fit_direct`].
#[derive(Clone, Debug, Default, Serialize)]
pub struct FitCurve {
    pub loss: Vec<f64>,
    pub psnr: Vec<f64>,
}

/// Fits the model to `target` with the MSE loss alone.
///
/// Neural kinds use Adam at `lr`. The pixel grid takes plain gradient steps
/// of size `N/2`, the inverse Lipschitz constant of the mean squared error,
/// which reaches the target in one step.
pub fn fit_direct(model: &mut SceneModel, target: &Image, iters: usize, lr: f64) -> Result<FitCurve> {
    if target.dims() != (model.width, model.height) {
        return Err(Error::ImageShape {
            a: target.dims(),
            b: (model.width, model.height),
        });
    }
    let mut tape = Tape::new();
    let graph = model.render(&mut tape)?;
    let t = tape.constant(Tensor::from_image(target));
    let loss = tape.mse(graph.output, t, None)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        &tape,
        graph.params.iter().map(|&p| (p, 1.0)).collect(),
    );
    let gd_step = target.len() as f64 / 2.0;
    let mut curve = FitCurve::default();
    for it in 0..iters {
        let out = tape.forward(&[loss, graph.output])?;
        let l = out[0].data()[0];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: "direct fit".into(),
            });
        }
        curve.loss.push(l);
        curve.psnr.push(psnr(&out[1].to_image()?, target)?);
        tape.backward(loss)?;
        if model.kind == SceneKind::PixelGrid {
            let (x, g) = tape.leaf_value_and_grad(graph.params[0])?;
            for (xi, gi) in x.iter_mut().zip(g) {
                *xi -= gd_step * gi;
            }
        } else {
            adam.step(&mut tape)?;
        }
    }
    model.load_from_tape(&tape, &graph);
    Ok(curve)
}
