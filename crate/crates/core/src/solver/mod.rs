//! Joint estimation of scene, gain, offset and frame transforms.
//!
//! Every frame is modelled as `y_k = g ⊙ (D_Q warp(x0, T_k) + o)` and the
//! solver minimises
//!
//! ```text
//! sum_k MSE_valid(y_k, pred_k) + w_img TV(x0) + w_off TV(o)
//! ```
//!
//! with Adam, starting from the register-and-average estimate. `x0` is either
//! a pixel grid (the physics + TV solver) or a neural scene model.

mod baseline;
mod jitter;
mod variance;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffengine::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::resample::downsample_mask;
use crate::geometry::{
    bicubic_upsample, destripe, register_stack, valid_mask, Registration, TransformKind, TransformParams,
};
use crate::image::Image;
use crate::io::{write_json, write_pfm, write_transforms};
use crate::optim::{Adam, AdamConfig};
use crate::scene::{fit_direct, SceneConfig, SceneKind, SceneModel};
use crate::sensor::{FrameStack, NonUniformity};

pub use crate::metrics::{mse, psnr};
pub use baseline::average_baseline;
pub use jitter::{estimate_jitter_stats, JitterStats};
pub use variance::averaging_variance;

/// Consecutive iterations above 10x the initial data loss that abort a solve.
pub const DIVERGENCE_WINDOW: usize = 100;
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Transforms closer than this (high-res pixels) to multiples of the factor
/// carry no sub-pixel information.
pub const SUBPIXEL_TOLERANCE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Average,
    PhysicsTv,
    Deepir,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Average => "average",
            Method::PhysicsTv => "physics-tv",
            Method::Deepir => "deepir",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Method::Average),
            "physics-tv" => Ok(Method::PhysicsTv),
            "deepir" => Ok(Method::Deepir),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveConfig {
    pub scene_kind: SceneKind,
    pub scene: SceneConfig,
    pub transform_kind: TransformKind,
    pub iters: usize,
    pub lr: f64,
    pub tv_image_weight: f64,
    pub tv_offset_weight: f64,
    /// Super-resolution factor Q between the scene grid and the sensor.
    pub downsample: usize,
    pub optimize_transforms: bool,
    pub gain_mean_constraint: bool,
    /// Adam iterations fitting a neural scene to the initial estimate.
    pub warmup_iters: usize,
    pub registration_levels: usize,
    pub scene_lr_scale: f64,
    pub gain_offset_lr_scale: f64,
    pub transform_lr_scale: f64,
    pub seed: u64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        Self {
            scene_kind: SceneKind::DeepDecoder,
            scene: SceneConfig::default(),
            transform_kind: TransformKind::Affine,
            iters: 2000,
            lr: 1e-3,
            tv_image_weight: 1e-5,
            tv_offset_weight: 10.0,
            downsample: 1,
            optimize_transforms: true,
            gain_mean_constraint: true,
            warmup_iters: 200,
            registration_levels: crate::geometry::register::DEFAULT_LEVELS,
            scene_lr_scale: 1.0,
            gain_offset_lr_scale: 0.1,
            transform_lr_scale: 0.01,
            seed: 0,
        }
    }
}

impl SolveConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("tv_image_weight", self.tv_image_weight),
            ("tv_offset_weight", self.tv_offset_weight),
            ("scene_lr_scale", self.scene_lr_scale),
            ("gain_offset_lr_scale", self.gain_offset_lr_scale),
            ("transform_lr_scale", self.transform_lr_scale),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.downsample < 1 {
            return Err(Error::BadFactor(self.downsample));
        }
        if self.iters < 1 {
            return Err(Error::Config("iters must be >= 1".into()));
        }
        if self.registration_levels < 1 {
            return Err(Error::Config("registration_levels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Optional starting point overriding registration and averaging.
#[derive(Clone, Debug, Default)]
pub struct SolveInit {
    /// Per-frame transforms in scene-grid pixels.
    pub transforms: Option<Vec<TransformParams>>,
    pub scene: Option<Image>,
    pub gain: Option<Image>,
    pub offset: Option<Image>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub data: Vec<f64>,
    pub tv_image: Vec<f64>,
    pub tv_offset: Vec<f64>,
    pub total: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub method: Method,
    pub x0_hat: Image,
    pub nu_hat: NonUniformity,
    /// In scene-grid pixels.
    pub transforms_hat: Vec<TransformParams>,
    /// Initial registration (sensor pixels).
    pub registration: Vec<Registration>,
    pub loss_curve: LossCurve,
    /// Iteration with the lowest total loss. The final iterate is returned.
    pub best_iteration: usize,
    pub psnr: Option<f64>,
    /// Register-and-average estimate, bicubic-upsampled when `Q > 1`.
    pub baseline: Image,
    pub baseline_psnr: Option<f64>,
    pub single_frame_psnr: Option<f64>,
    pub unknown_count: usize,
    pub equation_count: usize,
    pub warnings: Vec<String>,
    pub model: Option<SceneModel>,
}

/// `3N + P(L-1)` with `N` sensor pixels.
pub fn unknown_count(sensor_pixels: usize, kind: TransformKind, frames: usize) -> usize {
    3 * sensor_pixels + kind.param_count() * frames.saturating_sub(1)
}

fn truth_psnr(stack: &FrameStack, estimate: &Image) -> Result<Option<f64>> {
    match &stack.truth {
        Some(t) if t.scene.dims() == estimate.dims() => Ok(Some(psnr(estimate, &t.scene)?)),
        _ => Ok(None),
    }
}

fn upsampled(img: &Image, q: usize) -> Result<Image> {
    if q == 1 {
        Ok(img.clone())
    } else {
        bicubic_upsample(img, q)
    }
}

fn insufficient_subpixel(transforms: &[TransformParams], q: usize) -> bool {
    transforms.iter().skip(1).all(|t| {
        let (tx, ty) = t.translation_part();
        let off = |v: f64| (v - (v / q as f64).round() * q as f64).abs();
        off(tx) <= SUBPIXEL_TOLERANCE && off(ty) <= SUBPIXEL_TOLERANCE
    })
}

/// Stripe suppression width applied to frames before initial registration.
const DESTRIPE_SIGMA: f64 = 4.0;

struct Start {
    registration: Vec<Registration>,
    transforms: Vec<TransformParams>,
    average: Image,
}

fn start(stack: &FrameStack, cfg: &SolveConfig, init: &SolveInit) -> Result<Start> {
    if stack.is_empty() {
        return Err(Error::EmptyStack);
    }
    let q = cfg.downsample as f64;
    let kind = cfg.transform_kind;
    let (registration, transforms) = match &init.transforms {
        Some(ts) => {
            if ts.len() != stack.len() {
                return Err(Error::Config(format!(
                    "{} initial transforms for {} frames",
                    ts.len(),
                    stack.len()
                )));
            }
            let ts: Vec<_> = ts.iter().map(|t| t.promote(kind.most_general(t.kind))).collect();
            let regs = ts
                .iter()
                .map(|t| Registration {
                    transform: t.scaled(1.0 / q),
                    converged: true,
                    ssd: 0.0,
                })
                .collect();
            (regs, ts)
        }
        None => {
            let frames: Vec<Image> = stack.frames.par_iter().map(|f| destripe(f, DESTRIPE_SIGMA)).collect();
            let coarse = if kind.param_count() > TransformKind::Rigid.param_count() {
                TransformKind::Rigid
            } else {
                kind
            };
            let mut regs = register_stack(&frames, coarse, cfg.registration_levels)?;
            for r in &mut regs {
                r.transform = r.transform.promote(kind);
            }
            let ts = regs.iter().map(|r| r.transform.scaled(q)).collect();
            (regs, ts)
        }
    };
    let sensor: Vec<_> = registration.iter().map(|r| r.transform.clone()).collect();
    let average = average_baseline(stack, &sensor)?;
    Ok(Start {
        registration,
        transforms,
        average,
    })
}

/// Register-and-average only.
pub fn solve_average(stack: &FrameStack, cfg: &SolveConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let s = start(stack, cfg, &SolveInit::default())?;
    let q = cfg.downsample;
    let x0_hat = upsampled(&s.average, q)?;
    let (sw, sh) = stack.dims();
    let psnr = truth_psnr(stack, &x0_hat)?;
    let single = truth_psnr(stack, &upsampled(&stack.frames[0], q)?)?;
    let equation_count = equation_count(&s.transforms, sw, sh, q);
    Ok(SolveReport {
        method: Method::Average,
        baseline: x0_hat.clone(),
        x0_hat,
        nu_hat: NonUniformity::uniform(sw, sh, 1.0, 0.0),
        transforms_hat: s.transforms,
        registration: s.registration,
        loss_curve: LossCurve::default(),
        best_iteration: 0,
        psnr,
        baseline_psnr: psnr,
        single_frame_psnr: single,
        unknown_count: unknown_count(sw * sh, cfg.transform_kind, stack.len()),
        equation_count,
        warnings: vec![],
        model: None,
    })
}

/// Joint solve with a pixel-grid scene and TV on the image only. The offset
/// is unregularised here, so `tv_offset_weight` is ignored.
pub fn solve_physics_tv(stack: &FrameStack, cfg: &SolveConfig) -> Result<SolveReport> {
    let cfg = SolveConfig {
        scene_kind: SceneKind::PixelGrid,
        tv_offset_weight: 0.0,
        ..cfg.clone()
    };
    solve_joint(stack, &cfg, Method::PhysicsTv, &SolveInit::default())
}

/// Joint solve with the configured scene representation.
pub fn solve_deepir(stack: &FrameStack, cfg: &SolveConfig) -> Result<SolveReport> {
    solve_joint(stack, cfg, Method::Deepir, &SolveInit::default())
}

/// [`solve_deepir`] with the box-downsampling factor `cfg.downsample`.
/// Warns when no frame carries sub-pixel shift information.
pub fn solve_superres(stack: &FrameStack, cfg: &SolveConfig) -> Result<SolveReport> {
    solve_deepir(stack, cfg)
}

pub fn solve(stack: &FrameStack, method: Method, cfg: &SolveConfig) -> Result<SolveReport> {
    match method {
        Method::Average => solve_average(stack, cfg),
        Method::PhysicsTv => solve_physics_tv(stack, cfg),
        Method::Deepir => solve_deepir(stack, cfg),
    }
}

fn frame_mask(t: &TransformParams, sw: usize, sh: usize, q: usize) -> Vec<bool> {
    let m = valid_mask(sw * q, sh * q, t);
    if q == 1 {
        m
    } else {
        downsample_mask(&m, sw * q, q)
    }
}

fn equation_count(transforms: &[TransformParams], sw: usize, sh: usize, q: usize) -> usize {
    transforms
        .iter()
        .map(|t| frame_mask(t, sw, sh, q).iter().filter(|v| **v).count())
        .sum()
}

struct Graph {
    total: NodeId,
    data: NodeId,
    tv_image: NodeId,
    tv_offset: NodeId,
    gain: NodeId,
    offset: NodeId,
    transforms: Vec<NodeId>,
    weights: Vec<NodeId>,
}

/// The general solver behind the physics-TV, DeepIR and super-resolution
/// entry points, with an explicit starting point.
pub fn solve_joint(
    stack: &FrameStack,
    cfg: &SolveConfig,
    method: Method,
    init: &SolveInit,
) -> Result<SolveReport> {
    cfg.validate()?;
    let l = stack.len();
    if l < 2 {
        return Err(Error::Underdetermined { frames: l });
    }
    let q = cfg.downsample;
    let kind = cfg.transform_kind;
    let (sw, sh) = stack.dims();
    let (hw, hh) = (sw * q, sh * q);
    let s = start(stack, cfg, init)?;
    let mut warnings = Vec::new();

    let baseline = upsampled(&s.average, q)?;
    let scene_init = match &init.scene {
        Some(img) => img.clone(),
        None => baseline.map(|v| v.max(0.0)),
    };
    let mut model = SceneModel::build(cfg.scene_kind, hw, hh, cfg.seed, &cfg.scene, Some(&scene_init))?;
    if cfg.scene_kind.is_neural() && cfg.warmup_iters > 0 {
        fit_direct(&mut model, &scene_init, cfg.warmup_iters, cfg.lr * cfg.scene_lr_scale)?;
    }

    let mut tape = Tape::new();
    let sg = model.render(&mut tape)?;
    let x = sg.output;
    let gain0 = init.gain.clone().unwrap_or_else(|| Image::filled(sw, sh, 1.0));
    let offset0 = init.offset.clone().unwrap_or_else(|| Image::new(sw, sh));
    let gain = tape.leaf(Tensor::from_image(&gain0).with_grad(true));
    let offset = tape.leaf(Tensor::from_image(&offset0).with_grad(true));
    let mut transforms = Vec::with_capacity(l);
    let mut weights = Vec::with_capacity(l);
    let mut data = None;
    for (k, t) in s.transforms.iter().enumerate() {
        let tt = Tensor::new(vec![kind.param_count()], t.params.clone())?;
        let tp = if k == 0 || !cfg.optimize_transforms {
            tape.constant(tt)
        } else {
            tape.leaf(tt.with_grad(true))
        };
        let warped = tape.warp(x, tp, kind)?;
        let low = if q > 1 { tape.box_downsample(warped, q)? } else { warped };
        let shifted = tape.add(low, offset)?;
        let pred = tape.mul(gain, shifted)?;
        let y = tape.constant(Tensor::from_image(&stack.frames[k]));
        let w = tape.constant(Tensor::full(vec![sh, sw], 1.0)?);
        let term = tape.mse(pred, y, Some(w))?;
        data = Some(match data {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        transforms.push(tp);
        weights.push(w);
    }
    let data = data.expect("at least two frames");
    let tv_image = tape.charbonnier_tv(x)?;
    let tv_offset = tape.charbonnier_tv(offset)?;
    let wi = tape.scale(tv_image, cfg.tv_image_weight);
    let wo = tape.scale(tv_offset, cfg.tv_offset_weight);
    let reg = tape.add(wi, wo)?;
    let total = tape.add(data, reg)?;
    let graph = Graph {
        total,
        data,
        tv_image,
        tv_offset,
        gain,
        offset,
        transforms,
        weights,
    };

    let mut groups: Vec<(NodeId, f64)> = sg.params.iter().map(|&p| (p, cfg.scene_lr_scale)).collect();
    groups.push((gain, cfg.gain_offset_lr_scale));
    groups.push((offset, cfg.gain_offset_lr_scale));
    for &t in &graph.transforms[1..] {
        if cfg.optimize_transforms {
            groups.push((t, cfg.transform_lr_scale));
        }
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &tape,
        groups,
    );

    let mut curve = LossCurve::default();
    let mut best = f64::INFINITY;
    let mut best_iteration = 0;
    let mut initial_data = None;
    let mut streak = 0;
    for it in 0..cfg.iters {
        for (k, (&tp, &w)) in graph.transforms.iter().zip(&graph.weights).enumerate() {
            let t = TransformParams::new(kind, tape.value(tp).to_vec())?;
            if k > 0 && t.check_invertible(hw, hh).is_err() {
                return Err(Error::NonFiniteLoss {
                    iteration: it,
                    detail: format!("transform of frame {k} became degenerate"),
                });
            }
            let mask: Vec<f64> = frame_mask(&t, sw, sh, q)
                .into_iter()
                .map(|v| if v { 1.0 } else { 0.0 })
                .collect();
            tape.set_value(w, &mask)?;
        }
        let out = tape.forward(&[graph.total, graph.data, graph.tv_image, graph.tv_offset])?;
        let (lt, ld, li, lo) = (out[0].data()[0], out[1].data()[0], out[2].data()[0], out[3].data()[0]);
        if !lt.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!("data {ld:e}, tv image {li:e}, tv offset {lo:e}"),
            });
        }
        curve.data.push(ld);
        curve.tv_image.push(li);
        curve.tv_offset.push(lo);
        curve.total.push(lt);
        if lt < best {
            best = lt;
            best_iteration = it;
        }
        let d0 = *initial_data.get_or_insert(ld);
        if ld > DIVERGENCE_FACTOR * d0 {
            streak += 1;
            if streak >= DIVERGENCE_WINDOW {
                return Err(Error::Diverged {
                    iteration: it,
                    loss: ld,
                    initial: d0,
                });
            }
        } else {
            streak = 0;
        }
        if it + 1 == cfg.iters {
            break;
        }
        tape.backward(graph.total)?;
        adam.step(&mut tape)?;
        if cfg.scene_kind == SceneKind::PixelGrid {
            for v in tape.leaf_data_mut(sg.params[0])? {
                *v = v.max(0.0);
            }
        }
        if cfg.gain_mean_constraint {
            let g = tape.leaf_data_mut(graph.gain)?;
            let m = g.iter().sum::<f64>() / g.len() as f64;
            for v in g.iter_mut() {
                *v /= m;
            }
        }
    }

    model.load_from_tape(&tape, &sg);
    let x0_hat = model.render_image()?;
    let nu_hat = NonUniformity {
        gain: Image::from_vec(sw, sh, tape.value(graph.gain).to_vec())?,
        offset: Image::from_vec(sw, sh, tape.value(graph.offset).to_vec())?,
    };
    let transforms_hat = graph
        .transforms
        .iter()
        .map(|&t| TransformParams::new(kind, tape.value(t).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    if q > 1 && insufficient_subpixel(&transforms_hat, q) {
        warnings.push(format!(
            "insufficient sub-pixel jitter: every transform is within {SUBPIXEL_TOLERANCE} px of a multiple of {q}"
        ));
    }
    Ok(SolveReport {
        method,
        psnr: truth_psnr(stack, &x0_hat)?,
        baseline_psnr: truth_psnr(stack, &baseline)?,
        single_frame_psnr: truth_psnr(stack, &upsampled(&stack.frames[0], q)?)?,
        equation_count: equation_count(&transforms_hat, sw, sh, q),
        unknown_count: unknown_count(sw * sh, kind, l),
        x0_hat,
        nu_hat,
        transforms_hat,
        registration: s.registration,
        loss_curve: curve,
        best_iteration,
        baseline,
        warnings,
        model: Some(model),
    })
}

/// JSON number, or the string `"inf"` for an infinite PSNR.
pub fn psnr_value(v: Option<f64>) -> serde_json::Value {
    match v {
        None => serde_json::Value::Null,
        Some(v) if v.is_infinite() => serde_json::Value::String(if v > 0.0 { "inf" } else { "-inf" }.into()),
        Some(v) => v.into(),
    }
}

impl SolveReport {
    /// Contents of `report.json`; `config` is echoed verbatim.
    pub fn to_json(&self, config: &serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "method": self.method.name(),
            "config": config,
            "psnr_db": psnr_value(self.psnr),
            "baseline_psnr_db": psnr_value(self.baseline_psnr),
            "single_frame_psnr_db": psnr_value(self.single_frame_psnr),
            "unknown_count": self.unknown_count,
            "equation_count": self.equation_count,
            "best_iteration": self.best_iteration,
            "gain_mean": self.nu_hat.gain.mean(),
            "scene_parameters": self.model.as_ref().map(|m| m.parameter_count()),
            "registration_converged": self.registration.iter().map(|r| r.converged).collect::<Vec<_>>(),
            "warnings": self.warnings,
            "loss_curve": self.loss_curve,
        })
    }

    /// Writes `x0_hat.pfm`, `gain_hat.pfm`, `offset_hat.pfm`,
    /// `baseline.pfm`, `transforms_hat.json`, `report.json` and, for
    /// model-based solves, `model.ckpt`.
    pub fn write(&self, dir: impl AsRef<Path>, config: &serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_pfm(dir.join("x0_hat.pfm"), &self.x0_hat)?;
        write_pfm(dir.join("gain_hat.pfm"), &self.nu_hat.gain)?;
        write_pfm(dir.join("offset_hat.pfm"), &self.nu_hat.offset)?;
        write_pfm(dir.join("baseline.pfm"), &self.baseline)?;
        let converged: Vec<bool> = self.registration.iter().map(|r| r.converged).collect();
        write_transforms(dir.join("transforms_hat.json"), &self.transforms_hat, &converged)?;
        if let Some(m) = &self.model {
            m.save_checkpoint(dir.join("model.ckpt"))?;
        }
        write_json(dir.join("report.json"), &self.to_json(config))
    }
}
