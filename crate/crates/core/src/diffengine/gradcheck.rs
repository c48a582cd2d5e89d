//! Two-sided finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffengine::tape::{NodeId, Tape};
use crate::diffengine::Tensor;
use crate::geometry::TransformKind;
use crate::error::{Error, Result};

/// Leaves with more elements than this are checked on a random subsample.
pub const FULL_CHECK_LIMIT: usize = 256;
pub const SUBSAMPLE: usize = 96;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Element with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
    pub warnings: Vec<String>,
}

fn scalar(tape: &mut Tape, loss: NodeId) -> Result<f64> {
    Ok(tape.forward(&[loss])?[0].data()[0])
}

/// Compares the analytic gradient of `loss` w.r.t. `leaf` to central
/// differences with the given step. Relative error per element is
/// `|a - n| / max(|a|, |n|, 1e-6 * max(1, max|a|))`.
pub fn grad_check(
    tape: &mut Tape,
    loss: NodeId,
    leaf: NodeId,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if !matches!(tape.op(leaf), crate::diffengine::OpKind::Leaf) {
        return Err(Error::NotALeaf(leaf.index()));
    }
    tape.forward(&[loss])?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .ok_or_else(|| Error::InvalidTensor(format!("leaf {} has no gradient", leaf.index())))?
        .to_vec();
    let original = tape.value(leaf).to_vec();
    let n = original.len();
    let indices: Vec<usize> = if n <= FULL_CHECK_LIMIT {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9 ^ n as u64);
        let mut v = sample(&mut rng, n, SUBSAMPLE).into_vec();
        v.sort_unstable();
        v
    };
    let scale = analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-6 * scale;

    let mut warnings = Vec::new();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0;
    let mut values = original.clone();
    for &i in &indices {
        let x = original[i];
        let (xp, xm) = (x + step, x - step);
        let effective = (xp - xm) / 2.0;
        if effective == 0.0 || ((effective - step) / step).abs() > 1e-3 {
            warnings.push(format!(
                "element {i}: step {step:e} is not resolvable at value {x:e}"
            ));
        }
        values[i] = xp;
        tape.set_value(leaf, &values)?;
        let fp = scalar(tape, loss)?;
        values[i] = xm;
        tape.set_value(leaf, &values)?;
        let fm = scalar(tape, loss)?;
        values[i] = x;
        if fp == fm && analytic[i].abs() > floor {
            warnings.push(format!(
                "element {i}: loss difference underflowed with step {step:e}"
            ));
        }
        let numeric = if effective != 0.0 {
            (fp - fm) / (2.0 * effective)
        } else {
            0.0
        };
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        max_abs = max_abs.max(abs);
    }
    tape.set_value(leaf, &original)?;
    tape.forward(&[loss])?;
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_index: worst,
        checked: indices.len(),
        passed: max_rel < tolerance,
        warnings,
    })
}

/// Finite-difference step used by [`op_suite`].
pub const SUITE_STEP: f64 = 1e-6;
/// Step for Charbonnier TV, whose gradient entries are sums of nearly
/// cancelling unit-size terms; 1e-6 leaves them at the round-off floor.
pub const TV_STEP: f64 = 1e-5;
/// Step for warp transform parameters.
pub const WARP_PARAM_STEP: f64 = 1e-5;
/// Relative-error bound every op must meet in [`op_suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// One gradient check of an op with respect to one of its inputs.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub op: String,
    pub input: &'static str,
    pub report: GradCheckReport,
}

fn values(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values in `[lo, hi]` kept at least `gap` away from `kink`.
fn off_kink(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kink: f64, gap: f64) -> Vec<f64> {
    values(rng, n, lo, hi)
        .into_iter()
        .map(|v| if (v - kink).abs() < gap { kink + gap.copysign(v - kink) * 2.0 } else { v })
        .collect()
}

struct Builder {
    tape: Tape,
    rng: ChaCha8Rng,
    leaves: Vec<(&'static str, NodeId, f64)>,
    step: f64,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            leaves: Vec::new(),
            step: SUITE_STEP,
        }
    }

    fn leaf(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        let id = self.tape.leaf(Tensor::new(shape, data)?.with_grad(true));
        self.leaves.push((name, id, self.step));
        Ok(id)
    }

    fn random_leaf(&mut self, name: &'static str, shape: Vec<usize>) -> Result<NodeId> {
        let n = shape.iter().product();
        let data = values(&mut self.rng, n, -1.0, 1.0);
        self.leaf(name, shape, data)
    }

    /// Contracts a non-scalar output against a fixed random tensor so every
    /// output element carries a distinct weight.
    fn project(&mut self, out: NodeId) -> Result<NodeId> {
        let shape = self.tape.shape(out).to_vec();
        if shape == [1] {
            return Ok(out);
        }
        let n = shape.iter().product();
        let w = values(&mut self.rng, n, -1.0, 1.0);
        let w = self.tape.constant(Tensor::new(shape, w)?);
        let p = self.tape.mul(out, w)?;
        Ok(self.tape.sum(p))
    }

    fn check(mut self, op: String, out: NodeId, cases: &mut Vec<SuiteCase>) -> Result<()> {
        let loss = self.project(out)?;
        for (input, leaf, step) in self.leaves.clone() {
            let report = grad_check(&mut self.tape, loss, leaf, step, SUITE_TOLERANCE)?;
            cases.push(SuiteCase {
                op: op.clone(),
                input,
                report,
            });
        }
        Ok(())
    }
}

fn warp_params(kind: TransformKind) -> Vec<f64> {
    // Non-integer displacements keep every sample strictly inside a cell.
    match kind {
        TransformKind::Translation => vec![0.37, -0.61],
        TransformKind::Rigid => vec![0.031, 0.43, -0.27],
        TransformKind::Affine => vec![1.02, 0.015, 0.33, -0.021, 0.985, -0.46],
        TransformKind::Perspective => vec![1.01, 0.012, 0.29, -0.017, 0.99, -0.38, 2e-4, -3e-4],
    }
}

/// Gradient checks of every op with respect to every differentiable input,
/// at [`SUITE_STEP`] ([`TV_STEP`] and [`WARP_PARAM_STEP`] where noted) and
/// [`SUITE_TOLERANCE`].
pub fn op_suite() -> Result<Vec<SuiteCase>> {
    let mut cases = Vec::new();
    let s2 = vec![6, 5];
    let s3 = vec![3, 4, 5];

    for (k, name) in ["add", "sub", "mul"].into_iter().enumerate() {
        let mut b = Builder::new(10 + k as u64);
        let x = b.random_leaf("a", s2.clone())?;
        let y = b.random_leaf("b", s2.clone())?;
        let out = match name {
            "add" => b.tape.add(x, y)?,
            "sub" => b.tape.sub(x, y)?,
            _ => b.tape.mul(x, y)?,
        };
        b.check(name.into(), out, &mut cases)?;
    }

    let mut b = Builder::new(20);
    let x = b.random_leaf("x", s2.clone())?;
    let out = b.tape.scale(x, -2.5);
    b.check("scalar-mul".into(), out, &mut cases)?;

    let mut b = Builder::new(21);
    let d = off_kink(&mut b.rng, 30, -1.0, 1.0, 0.1, 1e-3);
    let x = b.leaf("x", s2.clone(), d)?;
    let out = b.tape.clamp_min(x, 0.1);
    b.check("clamp-min".into(), out, &mut cases)?;

    let mut b = Builder::new(22);
    let d = off_kink(&mut b.rng, 60, -1.0, 1.0, 0.0, 1e-3);
    let x = b.leaf("x", s3.clone(), d)?;
    let out = b.tape.leaky_relu(x, 0.2);
    b.check("leaky-relu".into(), out, &mut cases)?;

    let mut b = Builder::new(23);
    let d = values(&mut b.rng, 30, -4.0, 4.0);
    let x = b.leaf("x", s2.clone(), d)?;
    let out = b.tape.sigmoid(x);
    b.check("sigmoid".into(), out, &mut cases)?;

    for (k, ksize) in [1usize, 3].into_iter().enumerate() {
        let mut b = Builder::new(30 + k as u64);
        let x = b.random_leaf("x", s3.clone())?;
        let w = b.random_leaf("weight", vec![2, 3, ksize, ksize])?;
        let bias = b.random_leaf("bias", vec![2])?;
        let out = b.tape.conv2d(x, w, bias)?;
        b.check(format!("conv2d-{ksize}x{ksize}"), out, &mut cases)?;
    }

    let mut b = Builder::new(40);
    let x = b.random_leaf("x", s3.clone())?;
    let out = b.tape.upsample_nearest2x(x)?;
    b.check("nearest-upsample-2x".into(), out, &mut cases)?;

    let mut b = Builder::new(41);
    let x = b.random_leaf("x", s3.clone())?;
    let out = b.tape.upsample_bilinear2x(x)?;
    b.check("bilinear-upsample-2x".into(), out, &mut cases)?;

    let mut b = Builder::new(42);
    let x = b.random_leaf("x", s3.clone())?;
    let out = b.tape.channel_norm(x)?;
    b.check("channel-norm".into(), out, &mut cases)?;

    for (k, kind) in TransformKind::ALL.into_iter().enumerate() {
        let mut b = Builder::new(50 + k as u64);
        let img = b.random_leaf("image", vec![9, 11])?;
        b.step = WARP_PARAM_STEP;
        let p = b.leaf("params", vec![kind.param_count()], warp_params(kind))?;
        let out = b.tape.warp(img, p, kind)?;
        b.check(format!("bilinear-warp-{kind}"), out, &mut cases)?;
    }

    let mut b = Builder::new(60);
    let x = b.random_leaf("x", vec![6, 9])?;
    let out = b.tape.box_downsample(x, 3)?;
    b.check("box-downsample".into(), out, &mut cases)?;

    let mut b = Builder::new(61);
    b.step = TV_STEP;
    let x = b.random_leaf("x", s2.clone())?;
    let out = b.tape.charbonnier_tv(x)?;
    b.check("charbonnier-tv".into(), out, &mut cases)?;

    let mut b = Builder::new(62);
    let x = b.random_leaf("a", s2.clone())?;
    let y = b.random_leaf("b", s2.clone())?;
    let out = b.tape.mse(x, y, None)?;
    b.check("mse".into(), out, &mut cases)?;

    let mut b = Builder::new(63);
    let x = b.random_leaf("a", s2.clone())?;
    let y = b.random_leaf("b", s2.clone())?;
    let w = values(&mut b.rng, 30, 0.0, 1.0);
    let w = b.tape.constant(Tensor::new(s2.clone(), w)?);
    let out = b.tape.mse(x, y, Some(w))?;
    b.check("mse-weighted".into(), out, &mut cases)?;

    let mut b = Builder::new(64);
    let x = b.random_leaf("x", s2.clone())?;
    let out = b.tape.sum(x);
    b.check("sum".into(), out, &mut cases)?;

    let mut b = Builder::new(65);
    let x = b.random_leaf("x", s2.clone())?;
    let out = b.tape.reshape(x, vec![3, 10])?;
    b.check("reshape".into(), out, &mut cases)?;

    Ok(cases)
}
