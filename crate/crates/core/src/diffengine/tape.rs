//! Static computation graph with reverse-mode gradients.
//!
//! Nodes are appended through the builder methods, which only infer and
//! check shapes. [`Tape::forward`] evaluates the graph from the current leaf
//! values, so the same tape can be re-run every optimisation step after the
//! leaves are updated in place.

use crate::diffengine::kernels::{self, ConvDims};
use crate::diffengine::tensor::{check_shape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::transform::{center_of, TransformKind, TransformParams};
use crate::geometry::warp::locate;

pub const TV_EPS: f64 = 1e-6;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    ClampMin(f64),
    LeakyRelu(f64),
    Sigmoid,
    /// inputs `[x, weight, bias]`, same padding
    Conv2d,
    NearestUpsample2x,
    BilinearUpsample2x,
    ChannelNorm { eps: f64 },
    /// inputs `[image, params]`
    Warp(TransformKind),
    BoxDownsample(usize),
    CharbonnierTv { eps: f64 },
    /// inputs `[a, b]` or `[a, b, weights]`
    Mse,
    Sum,
    Reshape,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul(_) => "scalar-mul",
            OpKind::ClampMin(_) => "clamp-min",
            OpKind::LeakyRelu(_) => "leaky-relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Conv2d => "conv2d",
            OpKind::NearestUpsample2x => "nearest-upsample-2x",
            OpKind::BilinearUpsample2x => "bilinear-upsample-2x",
            OpKind::ChannelNorm { .. } => "channel-norm",
            OpKind::Warp(_) => "bilinear-warp",
            OpKind::BoxDownsample(_) => "box-downsample",
            OpKind::CharbonnierTv { .. } => "charbonnier-tv",
            OpKind::Mse => "mse",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
        }
    }
}

#[derive(Clone, Debug, Default)]
enum Saved {
    #[default]
    None,
    Norm {
        inv_std: Vec<f64>,
    },
    Warp {
        mask: Vec<bool>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    requires_grad: bool,
    value: Vec<f64>,
    saved: Saved,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    has_grad: Vec<bool>,
    evaluated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            requires_grad,
            value: Vec::new(),
            saved: Saved::None,
        });
        self.grads.push(Vec::new());
        self.has_grad.push(false);
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn op(&self, id: NodeId) -> &OpKind {
        &self.node(id).op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.node(id).requires_grad
    }

    /// Adds a leaf. Its `requires_grad` flag decides whether it receives a
    /// gradient.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let (shape, data, rg) = t.into_parts();
        let id = self.push(OpKind::Leaf, vec![], shape);
        let n = &mut self.nodes[id.0];
        n.value = data;
        n.requires_grad = rg;
        id
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t.with_grad(false))
    }

    /// Ids of all leaves that receive gradients.
    pub fn parameter_leaves(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == OpKind::Leaf && n.requires_grad)
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn leaf_mut(&mut self, id: NodeId) -> Result<&mut Node> {
        let n = self.nodes.get_mut(id.0).ok_or(Error::NotALeaf(id.0))?;
        if n.op != OpKind::Leaf {
            return Err(Error::NotALeaf(id.0));
        }
        self.evaluated = false;
        Ok(n)
    }

    pub fn set_value(&mut self, id: NodeId, data: &[f64]) -> Result<()> {
        let n = self.leaf_mut(id)?;
        if data.len() != n.value.len() {
            return Err(Error::InvalidTensor(format!(
                "leaf {} holds {} values, got {}",
                id.0,
                n.value.len(),
                data.len()
            )));
        }
        n.value.copy_from_slice(data);
        Ok(())
    }

    /// Mutable access to a leaf's values; invalidates previous forward results.
    pub fn leaf_data_mut(&mut self, id: NodeId) -> Result<&mut [f64]> {
        Ok(&mut self.leaf_mut(id)?.value)
    }

    /// A parameter leaf's values together with its last gradient.
    pub fn leaf_value_and_grad(&mut self, id: NodeId) -> Result<(&mut [f64], &[f64])> {
        let n = self.nodes.get_mut(id.0).ok_or(Error::NotALeaf(id.0))?;
        if n.op != OpKind::Leaf {
            return Err(Error::NotALeaf(id.0));
        }
        if !self.has_grad[id.0] {
            return Err(Error::InvalidTensor(format!("leaf {} has no gradient", id.0)));
        }
        let g = &self.grads[id.0];
        self.evaluated = false;
        Ok((&mut n.value, g))
    }

    /// Current value of a node (leaf contents, or the last forward result).
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.shape.clone(), n.value.clone())
            .expect("node shapes are validated on construction")
            .with_grad(n.requires_grad)
    }

    /// Validity mask recorded by the last forward pass of a warp node.
    pub fn warp_mask(&self, id: NodeId) -> Option<&[bool]> {
        match &self.node(id).saved {
            Saved::Warp { mask } => Some(mask),
            _ => None,
        }
    }

    /// Gradient of the last `backward` call w.r.t. a leaf.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        let n = self.nodes.get(id.0)?;
        (n.op == OpKind::Leaf && self.has_grad[id.0]).then(|| self.grads[id.0].as_slice())
    }

    // ---- builders -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("add", a, b)?;
        Ok(self.push(OpKind::Add, vec![a, b], s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("sub", a, b)?;
        Ok(self.push(OpKind::Sub, vec![a, b], s))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let s = self.same_shape("mul", a, b)?;
        Ok(self.push(OpKind::Mul, vec![a, b], s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(OpKind::ScalarMul(c), vec![a], s)
    }

    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(OpKind::ClampMin(min), vec![a], s)
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(OpKind::LeakyRelu(slope), vec![a], s)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(OpKind::Sigmoid, vec![a], s)
    }

    fn chw(&self, op: &'static str, x: NodeId) -> Result<(usize, usize, usize)> {
        match *self.shape(x) {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(self.mismatch(op, format!("expected [C, H, W], got {s:?}"))),
        }
    }

    /// Same-padded convolution: `x [Cin, H, W]`, `weight [Cout, Cin, k, k]`
    /// with odd `k`, `bias [Cout]`.
    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (cin, h, w) = self.chw("conv2d", x)?;
        let ws = self.shape(weight).to_vec();
        let [cout, wcin, k1, k2] = ws[..] else {
            return Err(self.mismatch("conv2d", format!("weight must be 4-D, got {ws:?}")));
        };
        if wcin != cin || k1 != k2 || k1 % 2 == 0 {
            return Err(self.mismatch(
                "conv2d",
                format!("weight {ws:?} incompatible with input channels {cin}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(self.mismatch(
                "conv2d",
                format!("bias {:?} must be [{cout}]", self.shape(bias)),
            ));
        }
        Ok(self.push(OpKind::Conv2d, vec![x, weight, bias], vec![cout, h, w]))
    }

    pub fn upsample_nearest2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw("nearest-upsample-2x", x)?;
        Ok(self.push(OpKind::NearestUpsample2x, vec![x], vec![c, 2 * h, 2 * w]))
    }

    pub fn upsample_bilinear2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw("bilinear-upsample-2x", x)?;
        Ok(self.push(OpKind::BilinearUpsample2x, vec![x], vec![c, 2 * h, 2 * w]))
    }

    pub fn channel_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.chw("channel-norm", x)?;
        Ok(self.push(
            OpKind::ChannelNorm { eps: NORM_EPS },
            vec![x],
            vec![c, h, w],
        ))
    }

    /// Bilinear sampling of a `[H, W]` image at `t(u, v)`; out-of-bounds
    /// samples are 0 and masked.
    pub fn warp(&mut self, image: NodeId, params: NodeId, kind: TransformKind) -> Result<NodeId> {
        let s = self.shape(image).to_vec();
        if s.len() != 2 || s[0] < 2 || s[1] < 2 {
            return Err(self.mismatch(
                "bilinear-warp",
                format!("image must be [H, W] with H, W >= 2, got {s:?}"),
            ));
        }
        if self.shape(params) != [kind.param_count()] {
            return Err(self.mismatch(
                "bilinear-warp",
                format!(
                    "{kind} needs [{}] params, got {:?}",
                    kind.param_count(),
                    self.shape(params)
                ),
            ));
        }
        Ok(self.push(OpKind::Warp(kind), vec![image, params], s))
    }

    pub fn box_downsample(&mut self, x: NodeId, q: usize) -> Result<NodeId> {
        if q < 1 {
            return Err(Error::BadFactor(q));
        }
        let s = self.shape(x).to_vec();
        match s[..] {
            [h, w] if h % q == 0 && w % q == 0 => {
                Ok(self.push(OpKind::BoxDownsample(q), vec![x], vec![h / q, w / q]))
            }
            _ => Err(self.mismatch(
                "box-downsample",
                format!("[H, W] divisible by {q} required, got {s:?}"),
            )),
        }
    }

    pub fn charbonnier_tv(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 2 {
            return Err(self.mismatch(
                "charbonnier-tv",
                format!("expected [H, W], got {:?}", self.shape(x)),
            ));
        }
        Ok(self.push(OpKind::CharbonnierTv { eps: TV_EPS }, vec![x], vec![1]))
    }

    /// Mean squared difference; with `weights`, `sum(w (a-b)^2) / sum(w)`.
    /// Weights must be constant.
    pub fn mse(&mut self, a: NodeId, b: NodeId, weights: Option<NodeId>) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let mut inputs = vec![a, b];
        if let Some(w) = weights {
            self.same_shape("mse", a, w)?;
            if self.requires_grad(w) {
                return Err(self.mismatch("mse", "weights must not require grad".into()));
            }
            inputs.push(w);
        }
        Ok(self.push(OpKind::Mse, inputs, vec![1]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Sum, vec![x], vec![1])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n = check_shape(&shape)?;
        if n != self.value_len(x) {
            return Err(self.mismatch(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape(x)),
            ));
        }
        Ok(self.push(OpKind::Reshape, vec![x], shape))
    }

    fn value_len(&self, id: NodeId) -> usize {
        self.shape(id).iter().product()
    }

    // ---- evaluation -----------------------------------------------------

    /// Evaluates every ancestor of `outputs` from the current leaf values
    /// and returns the requested values.
    pub fn forward(&mut self, outputs: &[NodeId]) -> Result<Vec<Tensor>> {
        let Some(last) = outputs.iter().map(|o| o.0).max() else {
            return Ok(vec![]);
        };
        let mut needed = vec![false; last + 1];
        for o in outputs {
            needed[o.0] = true;
        }
        for i in (0..=last).rev() {
            if needed[i] {
                for inp in self.nodes[i].inputs.clone() {
                    needed[inp.0] = true;
                }
            }
        }
        for i in 0..=last {
            if needed[i] && self.nodes[i].op != OpKind::Leaf {
                self.eval_node(i)?;
            }
        }
        self.evaluated = true;
        Ok(outputs.iter().map(|&o| self.tensor(o)).collect())
    }

    fn eval_node(&mut self, i: usize) -> Result<()> {
        let node = &self.nodes[i];
        let op = node.op.clone();
        let ins = node.inputs.clone();
        let n_out: usize = node.shape.iter().product();
        // Every op below writes all of `out`, so a reused buffer needs no clearing.
        let mut out = std::mem::take(&mut self.nodes[i].value);
        out.resize(n_out, 0.0);
        let mut saved = Saved::None;
        let v = |k: usize| -> &[f64] { &self.nodes[ins[k].0].value };
        match op {
            OpKind::Leaf => unreachable!(),
            OpKind::Add => {
                for ((o, a), b) in out.iter_mut().zip(v(0)).zip(v(1)) {
                    *o = a + b;
                }
            }
            OpKind::Sub => {
                for ((o, a), b) in out.iter_mut().zip(v(0)).zip(v(1)) {
                    *o = a - b;
                }
            }
            OpKind::Mul => {
                for ((o, a), b) in out.iter_mut().zip(v(0)).zip(v(1)) {
                    *o = a * b;
                }
            }
            OpKind::ScalarMul(c) => {
                for (o, a) in out.iter_mut().zip(v(0)) {
                    *o = c * a;
                }
            }
            OpKind::ClampMin(m) => {
                for (o, a) in out.iter_mut().zip(v(0)) {
                    *o = a.max(m);
                }
            }
            OpKind::LeakyRelu(s) => {
                for (o, &a) in out.iter_mut().zip(v(0)) {
                    *o = if a > 0.0 { a } else { s * a };
                }
            }
            OpKind::Sigmoid => {
                for (o, &a) in out.iter_mut().zip(v(0)) {
                    *o = sigmoid(a);
                }
            }
            OpKind::Conv2d => {
                let d = self.conv_dims(i);
                kernels::conv2d_forward(d, v(0), v(1), v(2), &mut out);
            }
            OpKind::NearestUpsample2x => {
                let (c, h, w) = self.in_chw(i);
                kernels::upsample_nearest_forward(c, h, w, v(0), &mut out);
            }
            OpKind::BilinearUpsample2x => {
                let (c, h, w) = self.in_chw(i);
                kernels::upsample_bilinear_forward(c, h, w, v(0), &mut out);
            }
            OpKind::ChannelNorm { eps } => {
                let (c, h, w) = self.in_chw(i);
                let (_, inv_std) = kernels::channel_norm_forward(c, h * w, eps, v(0), &mut out);
                saved = Saved::Norm { inv_std };
            }
            OpKind::Warp(kind) => {
                let s = &self.nodes[ins[0].0].shape;
                let (h, w) = (s[0], s[1]);
                let t = TransformParams::new(kind, v(1).to_vec())?;
                t.check_invertible(w, h)?;
                let c = center_of(w, h);
                let src = v(0);
                let mut mask = vec![false; h * w];
                out.fill(0.0);
                for y in 0..h {
                    for x in 0..w {
                        let (sx, sy) = t.map(x as f64, y as f64, c);
                        if let Some(fp) = locate(sx, sy, w, h) {
                            out[y * w + x] = fp.sample(src, w);
                            mask[y * w + x] = true;
                        }
                    }
                }
                saved = Saved::Warp { mask };
            }
            OpKind::BoxDownsample(q) => {
                let s = &self.nodes[ins[0].0].shape;
                let w = s[1];
                crate::geometry::resample::box_downsample_into(
                    v(0),
                    w,
                    q,
                    w / q,
                    s[0] / q,
                    &mut out,
                );
            }
            OpKind::CharbonnierTv { eps } => {
                let s = &self.nodes[ins[0].0].shape;
                out[0] = kernels::charbonnier_tv(s[0], s[1], eps, v(0));
            }
            OpKind::Mse => {
                let (a, b) = (v(0), v(1));
                out[0] = if ins.len() == 3 {
                    let wts = v(2);
                    let total = kernels::sum(wts);
                    let mut acc = 0.0;
                    for ((x, y), wv) in a.iter().zip(b).zip(wts) {
                        acc += wv * (x - y) * (x - y);
                    }
                    if total > 0.0 {
                        acc / total
                    } else {
                        0.0
                    }
                } else {
                    let mut acc = 0.0;
                    for (x, y) in a.iter().zip(b) {
                        acc += (x - y) * (x - y);
                    }
                    acc / a.len() as f64
                };
            }
            OpKind::Sum => out[0] = kernels::sum(v(0)),
            OpKind::Reshape => out.copy_from_slice(v(0)),
        }
        let node = &mut self.nodes[i];
        node.value = out;
        node.saved = saved;
        Ok(())
    }

    fn in_chw(&self, i: usize) -> (usize, usize, usize) {
        let s = &self.nodes[self.nodes[i].inputs[0].0].shape;
        (s[0], s[1], s[2])
    }

    fn conv_dims(&self, i: usize) -> ConvDims {
        let (cin, h, w) = self.in_chw(i);
        let ws = &self.nodes[self.nodes[i].inputs[1].0].shape;
        ConvDims {
            cin,
            cout: ws[0],
            h,
            w,
            k: ws[2],
        }
    }

    /// Back-propagates from a scalar `loss`. Afterwards every leaf with
    /// `requires_grad` holds `d loss / d leaf` (zeros if unreachable);
    /// intermediate gradients are dropped.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let ln = self.node(loss);
        if ln.shape != [1] {
            return Err(Error::NonScalarLoss {
                node: loss.0,
                shape: ln.shape.clone(),
            });
        }
        if !self.evaluated || ln.value.is_empty() {
            return Err(Error::InvalidTensor(
                "backward called before forward on the current leaf values".into(),
            ));
        }
        let mut grads = std::mem::take(&mut self.grads);
        let mut live = std::mem::take(&mut self.has_grad);
        live.fill(false);
        grads[loss.0].clear();
        grads[loss.0].push(1.0);
        live[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !live[i] || !self.nodes[i].requires_grad || self.nodes[i].op == OpKind::Leaf {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            live[i] = false;
            let touched = self.accumulate_input_grads(i, &g, &mut grads, &mut live);
            grads[i] = g;
            let touched = touched?;
            for inp in touched {
                if grads[inp.0].iter().any(|v| v.is_nan()) {
                    self.grads = grads;
                    self.has_grad = live;
                    return Err(Error::NanGradient {
                        node: i,
                        op: self.nodes[i].op.name(),
                    });
                }
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.op == OpKind::Leaf && n.requires_grad {
                slot(&mut grads, &mut live, i, n.value.len());
            } else {
                live[i] = false;
            }
        }
        self.grads = grads;
        self.has_grad = live;
        Ok(())
    }

    /// Adds node `i`'s gradient contributions into the buffers of those
    /// inputs that require grad and returns the inputs it touched.
    fn accumulate_input_grads(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Vec<f64>],
        live: &mut [bool],
    ) -> Result<Vec<NodeId>> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let wants = |k: usize| self.nodes[ins[k].0].requires_grad;
        let val = |k: usize| -> &[f64] { &self.nodes[ins[k].0].value };
        let len = |k: usize| self.nodes[ins[k].0].value.len();
        let mut touched = Vec::with_capacity(ins.len());
        let mut target = |k: usize, grads: &mut [Vec<f64>], live: &mut [bool]| -> Option<usize> {
            if !wants(k) {
                return None;
            }
            slot(grads, live, ins[k].0, len(k));
            touched.push(ins[k]);
            Some(ins[k].0)
        };
        match node.op {
            OpKind::Leaf => {}
            OpKind::Add | OpKind::Sub => {
                if let Some(t) = target(0, grads, live) {
                    kernels::axpy(1.0, g, &mut grads[t]);
                }
                if let Some(t) = target(1, grads, live) {
                    let sign = if node.op == OpKind::Add { 1.0 } else { -1.0 };
                    kernels::axpy(sign, g, &mut grads[t]);
                }
            }
            OpKind::Mul => {
                for (k, other) in [(0, 1), (1, 0)] {
                    if let Some(t) = target(k, grads, live) {
                        for ((a, gv), b) in grads[t].iter_mut().zip(g).zip(val(other)) {
                            *a += gv * b;
                        }
                    }
                }
            }
            OpKind::ScalarMul(c) => {
                if let Some(t) = target(0, grads, live) {
                    kernels::axpy(c, g, &mut grads[t]);
                }
            }
            OpKind::ClampMin(m) => {
                if let Some(t) = target(0, grads, live) {
                    for ((a, gv), &x) in grads[t].iter_mut().zip(g).zip(val(0)) {
                        if x >= m {
                            *a += gv;
                        }
                    }
                }
            }
            OpKind::LeakyRelu(sl) => {
                if let Some(t) = target(0, grads, live) {
                    for ((a, gv), &x) in grads[t].iter_mut().zip(g).zip(val(0)) {
                        *a += if x > 0.0 { *gv } else { sl * gv };
                    }
                }
            }
            OpKind::Sigmoid => {
                if let Some(t) = target(0, grads, live) {
                    for ((a, gv), y) in grads[t].iter_mut().zip(g).zip(&node.value) {
                        *a += gv * y * (1.0 - y);
                    }
                }
            }
            OpKind::Conv2d => {
                let d = self.conv_dims(i);
                let tx = target(0, grads, live);
                let tw = target(1, grads, live);
                let tb = target(2, grads, live);
                let mut gx = tx.map(|t| std::mem::take(&mut grads[t]));
                let mut gw = tw.map(|t| std::mem::take(&mut grads[t]));
                let mut gb = tb.map(|t| std::mem::take(&mut grads[t]));
                kernels::conv2d_backward(
                    d,
                    val(0),
                    val(1),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (t, buf) in [(tx, gx), (tw, gw), (tb, gb)] {
                    if let (Some(t), Some(buf)) = (t, buf) {
                        grads[t] = buf;
                    }
                }
            }
            OpKind::NearestUpsample2x => {
                let (c, h, w) = self.in_chw(i);
                if let Some(t) = target(0, grads, live) {
                    kernels::upsample_nearest_backward(c, h, w, g, &mut grads[t]);
                }
            }
            OpKind::BilinearUpsample2x => {
                let (c, h, w) = self.in_chw(i);
                if let Some(t) = target(0, grads, live) {
                    kernels::upsample_bilinear_backward(c, h, w, g, &mut grads[t]);
                }
            }
            OpKind::ChannelNorm { .. } => {
                let (c, h, w) = self.in_chw(i);
                let Saved::Norm { inv_std } = &node.saved else {
                    unreachable!("channel-norm saves its statistics");
                };
                if let Some(t) = target(0, grads, live) {
                    kernels::channel_norm_backward(c, h * w, &node.value, inv_std, g, &mut grads[t]);
                }
            }
            OpKind::Warp(kind) => {
                let sh = &self.nodes[ins[0].0].shape;
                let (h, w) = (sh[0], sh[1]);
                let t = TransformParams::new(kind, val(1).to_vec())?;
                let c = center_of(w, h);
                let src = val(0);
                let ti = target(0, grads, live);
                let tp = target(1, grads, live);
                let mut gi = ti.map(|t| std::mem::take(&mut grads[t]));
                let mut gp = [0.0; 8];
                let np = kind.param_count();
                for y in 0..h {
                    for x in 0..w {
                        let gv = g[y * w + x];
                        let m = t.map_with_jacobian(x as f64, y as f64, c);
                        let Some(fp) = locate(m.x, m.y, w, h) else {
                            continue;
                        };
                        if let Some(gi) = gi.as_deref_mut() {
                            fp.scatter(gi, w, gv);
                        }
                        if tp.is_some() {
                            let (ix, iy) = fp.gradient(src, w);
                            for k in 0..np {
                                gp[k] += gv * (ix * m.dx[k] + iy * m.dy[k]);
                            }
                        }
                    }
                }
                if let (Some(t), Some(gi)) = (ti, gi) {
                    grads[t] = gi;
                }
                if let Some(t) = tp {
                    kernels::axpy(1.0, &gp[..np], &mut grads[t]);
                }
            }
            OpKind::BoxDownsample(q) => {
                let sh = &self.nodes[ins[0].0].shape;
                let (h, w) = (sh[0], sh[1]);
                let ow = w / q;
                let norm = 1.0 / (q * q) as f64;
                if let Some(t) = target(0, grads, live) {
                    let gx = &mut grads[t];
                    for y in 0..h {
                        for x in 0..w {
                            gx[y * w + x] += g[(y / q) * ow + x / q] * norm;
                        }
                    }
                }
            }
            OpKind::CharbonnierTv { eps } => {
                let sh = &self.nodes[ins[0].0].shape;
                if let Some(t) = target(0, grads, live) {
                    kernels::charbonnier_tv_backward(sh[0], sh[1], eps, val(0), g[0], &mut grads[t]);
                }
            }
            OpKind::Mse => {
                let (a, b) = (val(0), val(1));
                let (scale, wts) = if ins.len() == 3 {
                    let wts = val(2);
                    let total = kernels::sum(wts);
                    (if total > 0.0 { 2.0 * g[0] / total } else { 0.0 }, Some(wts))
                } else {
                    (2.0 * g[0] / a.len() as f64, None)
                };
                for (k, sign) in [(0, 1.0), (1, -1.0)] {
                    if let Some(t) = target(k, grads, live) {
                        let gx = &mut grads[t];
                        for j in 0..a.len() {
                            let wv = wts.map_or(1.0, |w| w[j]);
                            gx[j] += sign * scale * wv * (a[j] - b[j]);
                        }
                    }
                }
            }
            OpKind::Sum => {
                if let Some(t) = target(0, grads, live) {
                    for a in grads[t].iter_mut() {
                        *a += g[0];
                    }
                }
            }
            OpKind::Reshape => {
                if let Some(t) = target(0, grads, live) {
                    kernels::axpy(1.0, g, &mut grads[t]);
                }
            }
        }
        Ok(touched)
    }
}

/// Zeroes and sizes node `i`'s gradient buffer the first time it is touched
/// in a backward pass.
fn slot(grads: &mut [Vec<f64>], live: &mut [bool], i: usize, len: usize) {
    if !live[i] {
        grads[i].clear();
        grads[i].resize(len, 0.0);
        live[i] = true;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
