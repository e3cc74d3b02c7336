//! Reverse-mode gradient engine over a fixed operation set.
//!
//! The graph is an ordered list of layers ending in a single loss node.
//! Each layer has a hand-written forward and backward rule, so every rule is
//! individually testable and the whole engine is verifiable by central
//! finite differences. All arithmetic is 64-bit.
//!
//! Layers act on 1-D `[dim]` or 2-D `[channels, time]` tensors. The time
//! dimension is dynamic: the same graph runs on utterances of any length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from_seed;
use crate::tensor::{ParamStore, Tensor};

/// Variance floor applied before the square root in std pooling.
pub const STD_POOL_VAR_FLOOR: f64 = 1e-10;

/// Cosine clamp bound; keeps the angular-margin sqrt away from its endpoint.
const COS_CLAMP: f64 = 1.0 - 1e-12;

/// Which norm an [`Layer::LpNorm`] loss node computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    P1,
    P2,
    PInf,
}

/// Supervision attached to a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    /// Class index for classification losses and the angular-margin head.
    Class(usize),
    /// Verification trial side: `target` means same-class/same-speaker.
    Trial { target: bool },
    /// Loss nodes that need no supervision (e.g. norms).
    None,
}

/// One layer of the computation graph.
///
/// Parameterized layers look up their tensors in the [`ParamStore`] under
/// `<name>.w` / `<name>.b`; `frozen` layers receive zero parameter gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// 1-D convolution over `[in_ch, T]` with zero padding. With `residual`
    /// set, the input is added back to the output (requires matching shape:
    /// `in_ch == out_ch`, `stride == 1`, `2*pad == kernel-1`).
    Conv1d {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        residual: bool,
        frozen: bool,
    },
    /// Dense affine map on a vector: `y = W x + b`.
    Affine { name: String, in_dim: usize, out_dim: usize, frozen: bool },
    /// Elementwise max(x, 0); subgradient at 0 is 0.
    Relu,
    /// Per-channel mean and standard deviation over time: `[C, T] -> [2C]`.
    MeanStdPool,
    /// Scaled cosine similarity against per-class weight rows:
    /// `logit_j = scale * cos(e, w_j)`.
    CosineHead { name: String, classes: usize, emb_dim: usize, scale: f64, frozen: bool },
    /// Additive-angular-margin head: the true-class angle is penalized by
    /// `margin` during supervised forward passes; with no class label it
    /// behaves exactly like [`Layer::CosineHead`].
    AamHead {
        name: String,
        classes: usize,
        emb_dim: usize,
        scale: f64,
        margin: f64,
        frozen: bool,
    },
    /// Loss node. Multiclass softmax cross-entropy for `Label::Class`;
    /// binary logistic loss on a scalar logit for `Label::Trial`.
    CrossEntropy,
    /// Loss node. For `Label::Class(y)`: `max(z_y - max_{j!=y} z_j + kappa, 0)`.
    /// For `Label::Trial` on a scalar score: `max(z - threshold + kappa, 0)`
    /// on target trials and `max(threshold - z + kappa, 0)` on nontarget.
    Hinge { kappa: f64, threshold: f64 },
    /// Loss node. Lp norm of the input vector; `squared` is valid for P2 only.
    LpNorm { p: NormKind, squared: bool },
}

impl Layer {
    pub fn is_loss(&self) -> bool {
        matches!(self, Layer::CrossEntropy | Layer::Hinge { .. } | Layer::LpNorm { .. })
    }

    pub fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv1d { name, .. }
            | Layer::Affine { name, .. }
            | Layer::CosineHead { name, .. }
            | Layer::AamHead { name, .. } => Some(name),
            _ => None,
        }
    }

    fn describe(&self, idx: usize) -> String {
        match self.name() {
            Some(n) => format!("layer {idx} ({n})"),
            None => format!("layer {idx} ({})", self.kind_str()),
        }
    }

    fn kind_str(&self) -> &'static str {
        match self {
            Layer::Conv1d { .. } => "conv1d",
            Layer::Affine { .. } => "affine",
            Layer::Relu => "relu",
            Layer::MeanStdPool => "mean-std-pool",
            Layer::CosineHead { .. } => "cosine-head",
            Layer::AamHead { .. } => "aam-head",
            Layer::CrossEntropy => "cross-entropy",
            Layer::Hinge { .. } => "hinge",
            Layer::LpNorm { .. } => "lp-norm",
        }
    }
}

/// Abstract activation shape used for static graph validation. Time extents
/// are dynamic, so frames only carry their channel count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Frames { channels: usize },
    Vector { dim: usize },
    Scalar,
}

/// An ordered computation graph with at most one loss node, at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub input: ShapeKind,
    pub layers: Vec<Layer>,
}

impl GraphSpec {
    pub fn new(input: ShapeKind, layers: Vec<Layer>) -> Result<Self> {
        let graph = GraphSpec { input, layers };
        graph.validate()?;
        Ok(graph)
    }

    /// Checks layer-to-layer shape compatibility and loss-node placement.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("graph has no layers"));
        }
        let mut cur = self.input;
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.is_loss() && idx + 1 != self.layers.len() {
                return Err(Error::shape(format!(
                    "loss node at {} must be the final layer",
                    layer.describe(idx)
                )));
            }
            cur = self.propagate(layer, cur, idx)?;
        }
        Ok(())
    }

    pub fn has_loss(&self) -> bool {
        self.layers.last().is_some_and(Layer::is_loss)
    }

    /// Output shape of each layer given the input kind; used by builders.
    fn propagate(&self, layer: &Layer, cur: ShapeKind, idx: usize) -> Result<ShapeKind> {
        let err = |msg: String| Err(Error::shape(format!("{}: {msg}", layer.describe(idx))));
        match layer {
            Layer::Conv1d { in_ch, out_ch, kernel, stride, pad, residual, .. } => {
                if *kernel == 0 || *stride == 0 {
                    return err("kernel and stride must be positive".into());
                }
                match cur {
                    ShapeKind::Frames { channels } if channels == *in_ch => {
                        if *residual && !(in_ch == out_ch && *stride == 1 && 2 * pad == kernel - 1)
                        {
                            return err("residual conv must preserve shape".into());
                        }
                        Ok(ShapeKind::Frames { channels: *out_ch })
                    }
                    other => err(format!("expected frames with {in_ch} channels, got {other:?}")),
                }
            }
            Layer::Affine { in_dim, out_dim, .. } => match cur {
                ShapeKind::Vector { dim } if dim == *in_dim => {
                    Ok(ShapeKind::Vector { dim: *out_dim })
                }
                other => err(format!("expected vector of dim {in_dim}, got {other:?}")),
            },
            Layer::Relu => match cur {
                ShapeKind::Scalar => err("relu after loss".into()),
                s => Ok(s),
            },
            Layer::MeanStdPool => match cur {
                ShapeKind::Frames { channels } => Ok(ShapeKind::Vector { dim: 2 * channels }),
                other => err(format!("expected frames, got {other:?}")),
            },
            Layer::CosineHead { classes, emb_dim, .. }
            | Layer::AamHead { classes, emb_dim, .. } => match cur {
                ShapeKind::Vector { dim } if dim == *emb_dim => {
                    if *classes == 0 {
                        return err("head needs at least one class".into());
                    }
                    Ok(ShapeKind::Vector { dim: *classes })
                }
                other => err(format!("expected vector of dim {emb_dim}, got {other:?}")),
            },
            Layer::CrossEntropy | Layer::Hinge { .. } => match cur {
                ShapeKind::Vector { .. } => Ok(ShapeKind::Scalar),
                other => err(format!("expected vector, got {other:?}")),
            },
            Layer::LpNorm { p, squared } => {
                if *squared && *p != NormKind::P2 {
                    return err("squared norm defined for P2 only".into());
                }
                match cur {
                    ShapeKind::Scalar => err("norm after loss".into()),
                    _ => Ok(ShapeKind::Scalar),
                }
            }
        }
    }
}

/// Per-layer data saved by the forward pass for the backward rule.
#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Softmax probabilities (class mode) or sigmoid (trial mode).
    CrossEntropy { probs: Vec<f64> },
    /// Per-channel mean/std plus whether the variance floor was active.
    Pool { mean: Vec<f64>, std: Vec<f64>, floored: Vec<bool>, time: usize },
    /// Cosines per class plus norms needed for the backward rule.
    Head { cos: Vec<f64>, emb_norm: f64, w_norms: Vec<f64>, clamped: Vec<bool> },
    /// Hinge state: active branch and, in class mode, the runner-up index.
    Hinge { active: bool, rival: usize },
    /// Norm value for the P2 backward rule.
    Norm { value: f64 },
}

/// Activation cache from one forward pass; owned exclusively by that pass.
#[derive(Debug)]
pub struct Cache {
    /// `acts[0]` is the input; `acts[i + 1]` is the output of layer `i`.
    acts: Vec<Tensor>,
    aux: Vec<Aux>,
    label: Label,
    /// Hash of every discrete branch decision (relu signs, hinge activity,
    /// argmax picks, floors, clamps). Two evaluations with equal signatures
    /// lie on the same smooth piece of the loss.
    branch_sig: u64,
}

impl Cache {
    /// Input to the final layer; the logits when the graph ends in a loss.
    pub fn loss_input(&self) -> &Tensor {
        &self.acts[self.acts.len() - 2]
    }

    pub fn branch_signature(&self) -> u64 {
        self.branch_sig
    }
}

fn mix_bit(sig: &mut u64, bit: bool) {
    *sig = sig.wrapping_mul(0x100000001b3).wrapping_add(u64::from(bit) + 1);
}

fn mix_usize(sig: &mut u64, v: usize) {
    *sig = sig.wrapping_mul(0x100000001b3).wrapping_add(v as u64 + 0x9e37);
}

fn stable_softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn conv_out_len(t: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = t + 2 * pad;
    if padded < kernel {
        return Err(Error::shape(format!(
            "input of length {t} too short for kernel {kernel} with pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Validates the runtime input tensor against the graph's input descriptor.
fn check_input(graph: &GraphSpec, input: &Tensor) -> Result<()> {
    match graph.input {
        ShapeKind::Frames { channels } => {
            if input.shape().len() != 2 || input.shape()[0] != channels {
                return Err(Error::shape(format!(
                    "graph expects [{channels}, T] input, got {:?}",
                    input.shape()
                )));
            }
        }
        ShapeKind::Vector { dim } => {
            if input.shape() != [dim] {
                return Err(Error::shape(format!(
                    "graph expects [{dim}] input, got {:?}",
                    input.shape()
                )));
            }
        }
        ShapeKind::Scalar => return Err(Error::shape("scalar graph input is not supported")),
    }
    if !input.all_finite() {
        return Err(Error::numeric("input", "non-finite input value"));
    }
    Ok(())
}

fn check_label(graph: &GraphSpec, label: Label) -> Result<()> {
    let Some(last) = graph.layers.last() else {
        return Err(Error::shape("graph has no layers"));
    };
    match (last, label) {
        (Layer::CrossEntropy | Layer::Hinge { .. }, Label::Class(_) | Label::Trial { .. }) => {
            Ok(())
        }
        (Layer::LpNorm { .. }, Label::None) => Ok(()),
        (l, lab) => Err(Error::usage(format!(
            "label {lab:?} invalid for loss node {}",
            l.kind_str()
        ))),
    }
}

/// Runs the graph forward. Requires a loss node; returns the loss value and
/// the activation cache for one backward pass.
pub fn forward(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    label: Label,
) -> Result<(f64, Cache)> {
    if !graph.has_loss() {
        return Err(Error::shape("forward requires a graph ending in a loss node"));
    }
    check_label(graph, label)?;
    let cache = run_forward(graph, params, input, label, true)?;
    let loss = cache.acts.last().expect("loss activation").item();
    Ok((loss, cache))
}

/// Runs all non-loss layers and returns the final activation (e.g. logits or
/// an embedding). An angular-margin head runs margin-free here.
pub fn infer(graph: &GraphSpec, params: &ParamStore, input: &Tensor) -> Result<Tensor> {
    let cache = run_forward(graph, params, input, Label::None, false)?;
    Ok(cache.acts.into_iter().last().expect("final activation"))
}

fn run_forward(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    label: Label,
    include_loss: bool,
) -> Result<Cache> {
    check_input(graph, input)?;
    let mut acts: Vec<Tensor> = Vec::with_capacity(graph.layers.len() + 1);
    let mut aux: Vec<Aux> = Vec::with_capacity(graph.layers.len());
    let mut sig: u64 = 0xcbf29ce484222325;
    acts.push(input.clone());

    for (idx, layer) in graph.layers.iter().enumerate() {
        if layer.is_loss() && !include_loss {
            break;
        }
        let x = acts.last().expect("activation");
        let (out, a) = layer_forward(layer, params, x, label, &mut sig)
            .map_err(|e| annotate(e, layer, idx))?;
        if !out.all_finite() {
            return Err(Error::numeric(layer.describe(idx), "non-finite activation"));
        }
        aux.push(a);
        acts.push(out);
    }
    Ok(Cache { acts, aux, label, branch_sig: sig })
}

fn annotate(e: Error, layer: &Layer, idx: usize) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("{}: {msg}", layer.describe(idx))),
        Error::Numeric { detail, .. } => Error::numeric(layer.describe(idx), detail),
        other => other,
    }
}

fn layer_forward(
    layer: &Layer,
    params: &ParamStore,
    x: &Tensor,
    label: Label,
    sig: &mut u64,
) -> Result<(Tensor, Aux)> {
    match layer {
        Layer::Conv1d { name, in_ch, out_ch, kernel, stride, pad, residual, .. } => {
            let t = x.shape()[1];
            let t_out = conv_out_len(t, *kernel, *stride, *pad)?;
            let w = params.get(&format!("{name}.w"))?;
            let b = params.get(&format!("{name}.b"))?;
            if w.shape() != [*out_ch, *in_ch, *kernel] || b.shape() != [*out_ch] {
                return Err(Error::shape(format!("bad parameter shapes for conv `{name}`")));
            }
            let mut out = vec![0.0; out_ch * t_out];
            let xv = x.values();
            let wv = w.values();
            for o in 0..*out_ch {
                let orow = &mut out[o * t_out..(o + 1) * t_out];
                orow.fill(b.values()[o]);
                for i in 0..*in_ch {
                    let xrow = &xv[i * t..(i + 1) * t];
                    for k in 0..*kernel {
                        let wgt = wv[(o * in_ch + i) * kernel + k];
                        if wgt == 0.0 {
                            continue;
                        }
                        // valid range of t' with 0 <= t'*stride + k - pad < t
                        let lo = pad.saturating_sub(k).div_ceil(*stride);
                        if t + pad <= k {
                            continue;
                        }
                        let hi = ((t + pad - k - 1) / stride).min(t_out - 1);
                        let mut src = lo * stride + k - pad;
                        if *stride == 1 {
                            for tv in &mut orow[lo..=hi] {
                                *tv += wgt * xrow[src];
                                src += 1;
                            }
                        } else {
                            for tv in &mut orow[lo..=hi] {
                                *tv += wgt * xrow[src];
                                src += stride;
                            }
                        }
                    }
                }
            }
            if *residual {
                for (ov, xvv) in out.iter_mut().zip(xv.iter()) {
                    *ov += *xvv;
                }
            }
            Ok((Tensor::new(vec![*out_ch, t_out], out)?, Aux::None))
        }
        Layer::Affine { name, in_dim, out_dim, .. } => {
            let w = params.get(&format!("{name}.w"))?;
            let b = params.get(&format!("{name}.b"))?;
            if w.shape() != [*out_dim, *in_dim] || b.shape() != [*out_dim] {
                return Err(Error::shape(format!("bad parameter shapes for affine `{name}`")));
            }
            let xv = x.values();
            let mut out = b.values().to_vec();
            for (r, ov) in out.iter_mut().enumerate() {
                let wrow = &w.values()[r * in_dim..(r + 1) * in_dim];
                *ov += wrow.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok((Tensor::new(vec![*out_dim], out)?, Aux::None))
        }
        Layer::Relu => {
            let mut out = x.clone();
            for v in out.values_mut() {
                let pos = *v > 0.0;
                mix_bit(sig, pos);
                if !pos {
                    *v = 0.0;
                }
            }
            Ok((out, Aux::None))
        }
        Layer::MeanStdPool => {
            let (c, t) = (x.shape()[0], x.shape()[1]);
            let mut out = vec![0.0; 2 * c];
            let mut mean = vec![0.0; c];
            let mut std = vec![0.0; c];
            let mut floored = vec![false; c];
            for ch in 0..c {
                let row = &x.values()[ch * t..(ch + 1) * t];
                let m = row.iter().sum::<f64>() / t as f64;
                let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t as f64;
                let fl = var <= STD_POOL_VAR_FLOOR;
                mix_bit(sig, fl);
                let s = var.max(STD_POOL_VAR_FLOOR).sqrt();
                mean[ch] = m;
                std[ch] = s;
                floored[ch] = fl;
                out[ch] = m;
                out[c + ch] = s;
            }
            Ok((Tensor::new(vec![2 * c], out)?, Aux::Pool { mean, std, floored, time: t }))
        }
        Layer::CosineHead { name, classes, emb_dim, scale, .. } => {
            let (cos, emb_norm, w_norms, clamped, logits) =
                head_cosines(params, name, x, *classes, *emb_dim, *scale, sig)?;
            Ok((logits, Aux::Head { cos, emb_norm, w_norms, clamped }))
        }
        Layer::AamHead { name, classes, emb_dim, scale, margin, .. } => {
            let (cos, emb_norm, w_norms, clamped, mut logits) =
                head_cosines(params, name, x, *classes, *emb_dim, *scale, sig)?;
            if let Label::Class(y) = label {
                if y >= *classes {
                    return Err(Error::usage(format!("class label {y} out of range")));
                }
                if *margin != 0.0 {
                    let c = cos[y];
                    let sin = (1.0 - c * c).sqrt();
                    logits.values_mut()[y] =
                        scale * (c * margin.cos() - sin * margin.sin());
                }
            }
            Ok((logits, Aux::Head { cos, emb_norm, w_norms, clamped }))
        }
        Layer::CrossEntropy => match label {
            Label::Class(y) => {
                let z = x.values();
                if z.len() < 2 {
                    return Err(Error::shape("cross-entropy needs >= 2 logits"));
                }
                if y >= z.len() {
                    return Err(Error::usage(format!("class label {y} out of range")));
                }
                let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
                let loss = zmax + sum.ln() - z[y];
                let probs: Vec<f64> = z.iter().map(|v| (v - zmax).exp() / sum).collect();
                Ok((Tensor::scalar(loss), Aux::CrossEntropy { probs }))
            }
            Label::Trial { target } => {
                if x.len() != 1 {
                    return Err(Error::shape("trial cross-entropy needs a scalar score"));
                }
                let z = x.values()[0];
                let loss = if target { stable_softplus(-z) } else { stable_softplus(z) };
                Ok((Tensor::scalar(loss), Aux::CrossEntropy { probs: vec![sigmoid(z)] }))
            }
            Label::None => Err(Error::usage("cross-entropy needs a label")),
        },
        Layer::Hinge { kappa, threshold } => match label {
            Label::Class(y) => {
                let z = x.values();
                if z.len() < 2 {
                    return Err(Error::shape("class hinge needs >= 2 logits"));
                }
                if y >= z.len() {
                    return Err(Error::usage(format!("class label {y} out of range")));
                }
                let mut rival = usize::MAX;
                let mut best = f64::NEG_INFINITY;
                for (j, &v) in z.iter().enumerate() {
                    if j != y && v > best {
                        best = v;
                        rival = j;
                    }
                }
                let m = z[y] - best + kappa;
                let active = m > 0.0;
                mix_bit(sig, active);
                mix_usize(sig, rival);
                Ok((Tensor::scalar(m.max(0.0)), Aux::Hinge { active, rival }))
            }
            Label::Trial { target } => {
                if x.len() != 1 {
                    return Err(Error::shape("trial hinge needs a scalar score"));
                }
                let z = x.values()[0];
                let m = if target { z - threshold + kappa } else { threshold - z + kappa };
                let active = m > 0.0;
                mix_bit(sig, active);
                Ok((Tensor::scalar(m.max(0.0)), Aux::Hinge { active, rival: 0 }))
            }
            Label::None => Err(Error::usage("hinge needs a label")),
        },
        Layer::LpNorm { p, squared } => {
            let z = x.values();
            let value = match p {
                NormKind::P1 => {
                    for v in z {
                        mix_bit(sig, *v > 0.0);
                        mix_bit(sig, *v < 0.0);
                    }
                    z.iter().map(|v| v.abs()).sum()
                }
                NormKind::P2 => {
                    let ss: f64 = z.iter().map(|v| v * v).sum();
                    if *squared {
                        ss
                    } else {
                        ss.sqrt()
                    }
                }
                NormKind::PInf => {
                    let mut arg = 0;
                    let mut best = -1.0;
                    for (j, v) in z.iter().enumerate() {
                        if v.abs() > best {
                            best = v.abs();
                            arg = j;
                        }
                    }
                    mix_usize(sig, arg);
                    mix_bit(sig, z[arg] > 0.0);
                    best.max(0.0)
                }
            };
            let norm = match p {
                NormKind::P2 if !squared => value,
                NormKind::P2 => value.sqrt(),
                _ => value,
            };
            Ok((Tensor::scalar(value), Aux::Norm { value: norm }))
        }
    }
}

/// Shared cosine computation for both head types.
#[allow(clippy::type_complexity)]
fn head_cosines(
    params: &ParamStore,
    name: &str,
    x: &Tensor,
    classes: usize,
    emb_dim: usize,
    scale: f64,
    sig: &mut u64,
) -> Result<(Vec<f64>, f64, Vec<f64>, Vec<bool>, Tensor)> {
    let w = params.get(&format!("{name}.w"))?;
    if w.shape() != [classes, emb_dim] {
        return Err(Error::shape(format!("bad parameter shape for head `{name}`")));
    }
    let e = x.values();
    let emb_norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if emb_norm < 1e-300 {
        return Err(Error::numeric(name, "zero embedding norm in cosine head"));
    }
    let mut cos = vec![0.0; classes];
    let mut w_norms = vec![0.0; classes];
    let mut clamped = vec![false; classes];
    let mut logits = vec![0.0; classes];
    for j in 0..classes {
        let row = &w.values()[j * emb_dim..(j + 1) * emb_dim];
        let wn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if wn < 1e-300 {
            return Err(Error::numeric(name, format!("zero weight norm for class {j}")));
        }
        let dot: f64 = row.iter().zip(e).map(|(a, b)| a * b).sum();
        let mut c = dot / (emb_norm * wn);
        let cl = c.abs() > COS_CLAMP;
        mix_bit(sig, cl);
        if cl {
            c = c.clamp(-COS_CLAMP, COS_CLAMP);
        }
        cos[j] = c;
        w_norms[j] = wn;
        clamped[j] = cl;
        logits[j] = scale * c;
    }
    Ok((cos, emb_norm, w_norms, clamped, Tensor::new(vec![classes], logits)?))
}

/// What the backward pass should produce.
struct BackwardOut {
    input_grad: Tensor,
    param_grads: Option<ParamStore>,
}

fn run_backward(
    graph: &GraphSpec,
    params: &ParamStore,
    cache: &Cache,
    loss_seed: f64,
    want_params: bool,
) -> Result<BackwardOut> {
    let n = cache.aux.len();
    let mut param_grads = want_params.then(|| params.zeros_like());
    // Gradient of the loss w.r.t. the current layer's output.
    let mut grad = Tensor::scalar(loss_seed);
    for idx in (0..n).rev() {
        let layer = &graph.layers[idx];
        let x = &cache.acts[idx];
        let out = &cache.acts[idx + 1];
        grad = layer_backward(
            layer,
            params,
            x,
            out,
            &cache.aux[idx],
            cache.label,
            &grad,
            param_grads.as_mut(),
        )
        .map_err(|e| annotate(e, layer, idx))?;
        if !grad.all_finite() {
            return Err(Error::numeric(layer.describe(idx), "non-finite gradient"));
        }
    }
    Ok(BackwardOut { input_grad: grad, param_grads })
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    layer: &Layer,
    params: &ParamStore,
    x: &Tensor,
    out: &Tensor,
    aux: &Aux,
    label: Label,
    gout: &Tensor,
    mut param_grads: Option<&mut ParamStore>,
) -> Result<Tensor> {
    match layer {
        Layer::Conv1d { name, in_ch, out_ch, kernel, stride, pad, residual, frozen } => {
            let t = x.shape()[1];
            let t_out = out.shape()[1];
            let w = params.get(&format!("{name}.w"))?;
            let xv = x.values();
            let gv = gout.values();
            let mut gx = vec![0.0; in_ch * t];
            for o in 0..*out_ch {
                let grow = &gv[o * t_out..(o + 1) * t_out];
                for i in 0..*in_ch {
                    let xrow = &xv[i * t..(i + 1) * t];
                    let gxrow = &mut gx[i * t..(i + 1) * t];
                    for k in 0..*kernel {
                        let widx = (o * in_ch + i) * kernel + k;
                        let wgt = w.values()[widx];
                        let lo = pad.saturating_sub(k).div_ceil(*stride);
                        if t + pad <= k {
                            continue;
                        }
                        let hi = ((t + pad - k - 1) / stride).min(t_out - 1);
                        if lo > hi {
                            continue;
                        }
                        let mut src = lo * stride + k - pad;
                        let mut wsum = 0.0;
                        for &g in &grow[lo..=hi] {
                            gxrow[src] += wgt * g;
                            wsum += g * xrow[src];
                            src += stride;
                        }
                        if !frozen {
                            if let Some(pg) = param_grads.as_deref_mut() {
                                pg.get_mut(&format!("{name}.w"))?.values_mut()[widx] += wsum;
                            }
                        }
                    }
                }
                if !frozen {
                    if let Some(pg) = param_grads.as_deref_mut() {
                        pg.get_mut(&format!("{name}.b"))?.values_mut()[o] +=
                            grow.iter().sum::<f64>();
                    }
                }
            }
            if *residual {
                for (g, go) in gx.iter_mut().zip(gv.iter()) {
                    *g += *go;
                }
            }
            Tensor::new(vec![*in_ch, t], gx)
        }
        Layer::Affine { name, in_dim, out_dim, frozen } => {
            let w = params.get(&format!("{name}.w"))?;
            let xv = x.values();
            let gv = gout.values();
            let mut gx = vec![0.0; *in_dim];
            for r in 0..*out_dim {
                let wrow = &w.values()[r * in_dim..(r + 1) * in_dim];
                let g = gv[r];
                for (gxc, wv) in gx.iter_mut().zip(wrow) {
                    *gxc += g * wv;
                }
            }
            if !frozen {
                if let Some(pg) = param_grads.as_deref_mut() {
                    let gw = pg.get_mut(&format!("{name}.w"))?.values_mut();
                    for r in 0..*out_dim {
                        let g = gv[r];
                        for (c, xvv) in xv.iter().enumerate() {
                            gw[r * in_dim + c] += g * xvv;
                        }
                    }
                    let gb = pg.get_mut(&format!("{name}.b"))?.values_mut();
                    for (b, g) in gb.iter_mut().zip(gv) {
                        *b += g;
                    }
                }
            }
            Tensor::new(vec![*in_dim], gx)
        }
        Layer::Relu => {
            let mut gx = gout.clone();
            for (g, xv) in gx.values_mut().iter_mut().zip(x.values()) {
                if *xv <= 0.0 {
                    *g = 0.0;
                }
            }
            Ok(gx)
        }
        Layer::MeanStdPool => {
            let Aux::Pool { mean, std, floored, time } = aux else { unreachable!() };
            let (c, t) = (x.shape()[0], *time);
            let gv = gout.values();
            let mut gx = vec![0.0; c * t];
            for ch in 0..c {
                let row = &x.values()[ch * t..(ch + 1) * t];
                let grow = &mut gx[ch * t..(ch + 1) * t];
                let gmean = gv[ch] / t as f64;
                let gstd = gv[c + ch];
                for (j, g) in grow.iter_mut().enumerate() {
                    *g = gmean;
                    if !floored[ch] {
                        *g += gstd * (row[j] - mean[ch]) / (t as f64 * std[ch]);
                    }
                }
            }
            Tensor::new(vec![c, t], gx)
        }
        Layer::CosineHead { name, classes, emb_dim, scale, frozen } => head_backward(
            params,
            name,
            x,
            aux,
            gout,
            param_grads,
            *classes,
            *emb_dim,
            *scale,
            0.0,
            label,
            *frozen,
        ),
        Layer::AamHead { name, classes, emb_dim, scale, margin, frozen } => head_backward(
            params,
            name,
            x,
            aux,
            gout,
            param_grads,
            *classes,
            *emb_dim,
            *scale,
            *margin,
            label,
            *frozen,
        ),
        Layer::CrossEntropy => {
            let Aux::CrossEntropy { probs } = aux else { unreachable!() };
            let g = gout.item();
            match label {
                Label::Class(y) => {
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * g).collect();
                    gx[y] -= g;
                    Tensor::new(vec![gx.len()], gx)
                }
                Label::Trial { target } => {
                    let p = probs[0];
                    let gz = if target { p - 1.0 } else { p };
                    Ok(Tensor::from_vec(vec![gz * g]))
                }
                Label::None => unreachable!(),
            }
        }
        Layer::Hinge { .. } => {
            let Aux::Hinge { active, rival } = aux else { unreachable!() };
            let g = gout.item();
            let mut gx = vec![0.0; x.len()];
            if *active {
                match label {
                    Label::Class(y) => {
                        gx[y] = g;
                        gx[*rival] = -g;
                    }
                    Label::Trial { target } => {
                        gx[0] = if target { g } else { -g };
                    }
                    Label::None => unreachable!(),
                }
            }
            Tensor::new(vec![gx.len()], gx)
        }
        Layer::LpNorm { p, squared } => {
            let Aux::Norm { value } = aux else { unreachable!() };
            let g = gout.item();
            let z = x.values();
            let gx: Vec<f64> = match p {
                NormKind::P1 => z.iter().map(|v| g * v.signum_or_zero()).collect(),
                NormKind::P2 => {
                    if *squared {
                        z.iter().map(|v| 2.0 * v * g).collect()
                    } else if *value < 1e-300 {
                        vec![0.0; z.len()]
                    } else {
                        z.iter().map(|v| g * v / value).collect()
                    }
                }
                NormKind::PInf => {
                    let mut arg = 0;
                    let mut best = -1.0;
                    for (j, v) in z.iter().enumerate() {
                        if v.abs() > best {
                            best = v.abs();
                            arg = j;
                        }
                    }
                    let mut gx = vec![0.0; z.len()];
                    gx[arg] = g * z[arg].signum_or_zero();
                    gx
                }
            };
            Tensor::new(vec![gx.len()], gx)
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn head_backward(
    params: &ParamStore,
    name: &str,
    x: &Tensor,
    aux: &Aux,
    gout: &Tensor,
    mut param_grads: Option<&mut ParamStore>,
    classes: usize,
    emb_dim: usize,
    scale: f64,
    margin: f64,
    label: Label,
    frozen: bool,
) -> Result<Tensor> {
    let Aux::Head { cos, emb_norm, w_norms, clamped } = aux else { unreachable!() };
    let w = params.get(&format!("{name}.w"))?;
    let e = x.values();
    let gv = gout.values();
    let mut gx = vec![0.0; emb_dim];
    let margin_class = match label {
        Label::Class(y) if margin != 0.0 => Some(y),
        _ => None,
    };
    for j in 0..classes {
        let mut gcos = gv[j] * scale;
        if Some(j) == margin_class {
            let c = cos[j];
            let sin = (1.0 - c * c).sqrt();
            // d/dc [c cos(m) - sqrt(1-c^2) sin(m)] = cos(m) + c sin(m)/sin
            gcos = gv[j] * scale * (margin.cos() + c * margin.sin() / sin.max(1e-12));
        }
        if clamped[j] {
            gcos = 0.0;
        }
        if gcos == 0.0 {
            continue;
        }
        let row = &w.values()[j * emb_dim..(j + 1) * emb_dim];
        let denom = emb_norm * w_norms[j];
        for (d, (gxd, (ev, wv))) in gx.iter_mut().zip(e.iter().zip(row)).enumerate() {
            let _ = d;
            *gxd += gcos * (wv / denom - cos[j] * ev / (emb_norm * emb_norm));
        }
        if !frozen {
            if let Some(pg) = param_grads.as_deref_mut() {
                let gw = pg.get_mut(&format!("{name}.w"))?.values_mut();
                let grow = &mut gw[j * emb_dim..(j + 1) * emb_dim];
                for (gwd, (ev, wv)) in grow.iter_mut().zip(e.iter().zip(row)) {
                    *gwd += gcos * (ev / denom - cos[j] * wv / (w_norms[j] * w_norms[j]));
                }
            }
        }
    }
    Tensor::new(vec![emb_dim], gx)
}

/// Gradient of the loss with respect to the input tensor.
pub fn grad_input(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    label: Label,
) -> Result<Tensor> {
    let (_, cache) = forward(graph, params, input, label)?;
    let out = run_backward(graph, params, &cache, 1.0, false)?;
    Ok(out.input_grad)
}

/// Gradient of the loss with respect to every non-frozen parameter.
pub fn grad_params(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    label: Label,
) -> Result<ParamStore> {
    let (_, cache) = forward(graph, params, input, label)?;
    let out = run_backward(graph, params, &cache, 1.0, true)?;
    Ok(out.param_grads.expect("param grads requested"))
}

/// Loss, input gradient and parameter gradients in one pass (training).
pub fn forward_backward(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    label: Label,
) -> Result<(f64, Tensor, ParamStore, Cache)> {
    let (loss, cache) = forward(graph, params, input, label)?;
    let out = run_backward(graph, params, &cache, 1.0, true)?;
    Ok((loss, out.input_grad, out.param_grads.expect("param grads"), cache))
}

/// Loss, input gradient and the activation cache in one pass.
pub fn loss_and_grad_input(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    label: Label,
) -> Result<(f64, Tensor, Cache)> {
    let (loss, cache) = forward(graph, params, input, label)?;
    let out = run_backward(graph, params, &cache, 1.0, false)?;
    Ok((loss, out.input_grad, cache))
}

/// Input gradient of `seed * loss`; used where an objective scales a graph
/// loss by a constant (e.g. a penalty weight).
pub fn grad_input_scaled(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    label: Label,
    seed: f64,
) -> Result<(f64, Tensor)> {
    let (loss, cache) = forward(graph, params, input, label)?;
    let out = run_backward(graph, params, &cache, seed, false)?;
    Ok((loss, out.input_grad))
}

/// Central-difference verification of the analytic gradients.
///
/// Samples coordinates of the input and of every non-frozen parameter,
/// compares `(L(x+h) - L(x-h)) / 2h` against the backward pass, and returns
/// the maximum relative error. Coordinates where the two perturbed passes
/// land on different smooth pieces (branch signatures differ) are skipped:
/// a central difference across a kink says nothing about either side.
pub fn finite_diff_check(
    graph: &GraphSpec,
    params: &ParamStore,
    input: &Tensor,
    label: Label,
    step: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::precondition(format!("step {step} outside [1e-7, 1e-3]")));
    }
    let (_, cache) = forward(graph, params, input, label)?;
    let analytic = run_backward(graph, params, &cache, 1.0, true)?;
    let pg = analytic.param_grads.expect("param grads");

    let frozen_names: Vec<String> = graph
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Conv1d { name, frozen: true, .. }
            | Layer::Affine { name, frozen: true, .. }
            | Layer::CosineHead { name, frozen: true, .. }
            | Layer::AamHead { name, frozen: true, .. } => Some(name.clone()),
            _ => None,
        })
        .collect();

    // Candidate coordinates: (param name or input marker, flat index).
    let mut rng = rng_from_seed(0x66d1);
    let per_side = 100usize;
    let input_coords = sample_indices(&mut rng, input.len(), per_side.max(if params.is_empty() { 2 * per_side } else { 0 }));
    let mut param_coords: Vec<(String, usize)> = Vec::new();
    {
        let mut all: Vec<(String, usize)> = Vec::new();
        for (name, t) in params.iter() {
            let base = name.split('.').next().unwrap_or("");
            if frozen_names.iter().any(|f| f == base) {
                continue;
            }
            for i in 0..t.len() {
                all.push((name.clone(), i));
            }
        }
        if all.len() <= per_side {
            param_coords = all;
        } else {
            for idx in sample_indices(&mut rng, all.len(), per_side) {
                param_coords.push(all[idx].clone());
            }
        }
    }

    let mut max_rel: f64 = 0.0;
    let eval = |graph: &GraphSpec,
                    params: &ParamStore,
                    input: &Tensor|
     -> Result<(f64, u64)> {
        let (l, c) = forward(graph, params, input, label)?;
        Ok((l, c.branch_signature()))
    };

    for &i in &input_coords {
        let mut xp = input.clone();
        xp.values_mut()[i] += step;
        let (lp, sp) = eval(graph, params, &xp)?;
        let mut xm = input.clone();
        xm.values_mut()[i] -= step;
        let (lm, sm) = eval(graph, params, &xm)?;
        if sp != sm {
            continue;
        }
        let fd = (lp - lm) / (2.0 * step);
        let g = analytic.input_grad.values()[i];
        max_rel = max_rel.max(rel_err(fd, g));
    }
    for (name, i) in &param_coords {
        let mut pp = params.clone();
        pp.get_mut(name)?.values_mut()[*i] += step;
        let (lp, sp) = eval(graph, &pp, input)?;
        let mut pm = params.clone();
        pm.get_mut(name)?.values_mut()[*i] -= step;
        let (lm, sm) = eval(graph, &pm, input)?;
        if sp != sm {
            continue;
        }
        let fd = (lp - lm) / (2.0 * step);
        let g = pg.get(name)?.values()[*i];
        max_rel = max_rel.max(rel_err(fd, g));
    }
    Ok(max_rel)
}

fn rel_err(fd: f64, g: f64) -> f64 {
    (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6)
}

fn sample_indices(rng: &mut rand_chacha::ChaCha8Rng, len: usize, want: usize) -> Vec<usize> {
    if len <= want {
        return (0..len).collect();
    }
    let mut seen = std::collections::BTreeSet::new();
    while seen.len() < want {
        seen.insert(rng.gen_range(0..len));
    }
    seen.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn affine_graph(in_dim: usize, out_dim: usize, loss: Layer) -> GraphSpec {
        GraphSpec::new(
            ShapeKind::Vector { dim: in_dim },
            vec![
                Layer::Affine { name: "a".into(), in_dim, out_dim, frozen: false },
                loss,
            ],
        )
        .unwrap()
    }

    fn identity_params(dim: usize) -> ParamStore {
        let mut p = ParamStore::new();
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        p.insert("a.w", Tensor::new(vec![dim, dim], w).unwrap()).unwrap();
        p.insert("a.b", Tensor::zeros(vec![dim])).unwrap();
        p
    }

    #[test]
    fn identity_affine_passes_input_through() {
        let g = affine_graph(2, 2, Layer::CrossEntropy);
        let p = identity_params(2);
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let (_, cache) = forward(&g, &p, &x, Label::Class(0)).unwrap();
        assert_eq!(cache.loss_input().values(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let g = affine_graph(2, 2, Layer::CrossEntropy);
        let p = identity_params(2);
        let x = Tensor::from_vec(vec![0.0, 0.0]);
        let (loss, _) = forward(&g, &p, &x, Label::Class(0)).unwrap();
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_two_one_logits() {
        // logits [2, 1], label 0 -> ln(1 + e^{-1})
        let g = affine_graph(2, 2, Layer::CrossEntropy);
        let p = identity_params(2);
        let x = Tensor::from_vec(vec![2.0, 1.0]);
        let (loss, _) = forward(&g, &p, &x, Label::Class(0)).unwrap();
        assert_abs_diff_eq!(loss, (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 0.31326168751822286, epsilon = 1e-12);
    }

    #[test]
    fn grad_input_is_softmax_minus_onehot_through_identity() {
        let g = affine_graph(2, 2, Layer::CrossEntropy);
        let p = identity_params(2);
        let x = Tensor::from_vec(vec![0.0, 0.0]);
        let gi = grad_input(&g, &p, &x, Label::Class(0)).unwrap();
        assert_abs_diff_eq!(gi.values()[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(gi.values()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn constant_graph_has_zero_input_gradient() {
        // W = 0 makes the logits (and the loss) independent of the input.
        let g = affine_graph(2, 2, Layer::CrossEntropy);
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::zeros(vec![2, 2])).unwrap();
        p.insert("a.b", Tensor::zeros(vec![2])).unwrap();
        let x = Tensor::from_vec(vec![3.0, -1.5]);
        let gi = grad_input(&g, &p, &x, Label::Class(0)).unwrap();
        assert_eq!(gi.values(), &[0.0, 0.0]);
    }

    #[test]
    fn loss_scaling_scales_gradient_linearly() {
        let g = affine_graph(3, 3, Layer::CrossEntropy);
        let p = identity_params(3);
        let x = Tensor::from_vec(vec![0.3, -0.2, 0.9]);
        let (_, g1) = grad_input_scaled(&g, &p, &x, Label::Class(1), 1.0).unwrap();
        let (_, g3) = grad_input_scaled(&g, &p, &x, Label::Class(1), 3.0).unwrap();
        for (a, b) in g1.values().iter().zip(g3.values()) {
            assert_abs_diff_eq!(3.0 * a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn squared_error_param_gradient() {
        // z = W x, loss = z^2 with W = 1, x = 2: dL/dW = 2 z x = 8.
        let g = GraphSpec::new(
            ShapeKind::Vector { dim: 1 },
            vec![
                Layer::Affine { name: "a".into(), in_dim: 1, out_dim: 1, frozen: false },
                Layer::LpNorm { p: NormKind::P2, squared: true },
            ],
        )
        .unwrap();
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        p.insert("a.b", Tensor::zeros(vec![1])).unwrap();
        let x = Tensor::from_vec(vec![2.0]);
        let pg = grad_params(&g, &p, &x, Label::None).unwrap();
        assert_abs_diff_eq!(pg.get("a.w").unwrap().values()[0], 8.0, epsilon = 1e-12);
    }

    #[test]
    fn frozen_layer_gets_zero_param_gradient() {
        let g = GraphSpec::new(
            ShapeKind::Vector { dim: 2 },
            vec![
                Layer::Affine { name: "a".into(), in_dim: 2, out_dim: 2, frozen: true },
                Layer::CrossEntropy,
            ],
        )
        .unwrap();
        let p = identity_params(2);
        let x = Tensor::from_vec(vec![1.0, -1.0]);
        let pg = grad_params(&g, &p, &x, Label::Class(0)).unwrap();
        assert!(pg.get("a.w").unwrap().values().iter().all(|&v| v == 0.0));
        assert!(pg.get("a.b").unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_are_deterministic() {
        let g = affine_graph(4, 3, Layer::CrossEntropy);
        let mut p = ParamStore::new();
        let mut rng = rng_from_seed(11);
        let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.insert("a.w", Tensor::new(vec![3, 4], w).unwrap()).unwrap();
        p.insert("a.b", Tensor::from_vec(vec![0.1, -0.2, 0.3])).unwrap();
        let x = Tensor::from_vec(vec![0.5, -0.4, 0.2, 0.9]);
        let a = grad_params(&g, &p, &x, Label::Class(2)).unwrap();
        let b = grad_params(&g, &p, &x, Label::Class(2)).unwrap();
        assert_eq!(a, b);
        let ga = grad_input(&g, &p, &x, Label::Class(2)).unwrap();
        let gb = grad_input(&g, &p, &x, Label::Class(2)).unwrap();
        assert_eq!(ga.values(), gb.values());
    }

    #[test]
    fn constant_frames_pool_to_variance_floor() {
        let g = GraphSpec::new(
            ShapeKind::Frames { channels: 1 },
            vec![Layer::MeanStdPool, Layer::LpNorm { p: NormKind::P2, squared: false }],
        )
        .unwrap();
        let p = ParamStore::new();
        let x = Tensor::new(vec![1, 8], vec![0.25; 8]).unwrap();
        let (_, cache) = forward(&g, &p, &x, Label::None).unwrap();
        let pooled = &cache.acts[1];
        assert_abs_diff_eq!(pooled.values()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(pooled.values()[1], STD_POOL_VAR_FLOOR.sqrt(), epsilon = 1e-18);
        let gi = grad_input(&g, &p, &x, Label::None).unwrap();
        assert!(gi.all_finite());
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let g = affine_graph(2, 2, Layer::CrossEntropy);
        let p = identity_params(2);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            forward(&g, &p, &x, Label::Class(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn forward_names_layer_on_non_finite() {
        let g = affine_graph(2, 2, Layer::CrossEntropy);
        let mut p = identity_params(2);
        p.get_mut("a.b").unwrap().values_mut()[0] = f64::INFINITY;
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = forward(&g, &p, &x, Label::Class(0)).unwrap_err();
        assert!(err.to_string().contains("a"), "{err}");
    }

    #[test]
    fn hinge_class_mode_matches_margin_definition() {
        let g = affine_graph(2, 2, Layer::Hinge { kappa: 0.0, threshold: 0.0 });
        let p = identity_params(2);
        // logits [2,1], true class 0, kappa 0 -> f = 1
        let (f, _) = forward(&g, &p, &Tensor::from_vec(vec![2.0, 1.0]), Label::Class(0)).unwrap();
        assert_abs_diff_eq!(f, 1.0, epsilon = 1e-12);
        // logits [0,5], true class 0 -> already misclassified, f = 0
        let (f, _) = forward(&g, &p, &Tensor::from_vec(vec![0.0, 5.0]), Label::Class(0)).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn aam_margin_zero_matches_cosine_head() {
        let mut p = ParamStore::new();
        let mut rng = rng_from_seed(3);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        p.insert("h.w", Tensor::new(vec![3, 2], w).unwrap()).unwrap();
        let x = Tensor::from_vec(vec![0.7, -0.4]);
        let aam = GraphSpec::new(
            ShapeKind::Vector { dim: 2 },
            vec![
                Layer::AamHead {
                    name: "h".into(),
                    classes: 3,
                    emb_dim: 2,
                    scale: 30.0,
                    margin: 0.0,
                    frozen: false,
                },
                Layer::CrossEntropy,
            ],
        )
        .unwrap();
        let cosine = GraphSpec::new(
            ShapeKind::Vector { dim: 2 },
            vec![
                Layer::CosineHead {
                    name: "h".into(),
                    classes: 3,
                    emb_dim: 2,
                    scale: 30.0,
                    frozen: false,
                },
                Layer::CrossEntropy,
            ],
        )
        .unwrap();
        let (_, ca) = forward(&aam, &p, &x, Label::Class(1)).unwrap();
        let (_, cb) = forward(&cosine, &p, &x, Label::Class(1)).unwrap();
        assert_eq!(ca.loss_input().values(), cb.loss_input().values());
        // And inference ignores the margin entirely.
        let logits = infer(&aam, &p, &x).unwrap();
        assert_eq!(logits.values(), cb.loss_input().values());
    }

    #[test]
    fn graph_rejects_midstream_loss() {
        let r = GraphSpec::new(
            ShapeKind::Vector { dim: 2 },
            vec![Layer::CrossEntropy, Layer::Relu],
        );
        assert!(r.is_err());
    }

    fn random_conv_graph(seed: u64) -> (GraphSpec, ParamStore, Tensor) {
        let mut rng = rng_from_seed(seed);
        let g = GraphSpec::new(
            ShapeKind::Frames { channels: 2 },
            vec![
                Layer::Conv1d {
                    name: "c0".into(),
                    in_ch: 2,
                    out_ch: 3,
                    kernel: 5,
                    stride: 2,
                    pad: 2,
                    residual: false,
                    frozen: false,
                },
                Layer::Relu,
                Layer::Conv1d {
                    name: "c1".into(),
                    in_ch: 3,
                    out_ch: 3,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    residual: true,
                    frozen: false,
                },
                Layer::MeanStdPool,
                Layer::Affine { name: "e".into(), in_dim: 6, out_dim: 4, frozen: false },
                Layer::AamHead {
                    name: "h".into(),
                    classes: 3,
                    emb_dim: 4,
                    scale: 10.0,
                    margin: 0.2,
                    frozen: false,
                },
                Layer::CrossEntropy,
            ],
        )
        .unwrap();
        let mut p = ParamStore::new();
        let mut t = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Tensor::new(shape, v).unwrap()
        };
        p.insert("c0.w", t(vec![3, 2, 5])).unwrap();
        p.insert("c0.b", t(vec![3])).unwrap();
        p.insert("c1.w", t(vec![3, 3, 3])).unwrap();
        p.insert("c1.b", t(vec![3])).unwrap();
        p.insert("e.w", t(vec![4, 6])).unwrap();
        p.insert("e.b", t(vec![4])).unwrap();
        p.insert("h.w", t(vec![3, 4])).unwrap();
        let x = t(vec![2, 40]);
        (g, p, x)
    }

    #[test]
    fn finite_diff_passes_on_full_stack() {
        for seed in 0..3 {
            let (g, p, x) = random_conv_graph(seed);
            let err = finite_diff_check(&g, &p, &x, Label::Class(1), 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn finite_diff_is_tight_on_linear_graph() {
        // Affine into a far-from-kink trial hinge is globally linear, where
        // central differences are exact up to rounding.
        let g = GraphSpec::new(
            ShapeKind::Vector { dim: 2 },
            vec![
                Layer::Affine { name: "a".into(), in_dim: 2, out_dim: 1, frozen: false },
                Layer::Hinge { kappa: 5.0, threshold: 0.0 },
            ],
        )
        .unwrap();
        let mut p = ParamStore::new();
        p.insert("a.w", Tensor::new(vec![1, 2], vec![0.7, -0.3]).unwrap()).unwrap();
        p.insert("a.b", Tensor::from_vec(vec![0.1])).unwrap();
        let x = Tensor::from_vec(vec![0.4, 0.8]);
        let err = finite_diff_check(&g, &p, &x, Label::Trial { target: true }, 1e-5).unwrap();
        assert!(err < 1e-8, "max rel err {err}");
    }

    #[test]
    fn finite_diff_covers_parameterless_graphs() {
        let g = GraphSpec::new(
            ShapeKind::Frames { channels: 1 },
            vec![Layer::Relu, Layer::MeanStdPool, Layer::LpNorm { p: NormKind::P2, squared: false }],
        )
        .unwrap();
        let p = ParamStore::new();
        let mut rng = rng_from_seed(9);
        let x = Tensor::new(vec![1, 150], (0..150).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let err = finite_diff_check(&g, &p, &x, Label::None, 1e-5).unwrap();
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn finite_diff_rejects_out_of_range_step() {
        let (g, p, x) = random_conv_graph(0);
        assert!(finite_diff_check(&g, &p, &x, Label::Class(0), 1e-2).is_err());
    }
}
