//! The four named model variants, confidence-driven pooling, scale fusion,
//! full-model forward/backward, parameter counting, and checkpoints.
//!
//! A model is a short straight-line program over signal/confidence values:
//! each node reads earlier values and produces one new value. Parameters
//! live in banks; several nodes may point at the same bank, which is how
//! the multi-scale variant shares one filter set across scales — and why
//! the backward pass accumulates into banks rather than nodes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NcError, Result};
use crate::nconv::{nconv_backward, nconv_forward, LayerCache, NConvLayer};
use crate::rng::SeededRng;
use crate::tensor::{SignalPair, Tensor4, WeightBank};

pub const NCM1_MAGIC: [u8; 4] = *b"NCM1";

/// The model variants this crate knows how to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Six-layer single-scale stack, 16 feature channels.
    #[serde(rename = "one-scale-16")]
    OneScale16,
    /// Same stack with 4 feature channels.
    #[serde(rename = "one-scale-4")]
    OneScale4,
    /// Hierarchical multi-scale network with shared filters and
    /// confidence-aware fusion.
    #[serde(rename = "hms")]
    Hms,
    /// Ablation of [`Variant::Hms`]: scale fusion by a standard
    /// (unconstrained, confidence-blind) convolution.
    #[serde(rename = "sf-std")]
    SfStd,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::OneScale16 => "one-scale-16",
            Variant::OneScale4 => "one-scale-4",
            Variant::Hms => "hms",
            Variant::SfStd => "sf-std",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "one-scale-16" => Ok(Variant::OneScale16),
            "one-scale-4" => Ok(Variant::OneScale4),
            "hms" => Ok(Variant::Hms),
            "sf-std" => Ok(Variant::SfStd),
            other => Err(NcError::Invalid(format!(
                "unknown variant {other:?}; expected one-scale-16, one-scale-4, hms, or sf-std"
            ))),
        }
    }

    /// Input spatial dims must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        match self {
            Variant::Hms | Variant::SfStd => 4,
            _ => 1,
        }
    }
}

/// Everything needed to build a model deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub epsilon: f64,
    pub seed: u64,
}

/// One parameter bank; nodes reference banks by index.
#[derive(Debug, Clone)]
pub struct ParamBank {
    pub name: String,
    pub params: BankParams,
}

#[derive(Debug, Clone)]
pub enum BankParams {
    NConv(NConvLayer),
    StdConv { weights: WeightBank, bias: Vec<f64> },
}

impl ParamBank {
    pub fn param_count(&self) -> usize {
        match &self.params {
            BankParams::NConv(l) => l.param_count(),
            BankParams::StdConv { weights, bias } => weights.len() + bias.len(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match &self.params {
            BankParams::NConv(_) => "nconv",
            BankParams::StdConv { .. } => "conv",
        }
    }

    pub fn weight_shape(&self) -> (usize, usize, usize, usize) {
        match &self.params {
            BankParams::NConv(l) => l.weights.shape(),
            BankParams::StdConv { weights, .. } => weights.shape(),
        }
    }

    fn nconv(&self) -> &NConvLayer {
        match &self.params {
            BankParams::NConv(l) => l,
            BankParams::StdConv { .. } => panic!("bank holds a standard convolution"),
        }
    }
}

/// One step of the model program. `input`/`a`/`b` are value ids: value 0
/// is the model input, node `k` produces value `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Node {
    NConv { bank: usize, input: usize },
    StdConvFuse { bank: usize, input: usize },
    ConfMaxPool { factor: usize, input: usize },
    Unpool { factor: usize, input: usize },
    Concat { a: usize, b: usize },
}

/// An ordered layer graph plus its parameter store.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    banks: Vec<ParamBank>,
    nodes: Vec<Node>,
}

/// Argmax indices captured by confidence max-pooling, used to route both
/// the data selection and the backward pass.
#[derive(Debug, Clone)]
pub struct PoolRecord {
    factor: usize,
    /// Flat source offset (si * w + sj) inside each input plane, one entry
    /// per output cell in (n, c, oh, ow) row-major order.
    indices: Vec<usize>,
}

impl PoolRecord {
    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Confidence-driven max pooling over non-overlapping `s x s` windows.
///
/// Per window and channel the most confident cell wins (ties to the
/// smallest row-major index); the data value is selected by the same
/// index, and the pooled confidence is divided by the scaling Jacobian
/// `s^2` so absolute confidence stays comparable across scales.
pub fn conf_maxpool(z: &Tensor4, c: &Tensor4, s: usize) -> Result<(Tensor4, Tensor4, PoolRecord)> {
    if s < 2 {
        return Err(NcError::Invalid(format!("pooling factor must be >= 2, got {s}")));
    }
    if !z.same_shape(c) {
        return Err(NcError::Shape(format!(
            "conf_maxpool: data {:?} vs confidence {:?}",
            z.shape(),
            c.shape()
        )));
    }
    let (n, ch, h, w) = z.shape();
    if h % s != 0 || w % s != 0 {
        return Err(NcError::Shape(format!(
            "conf_maxpool: {h}x{w} not divisible by window {s}"
        )));
    }
    let (oh, ow) = (h / s, w / s);
    let jacobian = (s * s) as f64;
    let mut zp = Tensor4::zeros(n, ch, oh, ow)?;
    let mut cp = Tensor4::zeros(n, ch, oh, ow)?;
    let mut indices = Vec::with_capacity(n * ch * oh * ow);
    for b in 0..n {
        for ci in 0..ch {
            let zin = z.plane(b, ci);
            let cin = c.plane(b, ci);
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = usize::MAX;
                    let mut best_c = f64::NEG_INFINITY;
                    for di in 0..s {
                        let row = (oi * s + di) * w + oj * s;
                        for dj in 0..s {
                            if cin[row + dj] > best_c {
                                best_c = cin[row + dj];
                                best = row + dj;
                            }
                        }
                    }
                    zp.set(b, ci, oi, oj, zin[best]);
                    cp.set(b, ci, oi, oj, best_c / jacobian);
                    indices.push(best);
                }
            }
        }
    }
    Ok((zp, cp, PoolRecord { factor: s, indices }))
}

/// Upsample a pooled pair back to a finer scale: nearest-neighbor on the
/// data, and the confidence multiplied by `s^2` (inverting the pooling
/// Jacobian) then clamped to 1 so the [0, 1] contract survives.
pub fn conf_unpool_upsample(z: &Tensor4, c: &Tensor4, s: usize) -> Result<(Tensor4, Tensor4)> {
    if s < 2 {
        return Err(NcError::Invalid(format!("unpool factor must be >= 2, got {s}")));
    }
    if !z.same_shape(c) {
        return Err(NcError::Shape(format!(
            "conf_unpool_upsample: data {:?} vs confidence {:?}",
            z.shape(),
            c.shape()
        )));
    }
    let zu = z.upsample_nearest(s)?;
    let mut cu = c.upsample_nearest(s)?;
    let jacobian = (s * s) as f64;
    for v in cu.values_mut() {
        *v = (*v * jacobian).min(1.0);
    }
    Ok((zu, cu))
}

/// Build one of the named variants with seeded initialization:
/// raw nconv weights uniform in [-1, 1], biases zero, and standard-conv
/// fusion weights uniform in ±1/sqrt(fan-in).
pub fn build_model(spec: ModelSpec) -> Result<Model> {
    if spec.epsilon.is_nan() || spec.epsilon < 0.0 {
        return Err(NcError::Invalid(format!("epsilon must be >= 0, got {}", spec.epsilon)));
    }
    let mut rng = SeededRng::new(spec.seed);
    let (banks, nodes) = match spec.variant {
        Variant::OneScale16 => build_one_scale(16, spec.epsilon, &mut rng)?,
        Variant::OneScale4 => build_one_scale(4, spec.epsilon, &mut rng)?,
        Variant::Hms => build_multi_scale(spec.epsilon, false, &mut rng)?,
        Variant::SfStd => build_multi_scale(spec.epsilon, true, &mut rng)?,
    };
    Ok(Model { spec, banks, nodes })
}

fn build_one_scale(width: usize, eps: f64, rng: &mut SeededRng) -> Result<(Vec<ParamBank>, Vec<Node>)> {
    let plan: [(usize, usize, usize); 6] = [
        (1, width, 11),
        (width, width, 7),
        (width, width, 5),
        (width, width, 3),
        (width, width, 3),
        (width, 1, 1),
    ];
    let mut banks = Vec::new();
    let mut nodes = Vec::new();
    for (idx, &(ic, oc, k)) in plan.iter().enumerate() {
        banks.push(ParamBank {
            name: format!("nconv{}", idx + 1),
            params: BankParams::NConv(NConvLayer::new_seeded(ic, oc, k, k, eps, rng)?),
        });
        nodes.push(Node::NConv { bank: idx, input: idx });
    }
    Ok((banks, nodes))
}

fn build_multi_scale(
    eps: f64,
    std_fusion: bool,
    rng: &mut SeededRng,
) -> Result<(Vec<ParamBank>, Vec<Node>)> {
    let encoder1 = ParamBank {
        name: "encoder1".into(),
        params: BankParams::NConv(NConvLayer::new_seeded(1, 4, 5, 5, eps, rng)?),
    };
    let encoder2 = ParamBank {
        name: "encoder2".into(),
        params: BankParams::NConv(NConvLayer::new_seeded(4, 4, 3, 3, eps, rng)?),
    };
    let fusion = if std_fusion {
        let fan_in = 8 * 3 * 3;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut weights = WeightBank::zeros(4, 8, 3, 3)?;
        for v in weights.values_mut() {
            *v = rng.uniform(-bound, bound);
        }
        ParamBank {
            name: "fusion".into(),
            params: BankParams::StdConv {
                weights,
                bias: vec![0.0; 4],
            },
        }
    } else {
        ParamBank {
            name: "fusion".into(),
            params: BankParams::NConv(NConvLayer::new_seeded(8, 4, 3, 3, eps, rng)?),
        }
    };
    let merge = ParamBank {
        name: "merge".into(),
        params: BankParams::NConv(NConvLayer::new_seeded(4, 1, 1, 1, eps, rng)?),
    };
    let banks = vec![encoder1, encoder2, fusion, merge];

    let fuse = |bank: usize, input: usize| {
        if std_fusion {
            Node::StdConvFuse { bank, input }
        } else {
            Node::NConv { bank, input }
        }
    };
    // value 0 is the input; node k yields value k + 1
    let nodes = vec![
        Node::NConv { bank: 0, input: 0 },      // v1: encoder1 at full scale
        Node::NConv { bank: 1, input: 1 },      // v2: full-scale features
        Node::ConfMaxPool { factor: 2, input: 2 }, // v3
        Node::NConv { bank: 1, input: 3 },      // v4: half-scale features (shared)
        Node::ConfMaxPool { factor: 2, input: 4 }, // v5
        Node::NConv { bank: 1, input: 5 },      // v6: quarter-scale features (shared)
        Node::Unpool { factor: 2, input: 6 },   // v7
        Node::Concat { a: 7, b: 4 },            // v8: [upsampled quarter | half]
        fuse(2, 8),                             // v9: fused half scale
        Node::Unpool { factor: 2, input: 9 },   // v10
        Node::Concat { a: 10, b: 2 },           // v11: [upsampled half | full]
        fuse(2, 11),                            // v12: fused full scale (shared fusion)
        Node::NConv { bank: 3, input: 12 },     // v13: merge to one channel
    ];
    Ok((banks, nodes))
}

impl Model {
    /// Assemble a model from explicit parts. Used by tests that need
    /// non-standard graphs (e.g. an unshared copy of a shared bank).
    #[cfg(test)]
    pub(crate) fn from_parts(spec: ModelSpec, banks: Vec<ParamBank>, nodes: Vec<Node>) -> Model {
        Model { spec, banks, nodes }
    }

    pub fn spec(&self) -> ModelSpec {
        self.spec
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn banks(&self) -> &[ParamBank] {
        &self.banks
    }

    pub fn banks_mut(&mut self) -> &mut [ParamBank] {
        &mut self.banks
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    /// Total trainable scalars; shared banks count once.
    pub fn count_params(&self) -> usize {
        self.banks.iter().map(|b| b.param_count()).sum()
    }

    /// All parameters flattened in bank order (weights then bias per bank).
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.count_params());
        for bank in &self.banks {
            match &bank.params {
                BankParams::NConv(l) => {
                    out.extend_from_slice(l.weights.values());
                    out.extend_from_slice(&l.bias);
                }
                BankParams::StdConv { weights, bias } => {
                    out.extend_from_slice(weights.values());
                    out.extend_from_slice(bias);
                }
            }
        }
        out
    }

    pub fn set_param_vector(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.count_params() {
            return Err(NcError::Shape(format!(
                "parameter vector has {} entries, model has {}",
                params.len(),
                self.count_params()
            )));
        }
        let mut at = 0;
        for bank in &mut self.banks {
            match &mut bank.params {
                BankParams::NConv(l) => {
                    let wn = l.weights.len();
                    l.weights.values_mut().copy_from_slice(&params[at..at + wn]);
                    at += wn;
                    let bn = l.bias.len();
                    l.bias.copy_from_slice(&params[at..at + bn]);
                    at += bn;
                }
                BankParams::StdConv { weights, bias } => {
                    let wn = weights.len();
                    weights.values_mut().copy_from_slice(&params[at..at + wn]);
                    at += wn;
                    let bn = bias.len();
                    bias.copy_from_slice(&params[at..at + bn]);
                    at += bn;
                }
            }
        }
        Ok(())
    }
}

enum NodeCache {
    NConv(Box<LayerCache>),
    StdConv,
    Pool(PoolRecord),
    Unpool,
    Concat { a_ch: usize },
}

/// Every intermediate value and per-node cache from one forward call.
pub struct ModelCache {
    values: Vec<SignalPair>,
    node_caches: Vec<NodeCache>,
}

impl ModelCache {
    /// Intermediate value `id` (0 = model input, k+1 = output of node k).
    pub fn value(&self, id: usize) -> &SignalPair {
        &self.values[id]
    }

    pub fn output(&self) -> &SignalPair {
        self.values.last().expect("cache holds at least the input")
    }
}

/// Run the model on a single-channel signal/confidence pair.
pub fn model_forward(model: &Model, input: &SignalPair) -> Result<(SignalPair, ModelCache)> {
    let (_, ch, h, w) = input.shape();
    if ch != 1 {
        return Err(NcError::Shape(format!("model input must be single-channel, got {ch}")));
    }
    let mult = model.variant().size_multiple();
    if h % mult != 0 || w % mult != 0 {
        return Err(NcError::Shape(format!(
            "variant {} needs spatial dims divisible by {mult}, got {h}x{w}",
            model.variant().name()
        )));
    }
    if let Some(&c) = input.conf.values().iter().find(|&&c| !(0.0..=1.0).contains(&c)) {
        return Err(NcError::Invalid(format!("input confidence {c} outside [0, 1]")));
    }

    let mut values: Vec<SignalPair> = Vec::with_capacity(model.nodes.len() + 1);
    let mut node_caches: Vec<NodeCache> = Vec::with_capacity(model.nodes.len());
    values.push(input.clone());

    for node in &model.nodes {
        let (out, cache) = match *node {
            Node::NConv { bank, input } => {
                let v = &values[input];
                let (out, cache) = nconv_forward(&v.data, &v.conf, model.banks[bank].nconv())?;
                (out, NodeCache::NConv(Box::new(cache)))
            }
            Node::StdConvFuse { bank, input } => {
                let v = &values[input];
                let (weights, bias) = match &model.banks[bank].params {
                    BankParams::StdConv { weights, bias } => (weights, bias),
                    BankParams::NConv(_) => {
                        return Err(NcError::Invalid(
                            "std-conv node points at a normalized-conv bank".into(),
                        ))
                    }
                };
                (std_conv_fuse_forward(v, weights, bias)?, NodeCache::StdConv)
            }
            Node::ConfMaxPool { factor, input } => {
                let v = &values[input];
                let (z, c, rec) = conf_maxpool(&v.data, &v.conf, factor)?;
                (SignalPair::new(z, c)?, NodeCache::Pool(rec))
            }
            Node::Unpool { factor, input } => {
                let v = &values[input];
                let (z, c) = conf_unpool_upsample(&v.data, &v.conf, factor)?;
                (SignalPair::new(z, c)?, NodeCache::Unpool)
            }
            Node::Concat { a, b } => {
                let (va, vb) = (&values[a], &values[b]);
                let z = Tensor4::concat_channels(&va.data, &vb.data)?;
                let c = Tensor4::concat_channels(&va.conf, &vb.conf)?;
                (
                    SignalPair::new(z, c)?,
                    NodeCache::Concat {
                        a_ch: va.data.channels(),
                    },
                )
            }
        };
        values.push(out);
        node_caches.push(cache);
    }

    let output = values.last().unwrap().clone();
    Ok((output, ModelCache { values, node_caches }))
}

/// [`model_forward`] for inputs whose spatial dims may not satisfy the
/// variant's divisibility requirement: pads bottom/right with zero data
/// and zero confidence (which the normalized operators ignore), runs the
/// model, and crops the output back. No cache is returned; this is the
/// inference entry point.
pub fn model_forward_padded(model: &Model, input: &SignalPair) -> Result<SignalPair> {
    let (n, ch, h, w) = input.shape();
    let mult = model.variant().size_multiple();
    if h % mult == 0 && w % mult == 0 {
        return Ok(model_forward(model, input)?.0);
    }
    let hp = h.div_ceil(mult) * mult;
    let wp = w.div_ceil(mult) * mult;
    let mut z = Tensor4::zeros(n, ch, hp, wp)?;
    let mut c = Tensor4::zeros(n, ch, hp, wp)?;
    for b in 0..n {
        for ci in 0..ch {
            for i in 0..h {
                let src = input.data.idx(b, ci, i, 0);
                let zdst = z.idx(b, ci, i, 0);
                z.values_mut()[zdst..zdst + w]
                    .copy_from_slice(&input.data.values()[src..src + w]);
                c.values_mut()[zdst..zdst + w]
                    .copy_from_slice(&input.conf.values()[src..src + w]);
            }
        }
    }
    let (out, _) = model_forward(model, &SignalPair::new(z, c)?)?;
    SignalPair::new(out.data.crop_spatial(h, w)?, out.conf.crop_spatial(h, w)?)
}

/// Standard convolution fusion (the ablation): data ignores confidence,
/// and the fused confidence is the arithmetic mean of the two concatenated
/// groups (a plain conv defines no confidence semantics of its own).
#[allow(clippy::needless_range_loop)]
fn std_conv_fuse_forward(v: &SignalPair, weights: &WeightBank, bias: &[f64]) -> Result<SignalPair> {
    let out_ch = weights.out_ch;
    if weights.in_ch != 2 * out_ch {
        return Err(NcError::Shape(format!(
            "std-conv fusion expects in_ch = 2 * out_ch, got {} vs {}",
            weights.in_ch, out_ch
        )));
    }
    let mut z = v.data.correlate2d_same(weights)?;
    let (n, _, h, w) = z.shape();
    for b in 0..n {
        for o in 0..out_ch {
            let base = z.idx(b, o, 0, 0);
            for k in base..base + h * w {
                z.values_mut()[k] += bias[o];
            }
        }
    }
    let up = v.conf.slice_channels(0, out_ch)?;
    let fine = v.conf.slice_channels(out_ch, out_ch)?;
    let c = up.add(&fine)?.scale(0.5);
    SignalPair::new(z, c)
}

#[allow(clippy::needless_range_loop)]
fn std_conv_fuse_backward(
    grad_z: &Tensor4,
    grad_c: &Tensor4,
    v_in: &SignalPair,
    weights: &WeightBank,
) -> Result<(Tensor4, Tensor4, WeightBank, Vec<f64>)> {
    let (n, in_ch, h, w) = v_in.shape();
    let out_ch = weights.out_ch;
    let (kh, kw) = (weights.kh, weights.kw);
    let (ph, pw) = (kh / 2, kw / 2);

    let mut grad_in_z = Tensor4::zeros(n, in_ch, h, w)?;
    let mut grad_in_c = Tensor4::zeros(n, in_ch, h, w)?;
    let mut grad_w = WeightBank::zeros(out_ch, in_ch, kh, kw)?;
    let mut grad_b = vec![0.0; out_ch];

    for b in 0..n {
        for o in 0..out_ch {
            let gz = grad_z.plane(b, o);
            grad_b[o] += gz.iter().sum::<f64>();
            for ci in 0..in_ch {
                let zin = v_in.data.plane(b, ci);
                let in_base = (b * in_ch + ci) * h * w;
                for m in 0..kh {
                    let i_lo = ph.saturating_sub(m);
                    let i_hi = (h + ph).saturating_sub(m).min(h);
                    for nk in 0..kw {
                        let wv = weights.get(o, ci, m, nk);
                        let j_lo = pw.saturating_sub(nk);
                        let j_hi = (w + pw).saturating_sub(nk).min(w);
                        let mut acc_w = 0.0;
                        for i in i_lo..i_hi {
                            let src = (i + m - ph) * w;
                            let dst = i * w;
                            for j in j_lo..j_hi {
                                let sj = j + nk - pw;
                                let g = gz[dst + j];
                                acc_w += g * zin[src + sj];
                                grad_in_z.values_mut()[in_base + src + sj] += g * wv;
                            }
                        }
                        let k = grad_w.idx(o, ci, m, nk);
                        grad_w.values_mut()[k] += acc_w;
                    }
                }
            }
            // fused confidence = (up + fine) / 2, channel o from channels
            // o and o + out_ch of the concatenated input
            let gc = grad_c.plane(b, o);
            for (half, ci) in [(0usize, o), (1, o + out_ch)] {
                let _ = half;
                let in_base = (b * in_ch + ci) * h * w;
                for (k, &g) in gc.iter().enumerate() {
                    grad_in_c.values_mut()[in_base + k] += 0.5 * g;
                }
            }
        }
    }
    Ok((grad_in_z, grad_in_c, grad_w, grad_b))
}

/// Per-bank gradients, same shapes as the bank parameters.
#[derive(Debug, Clone)]
pub struct BankGrad {
    pub weights: WeightBank,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub banks: Vec<BankGrad>,
}

impl ModelGrads {
    fn zeros_like(model: &Model) -> Result<ModelGrads> {
        let banks = model
            .banks
            .iter()
            .map(|b| {
                let (o, i, kh, kw) = b.weight_shape();
                Ok(BankGrad {
                    weights: WeightBank::zeros(o, i, kh, kw)?,
                    bias: vec![0.0; o],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelGrads { banks })
    }

    /// Flatten in the same order as [`Model::param_vector`].
    pub fn to_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for b in &self.banks {
            out.extend_from_slice(b.weights.values());
            out.extend_from_slice(&b.bias);
        }
        out
    }
}

/// Backward pass over the whole graph. Shared banks accumulate gradients
/// from every node that uses them.
pub fn model_backward(
    model: &Model,
    cache: &ModelCache,
    grad_z_out: &Tensor4,
    grad_c_out: &Tensor4,
) -> Result<ModelGrads> {
    if cache.values.len() != model.nodes.len() + 1 || cache.node_caches.len() != model.nodes.len() {
        return Err(NcError::Shape(
            "cache does not belong to this model (node count mismatch)".into(),
        ));
    }
    let out_shape = cache.output().shape();
    if grad_z_out.shape() != out_shape || grad_c_out.shape() != out_shape {
        return Err(NcError::Shape(format!(
            "output gradients {:?}/{:?} do not match model output {:?}",
            grad_z_out.shape(),
            grad_c_out.shape(),
            out_shape
        )));
    }

    let mut grads = ModelGrads::zeros_like(model)?;
    // accumulated (dL/dz, dL/dc) per value id; None = no influence yet
    let mut value_grads: Vec<Option<(Tensor4, Tensor4)>> = vec![None; cache.values.len()];
    *value_grads.last_mut().unwrap() = Some((grad_z_out.clone(), grad_c_out.clone()));

    let add_into = |slot: &mut Option<(Tensor4, Tensor4)>, gz: Tensor4, gc: Tensor4| -> Result<()> {
        match slot {
            None => *slot = Some((gz, gc)),
            Some((az, ac)) => {
                *az = az.add(&gz)?;
                *ac = ac.add(&gc)?;
            }
        }
        Ok(())
    };

    for (k, node) in model.nodes.iter().enumerate().rev() {
        let out_grad = match value_grads[k + 1].take() {
            Some(g) => g,
            None => continue,
        };
        let (gz, gc) = &out_grad;
        match (*node, &cache.node_caches[k]) {
            (Node::NConv { bank, input }, NodeCache::NConv(lc)) => {
                let layer = model.banks[bank].nconv();
                let g = nconv_backward(gz, gc, lc, layer)?;
                let bg = &mut grads.banks[bank];
                for (acc, v) in bg.weights.values_mut().iter_mut().zip(g.w_raw.values()) {
                    *acc += v;
                }
                for (acc, v) in bg.bias.iter_mut().zip(&g.bias) {
                    *acc += v;
                }
                add_into(&mut value_grads[input], g.z_prev, g.c_prev)?;
            }
            (Node::StdConvFuse { bank, input }, NodeCache::StdConv) => {
                let weights = match &model.banks[bank].params {
                    BankParams::StdConv { weights, .. } => weights,
                    BankParams::NConv(_) => {
                        return Err(NcError::Invalid("std-conv node on nconv bank".into()))
                    }
                };
                let (giz, gic, gw, gb) =
                    std_conv_fuse_backward(gz, gc, &cache.values[input], weights)?;
                let bg = &mut grads.banks[bank];
                for (acc, v) in bg.weights.values_mut().iter_mut().zip(gw.values()) {
                    *acc += v;
                }
                for (acc, v) in bg.bias.iter_mut().zip(&gb) {
                    *acc += v;
                }
                add_into(&mut value_grads[input], giz, gic)?;
            }
            (Node::ConfMaxPool { factor, input }, NodeCache::Pool(rec)) => {
                let vin = &cache.values[input];
                let (n, ch, h, w) = vin.shape();
                let mut giz = Tensor4::zeros(n, ch, h, w)?;
                let mut gic = Tensor4::zeros(n, ch, h, w)?;
                let jacobian = (factor * factor) as f64;
                let (oh, ow) = (h / factor, w / factor);
                let mut it = rec.indices.iter();
                for b in 0..n {
                    for ci in 0..ch {
                        let plane = (b * ch + ci) * h * w;
                        let gz_p = gz.plane(b, ci);
                        let gc_p = gc.plane(b, ci);
                        for cell in 0..oh * ow {
                            let src = *it.next().expect("pool record length");
                            giz.values_mut()[plane + src] += gz_p[cell];
                            gic.values_mut()[plane + src] += gc_p[cell] / jacobian;
                        }
                    }
                }
                add_into(&mut value_grads[input], giz, gic)?;
            }
            (Node::Unpool { factor, input }, NodeCache::Unpool) => {
                let vin = &cache.values[input];
                let (n, ch, h, w) = vin.shape();
                let mut giz = Tensor4::zeros(n, ch, h, w)?;
                let mut gic = Tensor4::zeros(n, ch, h, w)?;
                let jacobian = (factor * factor) as f64;
                for b in 0..n {
                    for ci in 0..ch {
                        for i in 0..h {
                            for j in 0..w {
                                let mut sz = 0.0;
                                let mut sc = 0.0;
                                for di in 0..factor {
                                    for dj in 0..factor {
                                        sz += gz.get(b, ci, i * factor + di, j * factor + dj);
                                        sc += gc.get(b, ci, i * factor + di, j * factor + dj);
                                    }
                                }
                                giz.set(b, ci, i, j, sz);
                                // clamp at 1 blocks the gradient once the
                                // rescaled confidence saturates
                                let pass = vin.conf.get(b, ci, i, j) * jacobian < 1.0;
                                gic.set(b, ci, i, j, if pass { jacobian * sc } else { 0.0 });
                            }
                        }
                    }
                }
                add_into(&mut value_grads[input], giz, gic)?;
            }
            (Node::Concat { a, b }, NodeCache::Concat { a_ch }) => {
                let gz_a = gz.slice_channels(0, *a_ch)?;
                let gc_a = gc.slice_channels(0, *a_ch)?;
                let rest = gz.channels() - a_ch;
                let gz_b = gz.slice_channels(*a_ch, rest)?;
                let gc_b = gc.slice_channels(*a_ch, rest)?;
                add_into(&mut value_grads[a], gz_a, gc_a)?;
                add_into(&mut value_grads[b], gz_b, gc_b)?;
            }
            _ => {
                return Err(NcError::Shape(
                    "cache node kind does not match model node (stale cache?)".into(),
                ))
            }
        }
    }
    Ok(grads)
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    variant: Variant,
    epsilon: f64,
    seed: u64,
    banks: Vec<BankManifest>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct BankManifest {
    name: String,
    kind: String,
    out_ch: usize,
    in_ch: usize,
    kh: usize,
    kw: usize,
}

fn bank_manifest(model: &Model) -> Vec<BankManifest> {
    model
        .banks
        .iter()
        .map(|b| {
            let (o, i, kh, kw) = b.weight_shape();
            BankManifest {
                name: b.name.clone(),
                kind: b.kind().into(),
                out_ch: o,
                in_ch: i,
                kh,
                kw,
            }
        })
        .collect()
}

/// Serialize a model: `NCM1` magic, a JSON header (variant, epsilon, seed,
/// bank manifest), then one `NCT1` weight block and one `NCT1` bias block
/// per bank, in bank order.
pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    let header = CheckpointHeader {
        format: "NCM1".into(),
        version: 1,
        variant: model.spec.variant,
        epsilon: model.spec.epsilon,
        seed: model.spec.seed,
        banks: bank_manifest(model),
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| NcError::Format(format!("checkpoint header: {e}")))?;
    let io = |e: std::io::Error| NcError::Format(format!("checkpoint write: {e}"));
    w.write_all(&NCM1_MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for bank in &model.banks {
        let (weights, bias) = match &bank.params {
            BankParams::NConv(l) => (&l.weights, &l.bias),
            BankParams::StdConv { weights, bias } => (weights, bias),
        };
        weights.write_nct1(w).map_err(io)?;
        let bias_t = Tensor4::from_vec(bias.len(), 1, 1, 1, bias.clone())?;
        bias_t.write_nct1(w).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| NcError::Format(format!("checkpoint magic: {e}")))?;
    if magic != NCM1_MAGIC {
        return Err(NcError::Format(format!(
            "bad checkpoint magic {magic:?}, expected \"NCM1\""
        )));
    }
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)
        .map_err(|e| NcError::Format(format!("checkpoint header length: {e}")))?;
    let len = u32::from_le_bytes(len_buf) as usize;
    if len > (1 << 24) {
        return Err(NcError::Format(format!("unreasonable header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|e| NcError::Format(format!("checkpoint header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| NcError::Format(format!("checkpoint header json: {e}")))?;
    if header.format != "NCM1" || header.version != 1 {
        return Err(NcError::Format(format!(
            "unsupported checkpoint format {}/{}",
            header.format, header.version
        )));
    }

    let mut model = build_model(ModelSpec {
        variant: header.variant,
        epsilon: header.epsilon,
        seed: header.seed,
    })?;
    let expected = bank_manifest(&model);
    if expected != header.banks {
        return Err(NcError::Format(
            "checkpoint bank manifest does not match its declared variant".into(),
        ));
    }
    for bank in &mut model.banks {
        let weights = WeightBank::read_nct1(r)?;
        let bias_t = Tensor4::read_nct1(r)?;
        let (o, i, kh, kw) = bank.weight_shape();
        if weights.shape() != (o, i, kh, kw) || bias_t.len() != o {
            return Err(NcError::Format(format!(
                "checkpoint block for bank {} has wrong shape",
                bank.name
            )));
        }
        let bias = bias_t.values().to_vec();
        match &mut bank.params {
            BankParams::NConv(l) => {
                l.weights = weights;
                l.bias = bias;
            }
            BankParams::StdConv { weights: w0, bias: b0 } => {
                *w0 = weights;
                *b0 = bias;
            }
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| NcError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush().map_err(|e| NcError::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(|e| NcError::io(path, e))?;
    read_checkpoint(&mut BufReader::new(file))
}
