//! A small dense network with batch/layer/group normalization.
//!
//! Models are described by a [`ModelSpec`]; parameters live in a [`ParamSet`]
//! keyed `l{index:02}.{kind}.{param}`, e.g. `l01.bn.run_mean`.

pub mod norm;
pub mod optim;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamMeta, ParamRole, ParamSet};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

use norm::{norm_backward, norm_forward, NormCache, NormKind, RunningStats};

pub use norm::{DEFAULT_BN_MOMENTUM, DEFAULT_NORM_EPSILON};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

fn default_epsilon() -> f64 {
    DEFAULT_NORM_EPSILON
}

fn default_momentum() -> f64 {
    DEFAULT_BN_MOMENTUM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        width: usize,
    },
    BatchNorm {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    LayerNorm {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    GroupNorm {
        groups: usize,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    Relu,
    SoftmaxCeHead,
    SigmoidBceHead,
}

impl LayerSpec {
    fn is_head(&self) -> bool {
        matches!(self, LayerSpec::SoftmaxCeHead | LayerSpec::SigmoidBceHead)
    }

    fn norm(&self) -> Option<(NormKind, f64, &'static str)> {
        match *self {
            LayerSpec::BatchNorm { epsilon, momentum } => {
                Some((NormKind::Batch { momentum }, epsilon, "bn"))
            }
            LayerSpec::LayerNorm { epsilon } => Some((NormKind::Layer, epsilon, "ln")),
            LayerSpec::GroupNorm { groups, epsilon } => {
                Some((NormKind::Group { groups }, epsilon, "gn"))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    BinaryCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub loss: LossKind,
    pub num_classes: usize,
}

pub fn dense_name(layer: usize, param: &str) -> String {
    format!("l{layer:02}.dense.{param}")
}

pub fn norm_name(layer: usize, short: &str, param: &str) -> String {
    format!("l{layer:02}.{short}.{param}")
}

impl ModelSpec {
    /// Checks layer consistency; returns the activation width after each layer.
    pub fn validate(&self) -> Result<Vec<usize>> {
        let field = |i: usize, f: &str| format!("model.layers[{i}].{f}");
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("model.num_classes", "must be positive"));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::config("model.layers", "must not be empty"));
        };
        if !last.is_head() {
            return Err(Error::config("model.layers", "last layer must be a head"));
        }
        let mut widths = Vec::with_capacity(self.layers.len());
        let mut w = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Dense { width } => {
                    if width == 0 {
                        return Err(Error::config(field(i, "width"), "must be positive"));
                    }
                    w = width;
                }
                LayerSpec::BatchNorm { epsilon, momentum } => {
                    if !(epsilon > 0.0) {
                        return Err(Error::config(field(i, "epsilon"), "must be > 0"));
                    }
                    if !(momentum > 0.0 && momentum <= 1.0) {
                        return Err(Error::config(field(i, "momentum"), "must lie in (0, 1]"));
                    }
                }
                LayerSpec::LayerNorm { epsilon } => {
                    if !(epsilon > 0.0) {
                        return Err(Error::config(field(i, "epsilon"), "must be > 0"));
                    }
                }
                LayerSpec::GroupNorm { groups, epsilon } => {
                    if !(epsilon > 0.0) {
                        return Err(Error::config(field(i, "epsilon"), "must be > 0"));
                    }
                    if groups == 0 || !w.is_multiple_of(groups) {
                        return Err(Error::config(
                            field(i, "groups"),
                            format!("{groups} groups must divide width {w}"),
                        ));
                    }
                }
                LayerSpec::Relu => {}
                LayerSpec::SoftmaxCeHead | LayerSpec::SigmoidBceHead => {
                    if i + 1 != self.layers.len() {
                        return Err(Error::config(
                            field(i, "kind"),
                            "head must be the last layer",
                        ));
                    }
                }
            }
            widths.push(w);
        }
        match last {
            LayerSpec::SoftmaxCeHead => {
                if self.loss != LossKind::CrossEntropy {
                    return Err(Error::config(
                        "model.loss",
                        "softmax head needs cross_entropy",
                    ));
                }
                if self.num_classes < 2 {
                    return Err(Error::config(
                        "model.num_classes",
                        "softmax head needs >= 2 classes",
                    ));
                }
                if w != self.num_classes {
                    return Err(Error::config(
                        "model.layers",
                        format!("head input width {w} != num_classes {}", self.num_classes),
                    ));
                }
            }
            _ => {
                if self.loss != LossKind::BinaryCrossEntropy {
                    return Err(Error::config(
                        "model.loss",
                        "sigmoid head needs binary_cross_entropy",
                    ));
                }
                if w != self.num_classes && !(w == 1 && self.num_classes == 2) {
                    return Err(Error::config(
                        "model.layers",
                        format!(
                            "head input width {w} must equal num_classes {} (or 1 for binary)",
                            self.num_classes
                        ),
                    ));
                }
            }
        }
        Ok(widths)
    }

    /// Deterministic parameter layout with Glorot-uniform dense weights, zero
    /// biases, unit gains and fresh running statistics.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        self.build_params(|fan_in, fan_out| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.random_range(-limit..limit)
        })
    }

    /// Same layout as [`Self::init_params`] with all dense weights zero.
    pub fn zero_params(&self) -> Result<ParamSet> {
        self.build_params(|_, _| 0.0)
    }

    fn build_params(&self, mut weight: impl FnMut(usize, usize) -> f64) -> Result<ParamSet> {
        let widths = self.validate()?;
        let mut params = ParamSet::new();
        let mut w_in = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Dense { width } => {
                    let data = (0..w_in * width).map(|_| weight(w_in, *width)).collect();
                    params.insert(
                        dense_name(i, "weight"),
                        Tensor::new(vec![w_in, *width], data)?,
                        ParamMeta::dense(ParamRole::Weight),
                    );
                    params.insert(
                        dense_name(i, "bias"),
                        Tensor::zeros(vec![*width]),
                        ParamMeta::dense(ParamRole::Bias),
                    );
                }
                l => {
                    if let Some((kind, _, short)) = l.norm() {
                        let bn = matches!(kind, NormKind::Batch { .. });
                        let w = widths[i];
                        params.insert(
                            norm_name(i, short, "gain"),
                            Tensor::filled(vec![w], 1.0),
                            ParamMeta::norm(ParamRole::Gain, bn),
                        );
                        params.insert(
                            norm_name(i, short, "bias"),
                            Tensor::zeros(vec![w]),
                            ParamMeta::norm(ParamRole::Shift, bn),
                        );
                        if bn {
                            params.insert(
                                norm_name(i, short, "run_mean"),
                                Tensor::zeros(vec![w]),
                                ParamMeta::norm(ParamRole::RunningMean, true),
                            );
                            params.insert(
                                norm_name(i, short, "run_var"),
                                Tensor::filled(vec![w], 1.0),
                                ParamMeta::norm(ParamRole::RunningVar, true),
                            );
                        }
                    }
                }
            }
            w_in = widths[i];
        }
        Ok(params)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    /// One row of 0/1 targets per example (sigmoid heads only).
    MultiHot(Tensor),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(c) => c.len(),
            Labels::MultiHot(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes(c) => Labels::Classes(idx.iter().map(|&i| c[i]).collect()),
            Labels::MultiHot(t) => Labels::MultiHot(t.select_rows(idx)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Labels,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Labels) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "inputs {:?} vs {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.select(idx),
        }
    }

    /// Class ids, when the labels are single-label.
    pub fn classes(&self) -> Option<&[usize]> {
        match &self.labels {
            Labels::Classes(c) => Some(c),
            Labels::MultiHot(_) => None,
        }
    }
}

enum LayerCache {
    Dense {
        input: Vec<f64>,
        in_dim: usize,
        out_dim: usize,
    },
    Norm(NormCache),
    Relu {
        mask: Vec<bool>,
    },
    Head,
}

/// Everything [`model_backward`] needs from a forward pass.
pub struct ForwardCache {
    fingerprint: u64,
    rows: usize,
    layers: Vec<LayerCache>,
    /// `∂L/∂logits` for the mean loss.
    head_error: Vec<f64>,
}

pub struct ForwardOutput {
    /// Class probabilities (softmax) or per-output probabilities (sigmoid).
    pub predictions: Tensor,
    /// Mean per-example loss.
    pub loss: f64,
    pub cache: ForwardCache,
    /// Updated `(run_mean, run_var)` entries for batch-norm layers (train mode only).
    pub running_stats: Vec<(String, Tensor)>,
}

impl ForwardOutput {
    /// Writes the updated running statistics into `params`.
    pub fn apply_running_stats(&self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in &self.running_stats {
            params.set_tensor(name, t.clone())?;
        }
        Ok(())
    }
}

/// FNV-1a over names and value bits of every entry.
fn fingerprint(params: &ParamSet) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |b: u64| {
        h ^= b;
        h = h.wrapping_mul(0x100000001b3);
    };
    for (name, p) in params.iter() {
        for b in name.bytes() {
            eat(b as u64);
        }
        for v in p.value.data() {
            eat(v.to_bits());
        }
    }
    h
}

fn targets(spec: &ModelSpec, labels: &Labels, rows: usize, width: usize) -> Result<Vec<f64>> {
    let mut y = vec![0.0; rows * width];
    match labels {
        Labels::Classes(c) => {
            for (i, &cls) in c.iter().enumerate() {
                if cls >= spec.num_classes {
                    return Err(Error::ShapeMismatch(format!(
                        "class id {cls} outside [0, {})",
                        spec.num_classes
                    )));
                }
                if width == 1 {
                    y[i] = cls as f64;
                } else {
                    y[i * width + cls] = 1.0;
                }
            }
        }
        Labels::MultiHot(t) => {
            if spec.loss == LossKind::CrossEntropy || t.cols() != width {
                return Err(Error::ShapeMismatch(
                    "multi-hot labels need a sigmoid head of matching width".into(),
                ));
            }
            y.copy_from_slice(t.data());
        }
    }
    Ok(y)
}

fn forward_impl(
    spec: &ModelSpec,
    params: &ParamSet,
    inputs: &Tensor,
    labels: Option<&Labels>,
    mode: Mode,
) -> Result<ForwardOutput> {
    let widths = spec.validate()?;
    if inputs.shape().len() != 2 || inputs.cols() != spec.input_dim {
        return Err(Error::ShapeMismatch(format!(
            "inputs {:?} for input_dim {}",
            inputs.shape(),
            spec.input_dim
        )));
    }
    let rows = inputs.rows();
    if rows == 0 {
        return Err(Error::ShapeMismatch("empty batch".into()));
    }

    let mut act = inputs.data().to_vec();
    let mut w = spec.input_dim;
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut running_stats = Vec::new();
    let mut predictions = Vec::new();
    let mut loss = f64::NAN;
    let mut head_error = Vec::new();

    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Dense { width } => {
                let wt = params.tensor(&dense_name(i, "weight"))?;
                let b = params.tensor(&dense_name(i, "bias"))?;
                if wt.shape() != [w, *width] || b.shape() != [*width] {
                    return Err(Error::ShapeMismatch(format!("dense layer {i}")));
                }
                let mut out = matmul(&act, wt.data(), rows, w, *width);
                for r in 0..rows {
                    for (o, &bv) in out[r * width..(r + 1) * width].iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                let input = std::mem::replace(&mut act, out);
                caches.push(LayerCache::Dense {
                    input,
                    in_dim: w,
                    out_dim: *width,
                });
                w = *width;
            }
            LayerSpec::Relu => {
                let mask: Vec<bool> = act.iter().map(|&v| v > 0.0).collect();
                for (v, &m) in act.iter_mut().zip(&mask) {
                    if !m {
                        *v = 0.0;
                    }
                }
                caches.push(LayerCache::Relu { mask });
            }
            LayerSpec::SoftmaxCeHead | LayerSpec::SigmoidBceHead => {
                let labels_ref = labels;
                let softmax = matches!(layer, LayerSpec::SoftmaxCeHead);
                let mut probs = vec![0.0; rows * w];
                for r in 0..rows {
                    let z = &act[r * w..(r + 1) * w];
                    let p = &mut probs[r * w..(r + 1) * w];
                    if softmax {
                        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut s = 0.0;
                        for (pv, &zv) in p.iter_mut().zip(z) {
                            *pv = (zv - max).exp();
                            s += *pv;
                        }
                        p.iter_mut().for_each(|v| *v /= s);
                    } else {
                        for (pv, &zv) in p.iter_mut().zip(z) {
                            *pv = 1.0 / (1.0 + (-zv).exp());
                        }
                    }
                }
                if let Some(labels) = labels_ref {
                    let y = targets(spec, labels, rows, w)?;
                    let n = rows as f64;
                    let mut total = 0.0;
                    for r in 0..rows {
                        let z = &act[r * w..(r + 1) * w];
                        let t = &y[r * w..(r + 1) * w];
                        let per = if softmax {
                            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                            z.iter().zip(t).map(|(zv, tv)| tv * (lse - zv)).sum::<f64>()
                        } else {
                            z.iter()
                                .zip(t)
                                .map(|(&zv, &tv)| zv.max(0.0) - zv * tv + (-zv.abs()).exp().ln_1p())
                                .sum::<f64>()
                        };
                        total += per;
                    }
                    loss = total / n;
                    head_error = probs.iter().zip(&y).map(|(p, t)| (p - t) / n).collect();
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss(loss));
                    }
                }
                predictions = probs;
                caches.push(LayerCache::Head);
            }
            l => {
                let (kind, eps, short) = l.norm().expect("norm layer");
                let gain = params.tensor(&norm_name(i, short, "gain"))?;
                let shift = params.tensor(&norm_name(i, short, "bias"))?;
                let running = if matches!(kind, NormKind::Batch { .. }) {
                    Some(RunningStats {
                        mean: params
                            .tensor(&norm_name(i, short, "run_mean"))?
                            .data()
                            .to_vec(),
                        var: params
                            .tensor(&norm_name(i, short, "run_var"))?
                            .data()
                            .to_vec(),
                    })
                } else {
                    None
                };
                let x = Tensor::new(vec![rows, w], std::mem::take(&mut act))?;
                let out = norm_forward(
                    kind,
                    &x,
                    gain.data(),
                    shift.data(),
                    running.as_ref(),
                    mode,
                    eps,
                )?;
                if let Some(rs) = out.running {
                    running_stats.push((norm_name(i, short, "run_mean"), Tensor::vector(rs.mean)));
                    running_stats.push((norm_name(i, short, "run_var"), Tensor::vector(rs.var)));
                }
                act = out.y.into_data();
                caches.push(LayerCache::Norm(out.cache));
            }
        }
        debug_assert_eq!(w, widths[i]);
    }

    Ok(ForwardOutput {
        predictions: Tensor::new(vec![rows, w], predictions)?,
        loss,
        cache: ForwardCache {
            fingerprint: fingerprint(params),
            rows,
            layers: caches,
            head_error,
        },
        running_stats,
    })
}

/// Forward pass with loss. Train mode uses batch statistics and reports updated
/// running statistics; eval mode is a pure function of `params` and `batch`.
pub fn model_forward(
    spec: &ModelSpec,
    params: &ParamSet,
    batch: &Batch,
    mode: Mode,
) -> Result<ForwardOutput> {
    forward_impl(spec, params, &batch.inputs, Some(&batch.labels), mode)
}

/// Eval-mode probabilities without labels.
pub fn predict(spec: &ModelSpec, params: &ParamSet, inputs: &Tensor) -> Result<Tensor> {
    Ok(forward_impl(spec, params, inputs, None, Mode::Eval)?.predictions)
}

/// Gradient of the mean loss with respect to every trainable parameter.
pub fn model_backward(
    spec: &ModelSpec,
    params: &ParamSet,
    cache: &ForwardCache,
) -> Result<GradSet> {
    if cache.fingerprint != fingerprint(params) || cache.layers.len() != spec.layers.len() {
        return Err(Error::StaleCache);
    }
    if cache.head_error.is_empty() {
        return Err(Error::StaleCache);
    }
    let rows = cache.rows;
    let mut grads = GradSet::new();
    let mut delta = cache.head_error.clone();
    for (i, (layer, lc)) in spec.layers.iter().zip(&cache.layers).enumerate().rev() {
        match (layer, lc) {
            (_, LayerCache::Head) => {}
            (_, LayerCache::Relu { mask }) => {
                for (d, &m) in delta.iter_mut().zip(mask) {
                    if !m {
                        *d = 0.0;
                    }
                }
            }
            (
                _,
                LayerCache::Dense {
                    input,
                    in_dim,
                    out_dim,
                },
            ) => {
                let (k, m) = (*in_dim, *out_dim);
                let dw = matmul_tn(input, &delta, rows, k, m);
                let mut db = vec![0.0; m];
                for r in 0..rows {
                    for (b, &d) in db.iter_mut().zip(&delta[r * m..(r + 1) * m]) {
                        *b += d;
                    }
                }
                grads.insert(dense_name(i, "weight"), Tensor::new(vec![k, m], dw)?);
                grads.insert(dense_name(i, "bias"), Tensor::vector(db));
                if i > 0 {
                    let wt = params.tensor(&dense_name(i, "weight"))?;
                    delta = matmul_nt(&delta, wt.data(), rows, m, k);
                }
            }
            (l, LayerCache::Norm(nc)) => {
                let (_, _, short) = l.norm().ok_or(Error::StaleCache)?;
                let gain = params.tensor(&norm_name(i, short, "gain"))?;
                let g = norm_backward(nc, gain.data(), &delta);
                grads.insert(norm_name(i, short, "gain"), Tensor::vector(g.dgain));
                grads.insert(norm_name(i, short, "bias"), Tensor::vector(g.dshift));
                delta = g.dx;
            }
        }
    }
    Ok(grads)
}
