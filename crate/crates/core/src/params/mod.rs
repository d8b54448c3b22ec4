//! Parameter containers and the name-aligned arithmetic used by the server.
//!
//! Every entry of a [`ParamSet`] carries a [`NormTag`]. Aggregation policies
//! ([`ExclusionPolicy`]) decide, from those tags and the entry role, which
//! names the server averages and which stay with the client.

mod io;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{read_grads, read_params, write_grads, write_params};

/// Tolerance on the cohort weight sum.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTag {
    Norm,
    NonNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
    /// Per-feature scale of a normalization layer.
    Gain,
    /// Per-feature shift of a normalization layer.
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }

    pub(crate) fn as_str(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gain => "gain",
            ParamRole::Shift => "shift",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub(crate) fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "weight" => ParamRole::Weight,
            "bias" => ParamRole::Bias,
            "gain" => ParamRole::Gain,
            "shift" => ParamRole::Shift,
            "running_mean" => ParamRole::RunningMean,
            "running_var" => ParamRole::RunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamMeta {
    pub tag: NormTag,
    pub role: ParamRole,
    /// Set for entries of a batch-norm layer, the only norm kind with running statistics.
    pub batch_norm: bool,
}

impl ParamMeta {
    pub fn dense(role: ParamRole) -> Self {
        ParamMeta {
            tag: NormTag::NonNorm,
            role,
            batch_norm: false,
        }
    }

    pub fn norm(role: ParamRole, batch_norm: bool) -> Self {
        ParamMeta {
            tag: NormTag::Norm,
            role,
            batch_norm,
        }
    }

    pub fn trainable(&self) -> bool {
        self.role.is_trainable()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub meta: ParamMeta,
}

/// Named, tagged model parameters. Also used for fragments (subsets of names).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, meta: ParamMeta) {
        self.entries.insert(name.into(), Param { value, meta });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::KeyMismatch(format!("missing `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::KeyMismatch(format!("missing `{name}`")))
    }

    /// Replaces the value of an existing entry, keeping its metadata.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.tensor_mut(name)?;
        if !slot.same_shape(&value) {
            return Err(Error::ShapeMismatch(format!(
                "`{name}`: {:?} vs {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.meta.trainable())
            .map(|(n, _)| n)
    }

    /// Subset of entries whose names are in `names`.
    pub fn restrict(&self, names: &BTreeSet<String>) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| names.contains(*n))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// Copies every entry of `fragment` into `self`. Names must already exist.
    pub fn overwrite_from(&mut self, fragment: &ParamSet) -> Result<()> {
        for (name, p) in &fragment.entries {
            self.set_tensor(name, p.value.clone())?;
        }
        Ok(())
    }

    /// Checks identical names and shapes.
    pub fn check_keying(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::KeyMismatch(format!(
                "{} vs {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, pa), (nb, pb)) in self.entries.iter().zip(&other.entries) {
            if na != nb {
                return Err(Error::KeyMismatch(format!("`{na}` vs `{nb}`")));
            }
            if !pa.value.same_shape(&pb.value) {
                return Err(Error::ShapeMismatch(format!(
                    "`{na}`: {:?} vs {:?}",
                    pa.value.shape(),
                    pb.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(|p| p.value.is_finite())
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, pa), (nb, pb))| {
                    na == nb && pa.meta == pb.meta && pa.value.bitwise_eq(&pb.value)
                })
    }

    /// `self − other` over trainable entries (the pseudo-gradient when `other` is the global model).
    pub fn trainable_diff(&self, other: &ParamSet) -> Result<GradSet> {
        let mut out = GradSet::new();
        for name in self.trainable_names() {
            let a = &self.entries[name].value;
            let b = other.tensor(name)?;
            out.insert(name.clone(), a.zip_map(b, |x, y| x - y)?);
        }
        Ok(out)
    }

    /// `self[name] += scale · delta[name]` for every name in `delta`.
    pub fn add_scaled(&mut self, delta: &GradSet, scale: f64) -> Result<()> {
        for (name, d) in delta.iter() {
            let t = self.tensor_mut(name)?;
            if !t.same_shape(d) {
                return Err(Error::ShapeMismatch(format!("`{name}`")));
            }
            for (w, &g) in t.data_mut().iter_mut().zip(d.data()) {
                *w += scale * g;
            }
        }
        Ok(())
    }
}

/// Name-aligned tensors: gradients, pseudo-gradients, and optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet {
    entries: BTreeMap<String, Tensor>,
}

impl GradSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zeros over the trainable entries of `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self::filled_like(params, 0.0)
    }

    pub fn filled_like(params: &ParamSet, value: f64) -> Self {
        GradSet {
            entries: params
                .iter()
                .filter(|(_, p)| p.meta.trainable())
                .map(|(n, p)| (n.clone(), Tensor::filled(p.value.shape().to_vec(), value)))
                .collect(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> BTreeSet<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    pub fn bitwise_eq(&self, other: &GradSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    fn check_aligned(&self, other: &GradSet) -> Result<()> {
        if self.entries.len() != other.entries.len()
            || self
                .entries
                .keys()
                .zip(other.entries.keys())
                .any(|(a, b)| a != b)
        {
            return Err(Error::KeyMismatch(format!(
                "{:?} vs {:?}",
                self.names(),
                other.names()
            )));
        }
        Ok(())
    }

    /// Elementwise binary op over name-aligned sets.
    pub fn zip_map(&self, other: &GradSet, f: impl Fn(f64, f64) -> f64) -> Result<GradSet> {
        self.check_aligned(other)?;
        let mut out = GradSet::new();
        for ((name, a), b) in self.entries.iter().zip(other.entries.values()) {
            out.insert(name.clone(), a.zip_map(b, &f)?);
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GradSet {
        GradSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.map(&f)))
                .collect(),
        }
    }

    pub fn add(&self, other: &GradSet) -> Result<GradSet> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GradSet) -> Result<GradSet> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> GradSet {
        self.map(|v| v * s)
    }

    pub fn square(&self) -> GradSet {
        self.map(|v| v * v)
    }

    /// Elementwise sign with `sign(0) = 0`.
    pub fn sign(&self) -> GradSet {
        self.map(sign)
    }

    /// `self += s · other`.
    pub fn axpy(&mut self, s: f64, other: &GradSet) -> Result<()> {
        self.check_aligned(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            if !a.same_shape(b) {
                return Err(Error::ShapeMismatch(format!(
                    "{:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += s * y;
            }
        }
        Ok(())
    }
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Which normalization entries the server leaves out of the average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    #[default]
    None,
    /// Every norm-tagged entry stays local (FedBN).
    AllNormExcluded,
    /// Only running statistics stay local; gains and shifts are averaged (SiloBN).
    StatsOnlyExcluded,
    /// Only the batch-norm rescaling gain is averaged; its shift and statistics stay
    /// local. Stat-free norms (layer/group) are averaged in full.
    RescalingAggregated,
}

impl ExclusionPolicy {
    pub fn excludes(self, meta: &ParamMeta) -> bool {
        if meta.tag != NormTag::Norm {
            return false;
        }
        match self {
            ExclusionPolicy::None => false,
            ExclusionPolicy::AllNormExcluded => true,
            ExclusionPolicy::StatsOnlyExcluded => !meta.trainable(),
            ExclusionPolicy::RescalingAggregated => meta.batch_norm && meta.role != ParamRole::Gain,
        }
    }
}

/// Splits the names of `params` into `(excluded, aggregated)`.
pub fn partition_names(
    params: &ParamSet,
    policy: ExclusionPolicy,
) -> (BTreeSet<String>, BTreeSet<String>) {
    params
        .iter()
        .map(|(n, p)| (n.clone(), policy.excludes(&p.meta)))
        .fold(
            (BTreeSet::new(), BTreeSet::new()),
            |(mut ex, mut ag), (n, excluded)| {
                if excluded {
                    ex.insert(n);
                } else {
                    ag.insert(n);
                }
                (ex, ag)
            },
        )
}

/// A client's share of the cohort, `n_k / n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientWeight {
    pub client_id: usize,
    pub n_k: usize,
    pub weight: f64,
}

impl ClientWeight {
    /// Data-size weights from `(client_id, n_k)` pairs.
    pub fn from_sizes(sizes: &[(usize, usize)]) -> Vec<ClientWeight> {
        let n: usize = sizes.iter().map(|&(_, n_k)| n_k).sum();
        sizes
            .iter()
            .map(|&(client_id, n_k)| ClientWeight {
                client_id,
                n_k,
                weight: n_k as f64 / n as f64,
            })
            .collect()
    }

    /// Equal weights regardless of size.
    pub fn uniform(sizes: &[(usize, usize)]) -> Vec<ClientWeight> {
        let k = sizes.len() as f64;
        sizes
            .iter()
            .map(|&(client_id, n_k)| ClientWeight {
                client_id,
                n_k,
                weight: 1.0 / k,
            })
            .collect()
    }
}

pub(crate) fn check_weight_sum(weights: &[ClientWeight]) -> Result<()> {
    let total: f64 = weights.iter().map(|w| w.weight).sum();
    if !((total - 1.0).abs() <= WEIGHT_SUM_TOLERANCE) {
        return Err(Error::WeightSumViolation(total));
    }
    Ok(())
}

/// Convex combination `Σ w_k · set_k` over the names in `over`.
///
/// Accumulation starts from the first weighted term and proceeds in input order,
/// so a single client with weight 1 is reproduced bit for bit.
pub fn weighted_average(
    sets: &[&ParamSet],
    weights: &[ClientWeight],
    over: &BTreeSet<String>,
) -> Result<ParamSet> {
    let first = *sets
        .first()
        .ok_or_else(|| Error::KeyMismatch("no parameter sets to average".into()))?;
    if sets.len() != weights.len() {
        return Err(Error::KeyMismatch(format!(
            "{} sets but {} weights",
            sets.len(),
            weights.len()
        )));
    }
    check_weight_sum(weights)?;
    for s in &sets[1..] {
        first.check_keying(s)?;
    }

    let mut out = ParamSet::new();
    for name in over {
        let p = first
            .get(name)
            .ok_or_else(|| Error::KeyMismatch(format!("missing `{name}`")))?;
        let mut acc: Vec<f64> = p
            .value
            .data()
            .iter()
            .map(|v| weights[0].weight * v)
            .collect();
        for (set, w) in sets[1..].iter().zip(&weights[1..]) {
            let src = set.tensor(name)?.data();
            for (a, &v) in acc.iter_mut().zip(src) {
                *a += w.weight * v;
            }
        }
        out.insert(
            name.clone(),
            Tensor::new(p.value.shape().to_vec(), acc)?,
            p.meta,
        );
    }
    Ok(out)
}

/// Squared L2 distance between the non-norm trainable entries of `a` and `b`.
pub fn l2_distance_excluding_norm(a: &ParamSet, b: &ParamSet) -> Result<f64> {
    a.check_keying(b)?;
    let mut total = 0.0;
    for ((_, pa), (_, pb)) in a.iter().zip(b.iter()) {
        if pa.meta.tag == NormTag::Norm || !pa.meta.trainable() {
            continue;
        }
        for (x, y) in pa.value.data().iter().zip(pb.value.data()) {
            let d = x - y;
            total += d * d;
        }
    }
    Ok(total)
}
