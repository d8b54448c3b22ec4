//! Synthetic heterogeneous clients and per-client CSV data.
//!
//! Three generators share one feature model: class-conditional Gaussians with
//! unit covariance whose means sit on a scaled simplex (`class_separation · e_c`).
//!
//! * `label_skew`: client class proportions ~ symmetric Dirichlet, shared features.
//! * `feature_shift`: balanced labels, each client applies its own affine map.
//! * `iid`: balanced labels, shared features.
//!
//! Every client's examples are shuffled at generation time and split in file
//! order: `train = ⌊0.70·n⌋`, `val = ⌊0.15·n⌋`, `test = n − train − val`.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::nn::{Batch, Labels};
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Smallest client that still gets a non-empty validation split.
pub const MIN_CLIENT_SIZE: usize = 7;

/// Client sizes shaped like the five largest hospitals of the mortality cohort.
pub const DEFAULT_SIZES: [usize; 5] = [4000, 3500, 2800, 2400, 2260];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    LabelSkew,
    FeatureShift,
    Iid,
}

fn default_concentration() -> f64 {
    1.0
}

fn default_separation() -> f64 {
    1.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub kind: PartitionKind,
    pub num_clients: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub sizes: Vec<usize>,
    #[serde(default = "default_concentration")]
    pub skew_concentration: f64,
    #[serde(default)]
    pub shift_scale: f64,
    #[serde(default = "default_separation")]
    pub class_separation: f64,
    /// Examples of every class each client must hold (label skew only).
    #[serde(default)]
    pub min_per_class: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("data.num_clients", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("data.num_classes", "must be >= 2"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("data.input_dim", "must be positive"));
        }
        if self.sizes.len() != self.num_clients {
            return Err(Error::InfeasibleSizes(format!(
                "{} sizes for {} clients",
                self.sizes.len(),
                self.num_clients
            )));
        }
        if let Some((k, &n)) = self
            .sizes
            .iter()
            .enumerate()
            .find(|(_, &n)| n < MIN_CLIENT_SIZE)
        {
            return Err(Error::InfeasibleSizes(format!(
                "client {k} holds {n} examples, at least {MIN_CLIENT_SIZE} are needed for a validation split"
            )));
        }
        if !(self.skew_concentration > 0.0 && self.skew_concentration.is_finite()) {
            return Err(Error::config(
                "data.skew_concentration",
                "must be a positive real",
            ));
        }
        if !(self.shift_scale >= 0.0 && self.shift_scale.is_finite()) {
            return Err(Error::config(
                "data.shift_scale",
                "must be a non-negative real",
            ));
        }
        if !self.class_separation.is_finite() {
            return Err(Error::config("data.class_separation", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Batch,
    pub val: Batch,
    pub test: Batch,
    pub n_k: usize,
    pub class_histogram: Vec<usize>,
}

/// `(train, val, test)` sizes for `n` examples.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 70 / 100;
    let val = n * 15 / 100;
    (train, val, n - train - val)
}

fn assemble(
    client_id: usize,
    num_classes: usize,
    input_dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
) -> Result<ClientDataset> {
    let n = labels.len();
    let (tr, va, _) = split_sizes(n);
    let mut class_histogram = vec![0; num_classes];
    for &c in &labels {
        class_histogram[c] += 1;
    }
    let part = |lo: usize, hi: usize| -> Result<Batch> {
        let inputs = Tensor::new(
            vec![hi - lo, input_dim],
            features[lo * input_dim..hi * input_dim].to_vec(),
        )?;
        Batch::new(inputs, Labels::Classes(labels[lo..hi].to_vec()))
    };
    Ok(ClientDataset {
        client_id,
        train: part(0, tr)?,
        val: part(tr, tr + va)?,
        test: part(tr + va, n)?,
        n_k: n,
        class_histogram,
    })
}

/// Per-class feature means, shared by every client. Classes beyond the input
/// dimension get random directions of the same length.
pub fn class_means(spec: &PartitionSpec) -> Vec<Vec<f64>> {
    let d = spec.input_dim;
    let mut rng = rng_for(&[spec.seed, stream::CLASS_MEANS]);
    (0..spec.num_classes)
        .map(|c| {
            if c < d {
                let mut m = vec![0.0; d];
                m[c] = spec.class_separation;
                m
            } else {
                let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.iter().map(|x| spec.class_separation * x / norm).collect()
            }
        })
        .collect()
}

fn draw_features(means: &[Vec<f64>], labels: &[usize], rng: &mut impl Rng) -> Vec<f64> {
    let d = means[0].len();
    let mut out = Vec::with_capacity(labels.len() * d);
    for &c in labels {
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            out.push(means[c][j] + z);
        }
    }
    out
}

fn dirichlet(alpha: f64, k: usize, rng: &mut impl Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed: all mass on one class
        let mut p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
        p
    }
}

/// Integer counts summing to `n`, proportional to `p` (largest remainder).
fn apportion(n: usize, p: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|q| q * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn require_kind(spec: &PartitionSpec, kind: PartitionKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::config(
            "data.kind",
            format!("expected {kind:?}, got {:?}", spec.kind),
        ));
    }
    Ok(())
}

/// Pure label shift: Dirichlet class proportions per client, shared class-conditional features.
pub fn generate_label_skew(spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    require_kind(spec, PartitionKind::LabelSkew)?;
    let c = spec.num_classes;
    let reserved = spec.min_per_class * c;
    if let Some((k, &n)) = spec.sizes.iter().enumerate().find(|(_, &n)| n < reserved) {
        return Err(Error::InfeasibleSizes(format!(
            "client {k} holds {n} examples but must hold {} of each of {c} classes",
            spec.min_per_class
        )));
    }
    let means = class_means(spec);
    spec.sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let mut rng = rng_for(&[spec.seed, stream::LABELS, k as u64]);
            let p = dirichlet(spec.skew_concentration, c, &mut rng);
            let counts = apportion(n - reserved, &p);
            let mut labels: Vec<usize> = counts
                .iter()
                .enumerate()
                .flat_map(|(cls, &m)| std::iter::repeat_n(cls, m + spec.min_per_class))
                .collect();
            labels.shuffle(&mut rng);
            let mut frng = rng_for(&[spec.seed, stream::FEATURES, k as u64]);
            let x = draw_features(&means, &labels, &mut frng);
            assemble(k, c, spec.input_dim, x, labels)
        })
        .collect()
}

fn balanced_clients(spec: &PartitionSpec, shift: f64) -> Result<Vec<ClientDataset>> {
    let means = class_means(spec);
    let d = spec.input_dim;
    spec.sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let mut rng = rng_for(&[spec.seed, stream::LABELS, k as u64]);
            let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
            labels.shuffle(&mut rng);
            let mut frng = rng_for(&[spec.seed, stream::FEATURES, k as u64]);
            let mut x = draw_features(&means, &labels, &mut frng);
            if shift > 0.0 {
                let mut arng = rng_for(&[spec.seed, stream::AFFINE, k as u64]);
                let scale: Vec<f64> = (0..d)
                    .map(|_| arng.random_range(1.0 - shift..=1.0 + shift))
                    .collect();
                let offset: Vec<f64> = (0..d).map(|_| arng.random_range(-shift..=shift)).collect();
                for row in x.chunks_mut(d) {
                    for j in 0..d {
                        row[j] = scale[j] * row[j] + offset[j];
                    }
                }
            }
            assemble(k, spec.num_classes, d, x, labels)
        })
        .collect()
}

/// One labelling rule; each client applies a random per-feature affine map
/// (`scale ∈ [1−s, 1+s]`, `shift ∈ [−s, s]`).
pub fn generate_feature_shift(spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    require_kind(spec, PartitionKind::FeatureShift)?;
    balanced_clients(spec, spec.shift_scale)
}

pub fn generate_iid(spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    require_kind(spec, PartitionKind::Iid)?;
    balanced_clients(spec, 0.0)
}

pub fn generate(spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    match spec.kind {
        PartitionKind::LabelSkew => generate_label_skew(spec),
        PartitionKind::FeatureShift => generate_feature_shift(spec),
        PartitionKind::Iid => generate_iid(spec),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub client_id: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Shuffle rows with this seed before splitting; `None` keeps file order.
    pub shuffle_seed: Option<u64>,
}

pub fn csv_header(input_dim: usize) -> Vec<String> {
    (0..input_dim)
        .map(|j| format!("feature_{j}"))
        .chain(std::iter::once("label".to_string()))
        .collect()
}

pub fn load_client_csv(path: &Path, schema: &CsvSchema) -> Result<ClientDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != csv_header(schema.input_dim) {
        return Err(Error::SchemaMismatch(format!(
            "{}: expected header feature_0..feature_{},label, got {}",
            path.display(),
            schema.input_dim.saturating_sub(1),
            header.join(",")
        )));
    }

    let d = schema.input_dim;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| match e.position() {
            Some(pos) => Error::MalformedRow {
                line: pos.line(),
                reason: e.to_string(),
            },
            None => csv_error(path, e),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |reason: String| Error::MalformedRow { line, reason };
        if record.len() != d + 1 {
            return Err(bad(format!("{} cells, expected {}", record.len(), d + 1)));
        }
        let mut feats = Vec::with_capacity(d);
        for cell in record.iter().take(d) {
            feats.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|_| bad(format!("non-numeric cell `{cell}`")))?,
            );
        }
        let cell = &record[d];
        let label: f64 = cell
            .trim()
            .parse()
            .map_err(|_| bad(format!("non-numeric label `{cell}`")))?;
        if label.fract() != 0.0 || label < 0.0 || label >= schema.num_classes as f64 {
            return Err(bad(format!(
                "label `{cell}` is not a class id in [0, {})",
                schema.num_classes
            )));
        }
        rows.push((feats, label as usize));
    }
    if rows.len() < MIN_CLIENT_SIZE {
        return Err(Error::InfeasibleSizes(format!(
            "{}: {} rows, at least {MIN_CLIENT_SIZE} needed",
            path.display(),
            rows.len()
        )));
    }
    if let Some(seed) = schema.shuffle_seed {
        rows.shuffle(&mut rng_for(&[
            seed,
            stream::CSV_SPLIT,
            schema.client_id as u64,
        ]));
    }
    let labels = rows.iter().map(|r| r.1).collect();
    let features = rows.into_iter().flat_map(|r| r.0).collect();
    assemble(schema.client_id, schema.num_classes, d, features, labels)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::SchemaMismatch(format!("{}: {other:?}", path.display())),
    }
}

/// Writes train, val and test rows (in that order) so a file-order reload
/// reproduces the same splits.
pub fn write_client_csv(path: &Path, ds: &ClientDataset) -> Result<()> {
    let d = ds.train.inputs.cols();
    let mut out = csv_header(d).join(",");
    out.push('\n');
    for part in [&ds.train, &ds.val, &ds.test] {
        let classes = part.classes().ok_or_else(|| {
            Error::SchemaMismatch("only single-label datasets can be written as CSV".into())
        })?;
        for (i, &c) in classes.iter().enumerate() {
            for v in part.inputs.row(i) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{c}\n"));
        }
    }
    write_atomic(path, out.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestClient {
    pub client_id: usize,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub n_k: usize,
    pub class_histogram: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PartitionSpec>,
    pub clients: Vec<ManifestClient>,
}

pub const MANIFEST_FORMAT: &str = "fedsim-partition";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates `spec` and writes one CSV per client plus `manifest.json` into `dir`.
pub fn write_partition(dir: &Path, spec: &PartitionSpec) -> Result<Manifest> {
    let clients = generate(spec)?;
    let mut entries = Vec::with_capacity(clients.len());
    for ds in &clients {
        let file = PathBuf::from(format!("client_{:03}.csv", ds.client_id));
        write_client_csv(&dir.join(&file), ds)?;
        entries.push(ManifestClient {
            client_id: ds.client_id,
            path: file,
            n_k: ds.n_k,
            class_histogram: ds.class_histogram.clone(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        input_dim: spec.input_dim,
        num_classes: spec.num_classes,
        spec: Some(spec.clone()),
        clients: entries,
    };
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != MANIFEST_FORMAT || m.version != 1 {
        return Err(Error::SchemaMismatch(format!(
            "{}: unsupported manifest {} v{}",
            path.display(),
            m.format,
            m.version
        )));
    }
    Ok(m)
}

/// Loads every client listed in a manifest, in file order.
pub fn load_manifest(path: &Path) -> Result<Vec<ClientDataset>> {
    let m = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    m.clients
        .iter()
        .map(|c| {
            let ds = load_client_csv(
                &base.join(&c.path),
                &CsvSchema {
                    client_id: c.client_id,
                    input_dim: m.input_dim,
                    num_classes: m.num_classes,
                    shuffle_seed: None,
                },
            )?;
            if ds.n_k != c.n_k || ds.class_histogram != c.class_histogram {
                return Err(Error::SchemaMismatch(format!(
                    "{}: contents disagree with the manifest",
                    c.path.display()
                )));
            }
            Ok(ds)
        })
        .collect()
}
