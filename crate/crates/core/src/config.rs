//! Experiment configuration: TOML schema, dotted overrides and validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PartitionKind, PartitionSpec};
use crate::error::{Error, Result};
use crate::metrics::Averaging;
use crate::nn::optim::AdamConfig;
use crate::nn::{LayerSpec, ModelSpec};
use crate::strategies::{Algorithm, StrategyConfig};

/// Local learning-rate grid.
pub const ETA_GRID: [f64; 6] = [0.1, 0.03, 0.01, 0.003, 0.001, 0.0001];
/// Proximal coefficient grid (FedProx, FedPxN).
pub const MU_GRID: [f64; 5] = [1.0, 0.1, 0.01, 0.001, 0.0001];
/// FedDyn regularization grid.
pub const ALPHA_GRID: [f64; 4] = [0.0001, 0.001, 0.01, 0.1];
/// Server learning-rate grid (FedOpt family).
pub const ETA_G_GRID: [f64; 6] = ETA_GRID;
/// Adaptivity grid (FedOpt family).
pub const GAMMA_GRID: [f64; 4] = [0.0001, 0.001, 0.01, 0.1];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(PartitionSpec),
    Manifest { path: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LocalOptimizer {
    #[default]
    Sgd,
    Adam(AdamConfig),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Auroc,
    Auprc,
    Accuracy,
    Loss,
}

impl SelectionMetric {
    pub fn name(self) -> &'static str {
        match self {
            SelectionMetric::Auroc => "auroc",
            SelectionMetric::Auprc => "auprc",
            SelectionMetric::Accuracy => "accuracy",
            SelectionMetric::Loss => "loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Auroc, Self::Auprc, Self::Accuracy, Self::Loss]
            .into_iter()
            .find(|m| m.name() == s)
    }

    pub fn higher_is_better(self) -> bool {
        self != SelectionMetric::Loss
    }

    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointPolicy {
    None,
    #[default]
    BestAndLast,
    All,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub strategy: StrategyConfig,
    pub data: DataSource,
    /// Number of clients, all of which take part in every round.
    pub num_clients: usize,
    pub local_epochs: usize,
    pub rounds: usize,
    /// `local_epochs · rounds`; filled in when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_budget: Option<usize>,
    pub eta: f64,
    #[serde(default)]
    pub local_optimizer: LocalOptimizer,
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub selection_metric: SelectionMetric,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default)]
    pub checkpoints: CheckpointPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Checks every cross-field constraint and returns a copy with defaults filled in.
    pub fn validated(&self) -> Result<ExperimentConfig> {
        let mut out = self.clone();
        out.strategy = self.strategy.validated()?;
        self.model.validate()?;
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be >= 1"));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        let budget = self.local_epochs * self.rounds;
        match self.total_budget {
            Some(b) if b != budget => {
                return Err(Error::config(
                    "total_budget",
                    format!(
                        "local_epochs × rounds = {} × {} = {budget}, declared {b}",
                        self.local_epochs, self.rounds
                    ),
                ))
            }
            _ => out.total_budget = Some(budget),
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta", "must be a positive real"));
        }
        let has_bn = self
            .model
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. }));
        let min_batch = if has_bn { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::config(
                "batch_size",
                format!("must be >= {min_batch} for this model"),
            ));
        }
        if self.num_clients == 0 {
            return Err(Error::config("num_clients", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if let LocalOptimizer::Adam(a) = self.local_optimizer {
            if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
                return Err(Error::config(
                    "local_optimizer",
                    "adam needs beta1, beta2 in [0, 1) and eps > 0",
                ));
            }
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.num_clients != self.num_clients {
                return Err(Error::config(
                    "data.num_clients",
                    format!(
                        "{} clients, but num_clients = {}",
                        spec.num_clients, self.num_clients
                    ),
                ));
            }
            if spec.input_dim != self.model.input_dim {
                return Err(Error::config(
                    "data.input_dim",
                    format!(
                        "{} features, but model.input_dim = {}",
                        spec.input_dim, self.model.input_dim
                    ),
                ));
            }
            if spec.num_classes != self.model.num_classes {
                return Err(Error::config(
                    "data.num_classes",
                    format!(
                        "{} classes, but model.num_classes = {}",
                        spec.num_classes, self.model.num_classes
                    ),
                ));
            }
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<root>", e.to_string()))
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
pub fn parse_override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets the dotted `path` in `root`, creating intermediate tables.
pub fn set_dotted(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "empty key segment"));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let table = cur.as_table_mut().ok_or_else(|| {
            Error::config(
                parts[..i].join("."),
                "is not a table; cannot set a nested key",
            )
        })?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("non-empty path")
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    Ok((k.trim().to_string(), parse_override_value(v)))
}

fn serde_error_field(msg: &str) -> String {
    // toml reports unknown or mistyped keys as "... `key` ..."
    msg.split('`').nth(1).unwrap_or("<root>").to_string()
}

/// Applies overrides to a parsed document and deserializes it.
pub fn config_from_value(
    mut doc: toml::Value,
    overrides: &[(String, toml::Value)],
) -> Result<ExperimentConfig> {
    for (k, v) in overrides {
        set_dotted(&mut doc, k, v.clone())?;
    }
    let text = toml::to_string(&doc).map_err(|e| Error::config("<root>", e.to_string()))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| {
        let msg = e.message().to_string();
        Error::config(serde_error_field(&msg), msg)
    })?;
    cfg.validated()
}

pub fn parse_config_text(
    text: &str,
    overrides: &[(String, toml::Value)],
) -> Result<ExperimentConfig> {
    let doc: toml::Value = text
        .parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| Error::config("<root>", e.to_string()))?;
    config_from_value(doc, overrides)
}

/// Reads, overrides and validates a config file. A relative manifest path is
/// resolved against the config file's directory.
pub fn parse_and_validate_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: Vec<(String, toml::Value)> = overrides
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<_>>()?;
    let mut cfg = parse_config_text(&text, &parsed)?;
    if let DataSource::Manifest { path: m } = &mut cfg.data {
        if m.is_relative() {
            if let Some(dir) = path.parent() {
                *m = dir.join(&*m);
            }
        }
    }
    Ok(cfg)
}

/// A hyperparameter grid: dotted config keys to candidate values, plus
/// optional `(local_epochs, rounds)` splits of a fixed budget.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub params: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Vec<(usize, usize)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
}

impl GridSpec {
    pub fn from_path(path: &Path) -> Result<GridSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            let msg = e.message().to_string();
            Error::config(format!("grid.{}", serde_error_field(&msg)), msg)
        })
    }

    /// Cartesian product of all parameter lists and splits, keys in sorted order.
    pub fn expand(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut combos: Vec<Vec<(String, toml::Value)>> = vec![Vec::new()];
        for (key, values) in &self.params {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut next = c.clone();
                        next.push((key.clone(), v.clone()));
                        next
                    })
                })
                .collect();
        }
        if let Some(splits) = &self.splits {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    splits.iter().map(move |&(e, t)| {
                        let mut next = c.clone();
                        next.push(("local_epochs".into(), toml::Value::Integer(e as i64)));
                        next.push(("rounds".into(), toml::Value::Integer(t as i64)));
                        next
                    })
                })
                .collect();
        }
        combos
    }
}

fn floats(v: &[f64]) -> Vec<toml::Value> {
    v.iter().map(|&x| toml::Value::Float(x)).collect()
}

/// The default hyperparameter search space for `algorithm`.
pub fn default_search_space(algorithm: Algorithm) -> GridSpec {
    let mut params = BTreeMap::from([("eta".to_string(), floats(&ETA_GRID))]);
    match algorithm {
        Algorithm::FedProx | Algorithm::FedPxn => {
            params.insert("strategy.mu".into(), floats(&MU_GRID));
        }
        Algorithm::FedDyn => {
            params.insert("strategy.alpha".into(), floats(&ALPHA_GRID));
        }
        a if a.is_fedopt() => {
            params.insert("strategy.eta_g".into(), floats(&ETA_G_GRID));
            params.insert("strategy.gamma".into(), floats(&GAMMA_GRID));
        }
        _ => {}
    }
    GridSpec {
        params,
        splits: None,
        budget: None,
    }
}

/// Whether the partition is a feature-shift benchmark (used for preset naming).
pub fn partition_kind(cfg: &ExperimentConfig) -> Option<PartitionKind> {
    match &cfg.data {
        DataSource::Synthetic(s) => Some(s.kind),
        DataSource::Manifest { .. } => None,
    }
}
