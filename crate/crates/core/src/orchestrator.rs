//! Full-participation federated training: rounds of local epochs, server
//! aggregation, per-round validation, checkpointing and best-round selection.
//!
//! Every random draw comes from a stream keyed by the experiment seed, the
//! client id and the epoch index, so results do not depend on how clients are
//! scheduled across threads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    CheckpointPolicy, DataSource, ExperimentConfig, LocalOptimizer, SelectionMetric,
};
use crate::data::{generate, load_manifest, read_manifest, ClientDataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metrics::report::{distance_csv, DistanceRow, SeedRecord, SignificanceSpec};
use crate::metrics::{accuracy, auprc, auroc, one_vs_rest, Averaging};
use crate::metrics::{significance_matrix, PairwiseTest};
use crate::nn::optim::{adam_step_in_place, sgd_step_in_place, AdamConfig, AdamState};
use crate::nn::{model_backward, model_forward, Batch, Mode, ModelSpec};
use crate::params::{l2_distance_excluding_norm, write_grads, write_params, GradSet, ParamSet};
use crate::rng::{rng_for, stream};
use crate::strategies::{
    apply_local_regularizer, broadcast_names, init_server_state, server_aggregate,
    update_dyn_memory, Algorithm, ClientUpdate, DynMemory, ServerState, StrategyConfig,
};

/// Mini-batches of one epoch: a seeded permutation cut into `batch_size`
/// chunks. A trailing chunk of one example is folded into the previous chunk
/// so batch normalization always sees at least two rows.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut impl rand::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = idx
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// What one client carries between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub dataset: ClientDataset,
    pub params: ParamSet,
    pub adam: Option<AdamState>,
    pub dyn_mem: Option<DynMemory>,
}

impl ClientState {
    pub fn client_id(&self) -> usize {
        self.dataset.client_id
    }
}

/// Settings shared by every client's local loop.
#[derive(Clone, Copy, Debug)]
pub struct LocalSettings<'a> {
    pub model: &'a ModelSpec,
    pub strategy: &'a StrategyConfig,
    pub eta: f64,
    pub optimizer: LocalOptimizer,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl<'a> LocalSettings<'a> {
    pub fn from_config(cfg: &'a ExperimentConfig, seed: u64) -> Self {
        LocalSettings {
            model: &cfg.model,
            strategy: &cfg.strategy,
            eta: cfg.eta,
            optimizer: cfg.local_optimizer,
            batch_size: cfg.batch_size,
            local_epochs: cfg.local_epochs,
            seed,
        }
    }
}

/// Result of one client's local training.
#[derive(Clone, Debug)]
pub struct LocalOutcome {
    pub update: ClientUpdate,
    pub adam: Option<AdamState>,
    pub dyn_mem: Option<DynMemory>,
    /// Why training stopped early, when it diverged.
    pub failure: Option<String>,
}

enum Step {
    Done(f64),
    Diverged(String),
}

struct Trainer<'a> {
    s: LocalSettings<'a>,
    anchor: &'a ParamSet,
    dyn_mem: Option<&'a DynMemory>,
}

impl Trainer<'_> {
    /// One pass over `train`; returns the mean batch loss.
    fn epoch(
        &self,
        train: &Batch,
        w: &mut ParamSet,
        adam: &mut Option<AdamState>,
        batches: &[Vec<usize>],
    ) -> Result<Step> {
        let mut loss_sum = 0.0;
        for idx in batches {
            let b = train.select(idx);
            let out = match model_forward(self.s.model, w, &b, Mode::Train) {
                Ok(o) => o,
                Err(Error::NonFiniteLoss(l)) => {
                    return Ok(Step::Diverged(format!("non-finite loss {l}")))
                }
                Err(e) => return Err(e),
            };
            let base = model_backward(self.s.model, w, &out.cache)?;
            if !base.is_finite() {
                return Ok(Step::Diverged("non-finite gradient".into()));
            }
            let mut g = base;
            apply_local_regularizer(self.s.strategy, &mut g, w, self.anchor, self.dyn_mem)?;
            match (self.s.optimizer, adam.as_mut()) {
                (LocalOptimizer::Adam(cfg), Some(state)) => {
                    adam_step_in_place(w, &g, state, self.s.eta, &cfg)?
                }
                _ => sgd_step_in_place(w, &g, self.s.eta)?,
            }
            out.apply_running_stats(w)?;
            loss_sum += out.loss;
        }
        if !w.is_finite() {
            return Ok(Step::Diverged("non-finite parameters".into()));
        }
        Ok(Step::Done(loss_sum / batches.len() as f64))
    }
}

/// Mean plain-loss gradient at fixed `w` over `batches` (train-mode forward,
/// running statistics untouched). `None` if any gradient is non-finite.
pub fn mean_batch_gradient(
    model: &ModelSpec,
    w: &ParamSet,
    train: &Batch,
    batches: &[Vec<usize>],
) -> Result<Option<GradSet>> {
    let mut acc: Option<GradSet> = None;
    for idx in batches {
        let out = match model_forward(model, w, &train.select(idx), Mode::Train) {
            Ok(o) => o,
            Err(Error::NonFiniteLoss(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let g = model_backward(model, w, &out.cache)?;
        match acc.as_mut() {
            Some(a) => a.axpy(1.0, &g)?,
            None => acc = Some(g),
        }
    }
    Ok(acc
        .map(|a| a.scale(1.0 / batches.len() as f64))
        .filter(GradSet::is_finite))
}

fn adam_config(opt: LocalOptimizer) -> Option<AdamConfig> {
    match opt {
        LocalOptimizer::Adam(c) => Some(c),
        LocalOptimizer::Sgd => None,
    }
}

/// `E` local epochs starting from the client's current parameters, which are
/// also the anchor of the proximal and FedDyn terms. `round` is 0-based.
///
/// A divergent client is rolled back to its round-start state and flagged.
pub fn run_local_training(
    client: &ClientState,
    settings: LocalSettings<'_>,
    round: usize,
) -> Result<LocalOutcome> {
    let s = settings;
    let id = client.client_id();
    let anchor = &client.params;
    if s.strategy.algorithm == Algorithm::FedDyn && client.dyn_mem.is_none() {
        return Err(Error::MissingDynMemory);
    }
    let trainer = Trainer {
        s,
        anchor,
        dyn_mem: client.dyn_mem.as_ref(),
    };
    let mut w = client.params.clone();
    let mut adam = adam_config(s.optimizer)
        .map(|_| client.adam.clone().unwrap_or_else(|| AdamState::zeros(&w)));
    let train = &client.dataset.train;
    let mut epoch_losses = Vec::with_capacity(s.local_epochs);
    let mut last_grad: Option<GradSet> = None;
    for e in 0..s.local_epochs {
        let global_epoch = (round * s.local_epochs + e) as u64;
        let mut rng = rng_for(&[s.seed, stream::BATCHES, id as u64, global_epoch]);
        let batches = epoch_batches(train.size(), s.batch_size, &mut rng);
        let step = trainer.epoch(train, &mut w, &mut adam, &batches)?;
        let step = match step {
            Step::Done(l)
                if s.strategy.algorithm == Algorithm::FedDyn && e + 1 == s.local_epochs =>
            {
                match mean_batch_gradient(s.model, &w, train, &batches)? {
                    Some(g) => {
                        last_grad = Some(g);
                        Step::Done(l)
                    }
                    None => Step::Diverged("non-finite gradient at the local solution".into()),
                }
            }
            other => other,
        };
        match step {
            Step::Done(l) => epoch_losses.push(l),
            Step::Diverged(why) => {
                warn!(
                    "client {id} diverged in round {} epoch {}: {why}",
                    round + 1,
                    e + 1
                );
                return Ok(LocalOutcome {
                    update: ClientUpdate {
                        client_id: id,
                        params_after: client.params.clone(),
                        n_k: client.dataset.n_k,
                        train_loss: f64::NAN,
                        diverged: true,
                    },
                    adam: client.adam.clone(),
                    dyn_mem: client.dyn_mem.clone(),
                    failure: Some(why),
                });
            }
        }
    }
    let dyn_mem = match (&client.dyn_mem, &last_grad) {
        (Some(mem), Some(g)) => Some(update_dyn_memory(mem, g)?),
        (other, _) => other.clone(),
    };
    Ok(LocalOutcome {
        update: ClientUpdate {
            client_id: id,
            params_after: w,
            n_k: client.dataset.n_k,
            train_loss: epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64,
            diverged: false,
        },
        adam,
        dyn_mem,
        failure: None,
    })
}

/// Plain training of one dataset for `epochs` epochs with the same batch
/// stream a lone federated client would use.
pub fn run_centralized(
    model: &ModelSpec,
    dataset: &ClientDataset,
    w0: &ParamSet,
    eta: f64,
    optimizer: LocalOptimizer,
    batch_size: usize,
    epochs: usize,
    seed: u64,
) -> Result<ParamSet> {
    let strategy = StrategyConfig::new(Algorithm::FedAvg);
    let s = LocalSettings {
        model,
        strategy: &strategy,
        eta,
        optimizer,
        batch_size,
        local_epochs: 1,
        seed,
    };
    let trainer = Trainer {
        s,
        anchor: w0,
        dyn_mem: None,
    };
    let mut w = w0.clone();
    let mut adam = adam_config(optimizer).map(|_| AdamState::zeros(w0));
    for e in 0..epochs {
        let mut rng = rng_for(&[seed, stream::BATCHES, dataset.client_id as u64, e as u64]);
        let batches = epoch_batches(dataset.train.size(), batch_size, &mut rng);
        if let Step::Diverged(why) = trainer.epoch(&dataset.train, &mut w, &mut adam, &batches)? {
            warn!("centralized training diverged in epoch {}: {why}", e + 1);
            return Err(Error::NonFiniteLoss(f64::NAN));
        }
    }
    Ok(w)
}

/// Metrics of one model on one split. Ranking metrics are `None` when no
/// class has both positives and negatives in the split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
}

impl EvalMetrics {
    const EMPTY: EvalMetrics = EvalMetrics {
        auroc: None,
        auprc: None,
        accuracy: None,
        loss: None,
    };

    pub fn get(&self, m: SelectionMetric) -> Option<f64> {
        match m {
            SelectionMetric::Auroc => self.auroc,
            SelectionMetric::Auprc => self.auprc,
            SelectionMetric::Accuracy => self.accuracy,
            SelectionMetric::Loss => self.loss,
        }
    }

    pub fn named(&self) -> [(&'static str, Option<f64>); 4] {
        [
            ("auroc", self.auroc),
            ("auprc", self.auprc),
            ("accuracy", self.accuracy),
            ("loss", self.loss),
        ]
    }
}

/// Eval-mode metrics of `params` on `split`. A non-finite forward pass yields
/// empty metrics rather than an error.
pub fn evaluate(
    model: &ModelSpec,
    params: &ParamSet,
    split: &Batch,
    averaging: Averaging,
) -> Result<EvalMetrics> {
    let out = match model_forward(model, params, split, Mode::Eval) {
        Ok(o) => o,
        Err(Error::NonFiniteLoss(_)) => return Ok(EvalMetrics::EMPTY),
        Err(e) => return Err(e),
    };
    let p = &out.predictions;
    if !p.is_finite() {
        return Ok(EvalMetrics::EMPTY);
    }
    Ok(EvalMetrics {
        auroc: one_vs_rest(p, &split.labels, averaging, auroc)?,
        auprc: one_vs_rest(p, &split.labels, averaging, auprc)?,
        accuracy: Some(accuracy(p, &split.labels)?),
        loss: Some(out.loss),
    })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Hook for resource accounting around each round (e.g. power draw).
pub trait ResourceSampler: Send {
    fn begin_round(&mut self, _round: usize) {}
    /// Energy used during the round, in joules, if measured.
    fn end_round(&mut self, _round: usize) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct NoopSampler;

impl ResourceSampler for NoopSampler {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round number.
    pub round: usize,
    /// Mean local training loss per client (client-id order); `None` when diverged.
    pub train_loss: Vec<Option<f64>>,
    pub val: Vec<EvalMetrics>,
    /// The selection metric per client.
    pub val_metric: Vec<Option<f64>>,
    pub mean_val: Option<f64>,
    /// Squared distance of each client's non-norm parameters after local
    /// training to the round-start global model; `None` when diverged.
    pub sq_distance: Vec<Option<f64>>,
    pub elapsed_secs: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_joules: Option<f64>,
    pub diverged: Vec<usize>,
    pub yogi_clamps: u64,
}

fn opt_bits_eq(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Some(x), Some(y)) => x.to_bits() == y.to_bits(),
            (None, None) => true,
            _ => false,
        })
}

impl RoundRecord {
    /// Bitwise equality of every field except timing and energy.
    pub fn same_except_timing(&self, other: &RoundRecord) -> bool {
        let vals = |r: &RoundRecord| -> Vec<Option<f64>> {
            r.val
                .iter()
                .flat_map(|m| m.named().map(|(_, v)| v))
                .collect()
        };
        self.round == other.round
            && opt_bits_eq(&self.train_loss, &other.train_loss)
            && opt_bits_eq(&vals(self), &vals(other))
            && opt_bits_eq(&self.val_metric, &other.val_metric)
            && opt_bits_eq(&[self.mean_val], &[other.mean_val])
            && opt_bits_eq(&self.sq_distance, &other.sq_distance)
            && self.diverged == other.diverged
            && self.yogi_clamps == other.yogi_clamps
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: usize,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub selected_round: usize,
    pub best_mean_val: Option<f64>,
    /// Per-client test metrics of the selected round's models.
    pub test: Vec<ClientEval>,
    pub mean_test: BTreeMap<String, f64>,
    pub rounds: Vec<RoundRecord>,
    pub checkpoint_dirs: Vec<PathBuf>,
    pub elapsed_secs: f64,
    pub completed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExperimentResult {
    pub fn distances(&self) -> Vec<DistanceRow> {
        self.rounds
            .iter()
            .flat_map(|r| {
                r.sq_distance.iter().enumerate().filter_map(move |(k, d)| {
                    d.map(|sq_distance| DistanceRow {
                        round: r.round,
                        client_id: k,
                        sq_distance,
                    })
                })
            })
            .collect()
    }

    pub fn seed_record(&self) -> SeedRecord {
        SeedRecord {
            algorithm: self.algorithm.name().to_string(),
            seed: self.seed,
            selected_round: self.selected_round,
            test_metrics: self.mean_test.clone(),
            elapsed_secs: self.elapsed_secs,
            distances: self.distances(),
        }
    }
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<ClientDataset>> {
    let data = match &cfg.data {
        DataSource::Synthetic(spec) => generate(spec)?,
        DataSource::Manifest { path } => {
            let manifest = read_manifest(path)?;
            let data = load_manifest(path)?;
            if manifest.input_dim != cfg.model.input_dim
                || manifest.num_classes != cfg.model.num_classes
            {
                return Err(Error::SchemaMismatch(format!(
                    "manifest has {} features and {} classes, model expects {} and {}",
                    manifest.input_dim,
                    manifest.num_classes,
                    cfg.model.input_dim,
                    cfg.model.num_classes
                )));
            }
            data
        }
    };
    if data.len() != cfg.num_clients {
        return Err(Error::config(
            "num_clients",
            format!("{} configured, data holds {}", cfg.num_clients, data.len()),
        ));
    }
    Ok(data)
}

/// A running experiment that can be advanced one round at a time.
pub struct Experiment {
    cfg: ExperimentConfig,
    seed: u64,
    server: ServerState,
    clients: Vec<ClientState>,
    records: Vec<RoundRecord>,
    sampler: Box<dyn ResourceSampler>,
    checkpoints: Option<PathBuf>,
    best: Option<(usize, f64, Vec<ParamSet>)>,
    kept: Vec<PathBuf>,
}

impl Experiment {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let cfg = cfg.validated()?;
        let data = load_datasets(&cfg)?;
        Self::with_datasets(&cfg, seed, data)
    }

    /// Starts from explicit client datasets (ids must be `0..K`).
    pub fn with_datasets(
        cfg: &ExperimentConfig,
        seed: u64,
        datasets: Vec<ClientDataset>,
    ) -> Result<Self> {
        let cfg = cfg.validated()?;
        if datasets.len() != cfg.num_clients {
            return Err(Error::config(
                "num_clients",
                format!(
                    "{} configured, {} datasets given",
                    cfg.num_clients,
                    datasets.len()
                ),
            ));
        }
        if let Some((i, d)) = datasets.iter().enumerate().find(|(i, d)| d.client_id != *i) {
            return Err(Error::KeyMismatch(format!(
                "dataset {i} has client id {}",
                d.client_id
            )));
        }
        let w0 = cfg.model.init_params(&mut rng_for(&[seed, stream::INIT]))?;
        let server = init_server_state(&cfg.strategy, &w0);
        let clients = datasets
            .into_iter()
            .map(|dataset| {
                let dyn_mem = (cfg.strategy.algorithm == Algorithm::FedDyn)
                    .then(|| DynMemory::new(dataset.client_id, &w0));
                ClientState {
                    dataset,
                    params: w0.clone(),
                    adam: None,
                    dyn_mem,
                }
            })
            .collect();
        Ok(Experiment {
            cfg,
            seed,
            server,
            clients,
            records: Vec::new(),
            sampler: Box::new(NoopSampler),
            checkpoints: None,
            best: None,
            kept: Vec::new(),
        })
    }

    pub fn with_sampler(mut self, sampler: Box<dyn ResourceSampler>) -> Self {
        self.sampler = sampler;
        self
    }

    /// Writes per-round checkpoints under `dir` according to the config's policy.
    pub fn with_checkpoints(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoints = Some(dir.into());
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn checkpoint_dirs(&self) -> &[PathBuf] {
        &self.kept
    }

    /// Local training on every client in parallel, aggregation, broadcast,
    /// validation and (optionally) checkpointing.
    pub fn run_round(&mut self) -> Result<&RoundRecord> {
        let t = self.server.round;
        let started = Instant::now();
        self.sampler.begin_round(t + 1);
        let settings = LocalSettings::from_config(&self.cfg, self.seed);
        let outcomes: Vec<LocalOutcome> = self
            .clients
            .par_iter()
            .map(|c| run_local_training(c, settings, t))
            .collect::<Result<_>>()?;

        let w_t = self.server.global.clone();
        let mut sq_distance = Vec::with_capacity(outcomes.len());
        let mut diverged = Vec::new();
        for o in &outcomes {
            if o.update.diverged {
                diverged.push(o.update.client_id);
                sq_distance.push(None);
            } else {
                sq_distance.push(Some(l2_distance_excluding_norm(
                    &o.update.params_after,
                    &w_t,
                )?));
            }
        }
        let updates: Vec<ClientUpdate> = outcomes.iter().map(|o| o.update.clone()).collect();
        let next = server_aggregate(&self.cfg.strategy, &self.server, &updates)?;

        let fragment = next
            .global
            .restrict(&broadcast_names(&self.cfg.strategy, &next.global));
        let mut local_after = Vec::with_capacity(outcomes.len());
        for (client, o) in self.clients.iter_mut().zip(outcomes) {
            local_after.push(o.update.params_after.clone());
            client.params = o.update.params_after;
            client.params.overwrite_from(&fragment)?;
            client.adam = o.adam;
            client.dyn_mem = o.dyn_mem;
        }
        self.server = next;

        let (model, averaging, metric) = (
            &self.cfg.model,
            self.cfg.averaging,
            self.cfg.selection_metric,
        );
        let val: Vec<EvalMetrics> = self
            .clients
            .par_iter()
            .map(|c| evaluate(model, &c.params, &c.dataset.val, averaging))
            .collect::<Result<_>>()?;
        let val_metric: Vec<Option<f64>> = val.iter().map(|m| m.get(metric)).collect();
        let mean_val = mean_of(val_metric.iter().copied());
        let energy_joules = self.sampler.end_round(t + 1);
        if !diverged.is_empty() {
            warn!(
                "round {}: clients {diverged:?} diverged and were left out of aggregation",
                t + 1
            );
        }
        let record = RoundRecord {
            round: t + 1,
            train_loss: updates
                .iter()
                .map(|u| (!u.diverged).then_some(u.train_loss))
                .collect(),
            val,
            val_metric,
            mean_val,
            sq_distance,
            elapsed_secs: started.elapsed().as_secs_f64(),
            energy_joules,
            diverged,
            yogi_clamps: self.server.yogi_clamps,
        };

        let improved = match (&self.best, mean_val) {
            (None, _) => true,
            (Some((_, _, _)), None) => false,
            (Some((_, b, _)), Some(v)) => b.is_nan() || metric.better(v, *b),
        };
        if improved {
            let snapshot = self.clients.iter().map(|c| c.params.clone()).collect();
            self.best = Some((t + 1, mean_val.unwrap_or(f64::NAN), snapshot));
        }
        if let Some(dir) = self.checkpoints.clone() {
            self.write_checkpoint(&dir, t + 1, &w_t, &local_after)?;
        }
        self.records.push(record);
        Ok(self.records.last().expect("just pushed"))
    }

    fn write_checkpoint(
        &mut self,
        dir: &Path,
        round: usize,
        w_t: &ParamSet,
        local_after: &[ParamSet],
    ) -> Result<()> {
        let policy = self.cfg.checkpoints;
        if policy == CheckpointPolicy::None {
            return Ok(());
        }
        let rd = dir.join(format!("round_{round:04}"));
        write_params(&rd.join("global_start.params"), w_t)?;
        write_params(&rd.join("global.params"), &self.server.global)?;
        for (c, local) in self.clients.iter().zip(local_after) {
            let id = c.client_id();
            write_params(&rd.join(format!("client_{id:03}.local.params")), local)?;
            write_params(&rd.join(format!("client_{id:03}.params")), &c.params)?;
            if let Some(mem) = &c.dyn_mem {
                write_grads(
                    &rd.join(format!("client_{id:03}.dyn.grads")),
                    &mem.prev_grad,
                )?;
            }
        }
        self.kept.push(rd);
        if policy == CheckpointPolicy::BestAndLast {
            let best = self.best.as_ref().map(|b| b.0);
            let keep = |p: &PathBuf| {
                p.file_name().and_then(|n| n.to_str()).is_some_and(|n| {
                    n == format!("round_{round:04}")
                        || best.is_some_and(|b| n == format!("round_{b:04}"))
                })
            };
            let (stay, drop): (Vec<PathBuf>, Vec<PathBuf>) = self.kept.drain(..).partition(keep);
            for p in drop {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
            self.kept = stay;
        }
        Ok(())
    }

    /// Round with the best mean validation metric, earliest on ties.
    pub fn selected_round(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.0)
    }

    /// Test metrics of each client's model from the selected round.
    pub fn test_at_selected(&self) -> Result<Vec<ClientEval>> {
        let Some((_, _, snapshot)) = &self.best else {
            return Ok(Vec::new());
        };
        let (model, averaging) = (&self.cfg.model, self.cfg.averaging);
        self.clients
            .par_iter()
            .zip(snapshot.par_iter())
            .map(|(c, p)| {
                Ok(ClientEval {
                    client_id: c.client_id(),
                    metrics: evaluate(model, p, &c.dataset.test, averaging)?,
                })
            })
            .collect()
    }

    fn result(
        &self,
        completed: bool,
        error: Option<String>,
        elapsed: f64,
    ) -> Result<ExperimentResult> {
        let test = if completed {
            self.test_at_selected()?
        } else {
            Vec::new()
        };
        let mut mean_test = BTreeMap::new();
        for m in [
            SelectionMetric::Auroc,
            SelectionMetric::Auprc,
            SelectionMetric::Accuracy,
            SelectionMetric::Loss,
        ] {
            if let Some(v) = mean_of(test.iter().map(|c| c.metrics.get(m))) {
                mean_test.insert(m.name().to_string(), v);
            }
        }
        Ok(ExperimentResult {
            algorithm: self.cfg.strategy.algorithm,
            seed: self.seed,
            selection_metric: self.cfg.selection_metric,
            selected_round: self.selected_round().unwrap_or(0),
            best_mean_val: self
                .best
                .as_ref()
                .and_then(|b| (!b.1.is_nan()).then_some(b.1)),
            test,
            mean_test,
            rounds: self.records.clone(),
            checkpoint_dirs: self.kept.clone(),
            elapsed_secs: elapsed,
            completed,
            error,
        })
    }

    /// Runs the remaining rounds. On `AllClientsDiverged` the partial result
    /// is returned alongside the error.
    pub fn run_to_end(
        &mut self,
    ) -> std::result::Result<ExperimentResult, (Error, Option<ExperimentResult>)> {
        let mut elapsed: f64 = self.records.iter().map(|r| r.elapsed_secs).sum();
        let (alg, seed, rounds) = (self.cfg.strategy.algorithm, self.seed, self.cfg.rounds);
        while self.server.round < self.cfg.rounds {
            match self.run_round() {
                Ok(r) => {
                    elapsed += r.elapsed_secs;
                    info!(
                        "{} seed {} round {}/{}: mean val {:?}",
                        alg, seed, r.round, rounds, r.mean_val
                    );
                }
                Err(e) => {
                    let partial = self.result(false, Some(e.to_string()), elapsed).ok();
                    return Err((e, partial));
                }
            }
        }
        self.result(true, None, elapsed).map_err(|e| (e, None))
    }
}

/// Round log rows: `round,client_id,split,metric,value`.
pub fn round_log_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let enc = |e: csv::Error| Error::SchemaMismatch(format!("csv encoding: {e}"));
    w.write_record(["round", "client_id", "split", "metric", "value"])
        .map_err(enc)?;
    for r in &result.rounds {
        let round = r.round.to_string();
        for (k, loss) in r.train_loss.iter().enumerate() {
            if let Some(l) = loss {
                w.write_record([&round, &k.to_string(), "train", "loss", &l.to_string()])
                    .map_err(enc)?;
            }
        }
        for (k, m) in r.val.iter().enumerate() {
            for (name, v) in m.named() {
                if let Some(v) = v {
                    w.write_record([&round, &k.to_string(), "val", name, &v.to_string()])
                        .map_err(enc)?;
                }
            }
        }
        for (k, d) in r.sq_distance.iter().enumerate() {
            if let Some(d) = d {
                w.write_record([
                    &round,
                    &k.to_string(),
                    "train",
                    "sq_distance",
                    &d.to_string(),
                ])
                .map_err(enc)?;
            }
        }
        for k in &r.diverged {
            w.write_record([&round, &k.to_string(), "train", "diverged", "1"])
                .map_err(enc)?;
        }
    }
    let sel = result.selected_round.to_string();
    for c in &result.test {
        for (name, v) in c.metrics.named() {
            if let Some(v) = v {
                w.write_record([&sel, &c.client_id.to_string(), "test", name, &v.to_string()])
                    .map_err(enc)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<memory>", e))?;
    w.into_inner()
        .map_err(|e| Error::SchemaMismatch(e.to_string()))
}

pub fn timing_csv(result: &ExperimentResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let enc = |e: csv::Error| Error::SchemaMismatch(format!("csv encoding: {e}"));
    w.write_record(["round", "elapsed_secs", "energy_joules"])
        .map_err(enc)?;
    for r in &result.rounds {
        let energy = r.energy_joules.map(|e| e.to_string()).unwrap_or_default();
        w.write_record([r.round.to_string(), r.elapsed_secs.to_string(), energy])
            .map_err(enc)?;
    }
    w.flush().map_err(|e| Error::io("<memory>", e))?;
    w.into_inner()
        .map_err(|e| Error::SchemaMismatch(e.to_string()))
}

#[derive(Serialize)]
struct Summary<'a> {
    format: &'static str,
    version: u32,
    #[serde(flatten)]
    result: &'a ExperimentResult,
    config: &'a ExperimentConfig,
}

/// `summary.json`, `rounds.csv`, `distances.csv`, `timing.csv` and the
/// resolved config under `dir`.
pub fn write_result(dir: &Path, cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<()> {
    let summary = Summary {
        format: "fedsim-result",
        version: 1,
        result,
        config: cfg,
    };
    write_atomic(
        &dir.join("summary.json"),
        &serde_json::to_vec_pretty(&summary)?,
    )?;
    write_atomic(&dir.join("rounds.csv"), &round_log_csv(result)?)?;
    write_atomic(
        &dir.join("distances.csv"),
        &distance_csv(&result.distances())?,
    )?;
    write_atomic(&dir.join("timing.csv"), &timing_csv(result)?)?;
    write_atomic(&dir.join("config.resolved.toml"), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

#[derive(Deserialize)]
struct SummaryIn {
    #[serde(flatten)]
    result: ExperimentResult,
    config: ExperimentConfig,
}

pub fn read_result(dir: &Path) -> Result<(ExperimentConfig, ExperimentResult)> {
    let p = dir.join("summary.json");
    let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let s: SummaryIn = serde_json::from_slice(&bytes)?;
    Ok((s.config, s.result))
}

/// Runs one seed end to end. With `out`, results (or partial results on
/// divergence of every client) are written there and checkpoints go to
/// `out/checkpoints`.
/// Every directory under `root` (itself included) holding a `summary.json`, sorted.
pub fn find_result_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("summary.json").is_file() {
            found.push(dir.clone());
        }
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() && path.file_name().is_some_and(|n| n != "checkpoints") {
                stack.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn load_seed_records(root: &Path) -> Result<Vec<SeedRecord>> {
    let dirs = find_result_dirs(root)?;
    if dirs.is_empty() {
        return Err(Error::SchemaMismatch(format!(
            "no summary.json under {}",
            root.display()
        )));
    }
    dirs.iter()
        .map(|d| Ok(read_result(d)?.1.seed_record()))
        .collect()
}

/// Per-seed values of `metric`, one group per algorithm found in each root.
/// A group whose name repeats an earlier one is suffixed with its root.
pub fn metric_groups(roots: &[PathBuf], metric: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for root in roots {
        let mut by_alg: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
        for r in load_seed_records(root)? {
            let v = r.test_metrics.get(metric).copied().ok_or_else(|| {
                Error::config(
                    "metric",
                    format!("`{metric}` missing for {} seed {}", r.algorithm, r.seed),
                )
            })?;
            by_alg.entry(r.algorithm).or_default().push((r.seed, v));
        }
        for (alg, mut vals) in by_alg {
            vals.sort_by_key(|&(seed, _)| seed);
            let mut name = alg;
            if groups.iter().any(|(n, _)| *n == name) {
                name = format!("{name}@{}", root.display());
            }
            groups.push((name, vals.into_iter().map(|(_, v)| v).collect()));
        }
    }
    Ok(groups)
}

/// Pairwise significance over the groups found in `roots`.
pub fn compare_results(roots: &[PathBuf], spec: &SignificanceSpec) -> Result<Vec<PairwiseTest>> {
    let groups = metric_groups(roots, &spec.metric)?;
    significance_matrix(&groups, spec.method, spec.one_sided, spec.higher_is_better)
}

pub fn run_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mut exp = Experiment::new(cfg, seed)?;
    if let Some(dir) = out {
        exp = exp.with_checkpoints(dir.join("checkpoints"));
    }
    let resolved = exp.config().clone();
    match exp.run_to_end() {
        Ok(r) => {
            if let Some(dir) = out {
                write_result(dir, &resolved, &r)?;
            }
            Ok(r)
        }
        Err((e, partial)) => {
            if let (Some(dir), Some(p)) = (out, partial) {
                write_result(dir, &resolved, &p)?;
            }
            Err(e)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub local_epochs: usize,
    pub rounds: usize,
    pub seed: u64,
    pub result: ExperimentResult,
}

/// One experiment per `(E, T)` split and seed, all sharing the same budget.
pub fn sweep_local_epochs(
    cfg: &ExperimentConfig,
    budget: usize,
    splits: &[(usize, usize)],
    seeds: &[u64],
) -> Result<Vec<SweepRow>> {
    for (i, &(e, t)) in splits.iter().enumerate() {
        if e == 0 || e * t != budget {
            return Err(Error::config(
                format!("splits[{i}]"),
                format!("{e} × {t} = {} does not match budget {budget}", e * t),
            ));
        }
    }
    let jobs: Vec<(usize, usize, u64)> = splits
        .iter()
        .flat_map(|&(e, t)| seeds.iter().map(move |&s| (e, t, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(e, t, seed)| {
            let mut c = cfg.clone();
            c.local_epochs = e;
            c.rounds = t;
            c.total_budget = Some(budget);
            c.checkpoints = CheckpointPolicy::None;
            Ok(SweepRow {
                local_epochs: e,
                rounds: t,
                seed,
                result: run_experiment(&c, seed, None)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PartitionKind, PartitionSpec};
    use crate::nn::{LayerSpec, LossKind};
    use crate::presets;

    fn tiny(alg: Algorithm, kind: PartitionKind) -> ExperimentConfig {
        let mut cfg = match kind {
            PartitionKind::LabelSkew => presets::label_skew_benchmark(alg),
            _ => presets::feature_shift_benchmark(alg),
        };
        if let DataSource::Synthetic(s) = &mut cfg.data {
            s.sizes = vec![120, 100, 90, 80, 70];
        }
        cfg.rounds = 3;
        cfg.total_budget = None;
        cfg.checkpoints = CheckpointPolicy::None;
        cfg
    }

    #[test]
    fn trailing_singleton_is_folded() {
        let mut rng = rng_for(&[1]);
        let b = epoch_batches(9, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(epoch_batches(1, 4, &mut rng), vec![vec![0]]);
    }

    #[test]
    fn single_batch_epoch_is_one_sgd_step() {
        let spec = ModelSpec {
            input_dim: 3,
            layers: vec![LayerSpec::Dense { width: 2 }, LayerSpec::SoftmaxCeHead],
            loss: LossKind::CrossEntropy,
            num_classes: 2,
        };
        let data = PartitionSpec {
            kind: PartitionKind::Iid,
            num_clients: 1,
            num_classes: 2,
            input_dim: 3,
            sizes: vec![20],
            skew_concentration: 1.0,
            shift_scale: 0.0,
            class_separation: 1.5,
            min_per_class: 0,
            seed: 4,
        };
        let ds = generate(&data).unwrap().remove(0);
        let w0 = spec.init_params(&mut rng_for(&[9])).unwrap();
        let strategy = StrategyConfig::new(Algorithm::FedAvg);
        let client = ClientState {
            dataset: ds.clone(),
            params: w0.clone(),
            adam: None,
            dyn_mem: None,
        };
        let s = LocalSettings {
            model: &spec,
            strategy: &strategy,
            eta: 0.1,
            optimizer: LocalOptimizer::Sgd,
            batch_size: 64,
            local_epochs: 1,
            seed: 0,
        };
        let out = run_local_training(&client, s, 0).unwrap();
        // hand step: one batch covering the whole (shuffled) train split
        let mut rng = rng_for(&[0, stream::BATCHES, 0, 0]);
        let idx = epoch_batches(ds.train.size(), 64, &mut rng).remove(0);
        let fwd = model_forward(&spec, &w0, &ds.train.select(&idx), Mode::Train).unwrap();
        let g = model_backward(&spec, &w0, &fwd.cache).unwrap();
        let mut expect = w0.clone();
        for (name, gv) in g.iter() {
            let t = expect.tensor_mut(name).unwrap();
            for (w, d) in t.data_mut().iter_mut().zip(gv.data()) {
                *w -= 0.1 * d;
            }
        }
        assert!(out.update.params_after.bitwise_eq(&expect));
        assert!((out.update.train_loss - fwd.loss).abs() == 0.0);
    }

    #[test]
    fn fedbn_keeps_norm_entries_local() {
        let cfg = tiny(Algorithm::FedBn, PartitionKind::FeatureShift);
        let mut exp = Experiment::new(&cfg, 0).unwrap();
        exp.run_round().unwrap();
        let norm_before: Vec<ParamSet> = exp
            .clients()
            .iter()
            .map(|c| {
                let names = c
                    .params
                    .iter()
                    .filter(|(_, p)| p.meta.tag == crate::params::NormTag::Norm);
                c.params.restrict(&names.map(|(n, _)| n.clone()).collect())
            })
            .collect();
        let broadcast = exp.server().global.restrict(&broadcast_names(
            &exp.config().strategy,
            &exp.server().global,
        ));
        assert!(broadcast.names().iter().all(|n| !n.contains(".bn.")));
        // a client whose start fragment omits norm names keeps them bitwise
        for (c, before) in exp.clients().iter().zip(&norm_before) {
            let mut p = c.params.clone();
            p.overwrite_from(&broadcast).unwrap();
            assert!(p.restrict(&before.names()).bitwise_eq(before));
        }
    }

    #[test]
    fn round_records_and_selection() {
        let cfg = tiny(Algorithm::FedAvg, PartitionKind::FeatureShift);
        let r = run_experiment(&cfg, 0, None).unwrap();
        assert_eq!(r.rounds.len(), 3);
        assert!(r.completed);
        assert!(r.rounds.iter().all(|x| x.elapsed_secs > 0.0));
        assert!(r
            .rounds
            .iter()
            .flat_map(|x| x.sq_distance.iter())
            .all(|d| d.unwrap() >= 0.0));
        let best = r
            .rounds
            .iter()
            .map(|x| x.mean_val.unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let first = r
            .rounds
            .iter()
            .find(|x| x.mean_val.unwrap() == best)
            .unwrap()
            .round;
        assert_eq!(r.selected_round, first);
        assert_eq!(r.test.len(), 5);

        let mut one = cfg.clone();
        one.rounds = 1;
        assert_eq!(run_experiment(&one, 0, None).unwrap().selected_round, 1);
    }

    #[test]
    fn determinism_across_runs() {
        for alg in [Algorithm::FedDyn, Algorithm::FedYogi, Algorithm::FedPxn] {
            let cfg = tiny(alg, PartitionKind::LabelSkew);
            let a = run_experiment(&cfg, 5, None).unwrap();
            let b = run_experiment(&cfg, 5, None).unwrap();
            for (x, y) in a.rounds.iter().zip(&b.rounds) {
                assert!(x.same_except_timing(y));
            }
        }
    }

    #[test]
    fn sweep_budget_checks() {
        let cfg = tiny(Algorithm::FedAvg, PartitionKind::FeatureShift);
        let err = sweep_local_epochs(&cfg, 100, &[(1, 100), (3, 40)], &[0]).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "splits[1]"));
        let rows = sweep_local_epochs(&cfg, 4, &[(1, 4), (2, 2), (4, 1)], &[0, 1]).unwrap();
        assert_eq!(rows.len(), 6);
    }

    #[test]
    fn result_files_round_trip() {
        let cfg = tiny(Algorithm::FedAdam, PartitionKind::FeatureShift);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.checkpoints = CheckpointPolicy::BestAndLast;
        let r = run_experiment(&cfg2, 1, Some(dir.path())).unwrap();
        let (c, back) = read_result(dir.path()).unwrap();
        assert_eq!(c, cfg2.validated().unwrap());
        assert_eq!(back.selected_round, r.selected_round);
        let rounds = std::fs::read_dir(dir.path().join("checkpoints"))
            .unwrap()
            .count();
        assert!((1..=2).contains(&rounds));
        let log = std::fs::read_to_string(dir.path().join("rounds.csv")).unwrap();
        assert!(log.starts_with("round,client_id,split,metric,value\n"));
        let d = std::fs::read_to_string(dir.path().join("distances.csv")).unwrap();
        assert_eq!(d.lines().count(), 1 + 3 * 5);
    }
}
