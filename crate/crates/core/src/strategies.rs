//! The eight aggregation strategies.
//!
//! Strategies act at two points of a round: on the client, by modifying the
//! gradient of the local objective ([`local_loss_grad`]), and on the server,
//! by turning client results into the next global model ([`server_aggregate`]).
//!
//! | algorithm  | local objective                         | server rule                         |
//! |------------|-----------------------------------------|-------------------------------------|
//! | fedavg     | F_k                                     | n_k/n average                       |
//! | fedprox    | F_k + μ/2‖w − w_t‖²                     | n_k/n average                       |
//! | fedbn      | F_k                                     | average, norm entries kept local    |
//! | fedpxn     | F_k + μ/2‖w∖norm − w_t∖norm‖²           | average, norm entries kept local    |
//! | fedadam    | F_k                                     | adaptive step on pseudo-gradient    |
//! | fedadagrad | F_k                                     | adaptive step on pseudo-gradient    |
//! | fedyogi    | F_k                                     | adaptive step on pseudo-gradient    |
//! | feddyn     | F_k − ⟨∇F_k(prev), w⟩ + α/2‖w − w_t‖²   | n_k/n average                       |

use std::collections::BTreeSet;
use std::fmt;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{
    partition_names, weighted_average, ClientWeight, ExclusionPolicy, GradSet, NormTag, ParamSet,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    FedProx,
    FedBn,
    FedPxn,
    FedAdam,
    FedAdagrad,
    FedYogi,
    FedDyn,
}

impl Algorithm {
    pub const ALL: [Algorithm; 8] = [
        Algorithm::FedAvg,
        Algorithm::FedProx,
        Algorithm::FedBn,
        Algorithm::FedPxn,
        Algorithm::FedAdam,
        Algorithm::FedAdagrad,
        Algorithm::FedYogi,
        Algorithm::FedDyn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::FedBn => "fedbn",
            Algorithm::FedPxn => "fedpxn",
            Algorithm::FedAdam => "fedadam",
            Algorithm::FedAdagrad => "fedadagrad",
            Algorithm::FedYogi => "fedyogi",
            Algorithm::FedDyn => "feddyn",
        }
    }

    pub fn is_fedopt(self) -> bool {
        matches!(
            self,
            Algorithm::FedAdam | Algorithm::FedAdagrad | Algorithm::FedYogi
        )
    }

    /// FedBN and FedPxN keep (some) normalization entries on the client.
    pub fn personalizes_norm(self) -> bool {
        matches!(self, Algorithm::FedBn | Algorithm::FedPxn)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How FedOpt servers weight pseudo-gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoGradWeighting {
    #[default]
    DataSize,
    Uniform,
}

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub algorithm: Algorithm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<ExclusionPolicy>,
    #[serde(default)]
    pub pseudo_grad_weighting: PseudoGradWeighting,
}

impl StrategyConfig {
    pub fn new(algorithm: Algorithm) -> Self {
        StrategyConfig {
            algorithm,
            mu: None,
            alpha: None,
            eta_g: None,
            beta1: None,
            beta2: None,
            gamma: None,
            policy: None,
            pseudo_grad_weighting: PseudoGradWeighting::DataSize,
        }
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = Some(mu);
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_fedopt(mut self, eta_g: f64, beta1: f64, beta2: f64, gamma: f64) -> Self {
        self.eta_g = Some(eta_g);
        self.beta1 = Some(beta1);
        self.beta2 = Some(beta2);
        self.gamma = Some(gamma);
        self
    }

    pub fn with_policy(mut self, policy: ExclusionPolicy) -> Self {
        self.policy = Some(policy);
        self
    }

    /// Checks required fields and ranges; returns a copy with defaults filled in.
    pub fn validated(&self) -> Result<StrategyConfig> {
        let alg = self.algorithm;
        let mut out = self.clone();

        let check = |name: &str, v: Option<f64>, ok: fn(f64) -> bool, range: &str| -> Result<()> {
            match v {
                Some(x) if !(x.is_finite() && ok(x)) => Err(Error::config(
                    format!("strategy.{name}"),
                    format!("{x} must be {range}"),
                )),
                _ => Ok(()),
            }
        };
        check("mu", self.mu, |x| x >= 0.0, ">= 0")?;
        check("alpha", self.alpha, |x| x > 0.0, "> 0")?;
        check("eta_g", self.eta_g, |x| x > 0.0, "> 0")?;
        check(
            "beta1",
            self.beta1,
            |x| (0.0..1.0).contains(&x),
            "in [0, 1)",
        )?;
        check(
            "beta2",
            self.beta2,
            |x| (0.0..1.0).contains(&x),
            "in [0, 1)",
        )?;
        check("gamma", self.gamma, |x| x > 0.0, "> 0")?;

        let require = |name: &str, v: Option<f64>| -> Result<()> {
            if v.is_none() {
                return Err(Error::config(
                    format!("strategy.{name}"),
                    format!("required by {alg}"),
                ));
            }
            Ok(())
        };
        match alg {
            Algorithm::FedProx | Algorithm::FedPxn => require("mu", self.mu)?,
            Algorithm::FedDyn => require("alpha", self.alpha)?,
            a if a.is_fedopt() => {
                require("eta_g", self.eta_g)?;
                require("gamma", self.gamma)?;
                out.beta1.get_or_insert(DEFAULT_BETA1);
                out.beta2.get_or_insert(DEFAULT_BETA2);
            }
            _ => {}
        }

        if alg.personalizes_norm() {
            match self.policy {
                None => out.policy = Some(ExclusionPolicy::AllNormExcluded),
                Some(ExclusionPolicy::None) => {
                    return Err(Error::config(
                        "strategy.policy",
                        format!("{alg} needs a norm-exclusion policy"),
                    ))
                }
                Some(_) => {}
            }
        } else {
            match self.policy {
                None | Some(ExclusionPolicy::None) => out.policy = Some(ExclusionPolicy::None),
                Some(p) => {
                    return Err(Error::config(
                        "strategy.policy",
                        format!("{alg} aggregates every entry; policy {p:?} is not allowed"),
                    ))
                }
            }
        }
        Ok(out)
    }

    pub fn mu(&self) -> f64 {
        self.mu.unwrap_or(0.0)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(0.0)
    }

    pub fn eta_g(&self) -> f64 {
        self.eta_g.unwrap_or(1.0)
    }

    pub fn beta1(&self) -> f64 {
        self.beta1.unwrap_or(DEFAULT_BETA1)
    }

    pub fn beta2(&self) -> f64 {
        self.beta2.unwrap_or(DEFAULT_BETA2)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(0.0)
    }

    pub fn policy(&self) -> ExclusionPolicy {
        self.policy.unwrap_or_default()
    }
}

/// FedDyn's per-client memory of its previous local gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DynMemory {
    pub client_id: usize,
    pub prev_grad: GradSet,
    pub initialized: bool,
}

impl DynMemory {
    pub fn new(client_id: usize, params: &ParamSet) -> Self {
        DynMemory {
            client_id,
            prev_grad: GradSet::zeros_like(params),
            initialized: false,
        }
    }
}

/// Replaces the remembered gradient with the mean base gradient of the pass just finished.
pub fn update_dyn_memory(mem: &DynMemory, epoch_mean_grad: &GradSet) -> Result<DynMemory> {
    if mem.prev_grad.names() != epoch_mean_grad.names() {
        return Err(Error::KeyMismatch(format!(
            "dyn memory of client {} vs supplied gradient",
            mem.client_id
        )));
    }
    Ok(DynMemory {
        client_id: mem.client_id,
        prev_grad: epoch_mean_grad.clone(),
        initialized: true,
    })
}

/// Adds the strategy's regularizer gradient to `grads` in place.
pub fn apply_local_regularizer(
    cfg: &StrategyConfig,
    grads: &mut GradSet,
    w_local: &ParamSet,
    w_global: &ParamSet,
    dyn_mem: Option<&DynMemory>,
) -> Result<()> {
    let (coef, non_norm_only, linear) = match cfg.algorithm {
        Algorithm::FedProx => (cfg.mu(), false, None),
        Algorithm::FedPxn => (cfg.mu(), true, None),
        Algorithm::FedDyn => {
            let mem = dyn_mem.ok_or(Error::MissingDynMemory)?;
            (cfg.alpha(), false, Some(&mem.prev_grad))
        }
        _ => return Ok(()),
    };
    let names: Vec<String> = grads.names().into_iter().collect();
    for name in names {
        let local = w_local
            .get(&name)
            .ok_or_else(|| Error::KeyMismatch(format!("`{name}` in local")))?;
        if non_norm_only && local.meta.tag == NormTag::Norm {
            continue;
        }
        let global = w_global.tensor(&name)?;
        let prev = match linear {
            Some(p) => Some(
                p.get(&name)
                    .ok_or_else(|| Error::KeyMismatch(format!("`{name}` in dyn memory")))?,
            ),
            None => None,
        };
        let g = grads.get_mut(&name).expect("listed name");
        if !(g.same_shape(&local.value) && g.same_shape(global)) {
            return Err(Error::ShapeMismatch(format!("`{name}`")));
        }
        let gd = g.data_mut();
        if let Some(prev) = prev {
            for (x, &p) in gd.iter_mut().zip(prev.data()) {
                *x -= p;
            }
        }
        // μ = 0 must leave the gradient bit-identical
        if coef != 0.0 {
            for ((x, &wl), &wg) in gd.iter_mut().zip(local.value.data()).zip(global.data()) {
                *x += coef * (wl - wg);
            }
        }
    }
    Ok(())
}

/// Gradient of the strategy's local objective given the plain loss gradient.
pub fn local_loss_grad(
    cfg: &StrategyConfig,
    base_grad: &GradSet,
    w_local: &ParamSet,
    w_global: &ParamSet,
    dyn_mem: Option<&DynMemory>,
) -> Result<GradSet> {
    let mut g = base_grad.clone();
    apply_local_regularizer(cfg, &mut g, w_local, w_global, dyn_mem)?;
    Ok(g)
}

/// Adaptive server optimizer accumulators (m_t, v_t), over trainable entries.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptiveState {
    pub m: GradSet,
    pub v: GradSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub global: ParamSet,
    pub adaptive: Option<AdaptiveState>,
    pub round: usize,
    /// Number of FedYogi second-moment entries clamped at γ² so far.
    pub yogi_clamps: u64,
}

pub fn init_server_state(cfg: &StrategyConfig, w0: &ParamSet) -> ServerState {
    let adaptive = cfg.algorithm.is_fedopt().then(|| {
        let g = cfg.gamma();
        AdaptiveState {
            m: GradSet::zeros_like(w0),
            v: GradSet::filled_like(w0, g * g),
        }
    });
    ServerState {
        global: w0.clone(),
        adaptive,
        round: 0,
        yogi_clamps: 0,
    }
}

/// The part of the global model each client overwrites at the start of a round.
pub fn broadcast_names(cfg: &StrategyConfig, global: &ParamSet) -> BTreeSet<String> {
    partition_names(global, cfg.policy()).1
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params_after: ParamSet,
    pub n_k: usize,
    pub train_loss: f64,
    pub diverged: bool,
}

/// `Σ w_k (set_k − base)` over the trainable names of `base`.
fn weighted_pseudo_gradient(
    base: &ParamSet,
    sets: &[&ParamSet],
    weights: &[ClientWeight],
) -> Result<GradSet> {
    let mut out = GradSet::new();
    for name in base.trainable_names() {
        let b = base.tensor(name)?;
        let mut acc = vec![0.0; b.len()];
        for (k, (set, w)) in sets.iter().zip(weights).enumerate() {
            let x = set.tensor(name)?;
            if !x.same_shape(b) {
                return Err(Error::ShapeMismatch(format!("`{name}`")));
            }
            for ((a, &xv), &bv) in acc.iter_mut().zip(x.data()).zip(b.data()) {
                let term = w.weight * (xv - bv);
                if k == 0 {
                    *a = term;
                } else {
                    *a += term;
                }
            }
        }
        out.insert(name.clone(), Tensor::new(b.shape().to_vec(), acc)?);
    }
    Ok(out)
}

/// Produces the next server state from one round of client updates.
///
/// Diverged updates are dropped; the remaining ones are processed in client-id
/// order so the result does not depend on arrival order.
pub fn server_aggregate(
    cfg: &StrategyConfig,
    server: &ServerState,
    updates: &[ClientUpdate],
) -> Result<ServerState> {
    let mut live: Vec<&ClientUpdate> = updates.iter().filter(|u| !u.diverged).collect();
    if live.is_empty() {
        return Err(Error::AllClientsDiverged(server.round + 1));
    }
    live.sort_by_key(|u| u.client_id);
    let sizes: Vec<(usize, usize)> = live.iter().map(|u| (u.client_id, u.n_k)).collect();
    let weights = ClientWeight::from_sizes(&sizes);
    let sets: Vec<&ParamSet> = live.iter().map(|u| &u.params_after).collect();
    for s in &sets {
        server.global.check_keying(s)?;
    }

    let mut next = server.clone();
    next.round += 1;

    if !cfg.algorithm.is_fedopt() {
        // Excluded names are averaged too, but only as the server's copy; they
        // are never broadcast (see `broadcast_names`).
        next.global = weighted_average(&sets, &weights, &server.global.names())?;
        return Ok(next);
    }

    let state = server
        .adaptive
        .as_ref()
        .ok_or(Error::UninitializedOptState)?;
    let pg_weights = match cfg.pseudo_grad_weighting {
        PseudoGradWeighting::DataSize => weights.clone(),
        PseudoGradWeighting::Uniform => ClientWeight::uniform(&sizes),
    };
    let delta = weighted_pseudo_gradient(&server.global, &sets, &pg_weights)?;
    let (b1, b2, gamma, eta_g) = (cfg.beta1(), cfg.beta2(), cfg.gamma(), cfg.eta_g());

    let m = state.m.zip_map(&delta, |m, d| b1 * m + (1.0 - b1) * d)?;
    let floor = gamma * gamma;
    let mut clamps = 0u64;
    let v = match cfg.algorithm {
        Algorithm::FedAdam => state
            .v
            .zip_map(&delta, |v, d| b2 * v + (1.0 - b2) * d * d)?,
        Algorithm::FedAdagrad => state.v.zip_map(&delta, |v, d| v + d * d)?,
        Algorithm::FedYogi => {
            let raw = state.v.zip_map(&delta, |v, d| {
                let d2 = d * d;
                v - (1.0 - b2) * d2 * crate::params::sign(v - d2)
            })?;
            clamps = raw
                .iter()
                .map(|(_, t)| t.data().iter().filter(|&&x| x < floor).count() as u64)
                .sum();
            raw.map(|x| x.max(floor))
        }
        _ => unreachable!("fedopt family"),
    };
    if clamps > 0 {
        debug!("fedyogi: clamped {clamps} second-moment entries at gamma^2");
    }

    let step = m.zip_map(&v, |m, v| eta_g * m / (v.sqrt() + gamma))?;
    let stats: BTreeSet<String> = server
        .global
        .iter()
        .filter(|(_, p)| !p.meta.trainable())
        .map(|(n, _)| n.clone())
        .collect();
    let mut global = server.global.clone();
    global.add_scaled(&step, 1.0)?;
    if !stats.is_empty() {
        global.overwrite_from(&weighted_average(&sets, &weights, &stats)?)?;
    }

    next.global = global;
    next.adaptive = Some(AdaptiveState { m, v });
    next.yogi_clamps += clamps;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamMeta, ParamRole};

    fn scalar(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "w",
            Tensor::vector(vec![w]),
            ParamMeta::dense(ParamRole::Weight),
        );
        p
    }

    fn grad(g: f64) -> GradSet {
        let mut s = GradSet::new();
        s.insert("w", Tensor::vector(vec![g]));
        s
    }

    fn update(id: usize, p: ParamSet, n_k: usize) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params_after: p,
            n_k,
            train_loss: 0.0,
            diverged: false,
        }
    }

    #[test]
    fn fedprox_regularizer() {
        let cfg = StrategyConfig::new(Algorithm::FedProx).with_mu(0.1);
        let g = local_loss_grad(&cfg, &grad(0.3), &scalar(2.0), &scalar(1.0), None).unwrap();
        assert!((g.get("w").unwrap().data()[0] - 0.4).abs() < 1e-15);

        let zero = StrategyConfig::new(Algorithm::FedProx).with_mu(0.0);
        let base = grad(-0.0);
        let g = local_loss_grad(&zero, &base, &scalar(2.0), &scalar(1.0), None).unwrap();
        assert!(g.bitwise_eq(&base));
    }

    #[test]
    fn fedpxn_skips_norm_entries() {
        let mut local = ParamSet::new();
        local.insert(
            "d",
            Tensor::vector(vec![3.0]),
            ParamMeta::dense(ParamRole::Weight),
        );
        local.insert(
            "n",
            Tensor::vector(vec![5.0]),
            ParamMeta::norm(ParamRole::Gain, false),
        );
        let mut global = local.clone();
        global.set_tensor("d", Tensor::vector(vec![1.0])).unwrap();
        global.set_tensor("n", Tensor::vector(vec![1.0])).unwrap();
        let mut base = GradSet::new();
        base.insert("d", Tensor::vector(vec![0.0]));
        base.insert("n", Tensor::vector(vec![0.0]));
        let cfg = StrategyConfig::new(Algorithm::FedPxn).with_mu(0.5);
        let g = local_loss_grad(&cfg, &base, &local, &global, None).unwrap();
        assert_eq!(g.get("d").unwrap().data(), &[1.0]);
        assert_eq!(g.get("n").unwrap().data(), &[0.0]);
    }

    #[test]
    fn feddyn_needs_memory_and_uses_it() {
        let cfg = StrategyConfig::new(Algorithm::FedDyn).with_alpha(0.5);
        assert!(matches!(
            local_loss_grad(&cfg, &grad(1.0), &scalar(2.0), &scalar(1.0), None),
            Err(Error::MissingDynMemory)
        ));
        let mem = DynMemory::new(0, &scalar(0.0));
        let mem = update_dyn_memory(&mem, &grad(0.25)).unwrap();
        assert!(mem.initialized);
        let g = local_loss_grad(&cfg, &grad(1.0), &scalar(2.0), &scalar(1.0), Some(&mem)).unwrap();
        assert!((g.get("w").unwrap().data()[0] - (1.0 - 0.25 + 0.5)).abs() < 1e-15);

        let zero = update_dyn_memory(&mem, &grad(0.0)).unwrap();
        let g = local_loss_grad(&cfg, &grad(1.0), &scalar(2.0), &scalar(1.0), Some(&zero)).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[1.5]);
    }

    #[test]
    fn fedavg_single_client_is_exact() {
        let cfg = StrategyConfig::new(Algorithm::FedAvg).validated().unwrap();
        let s = init_server_state(&cfg, &scalar(0.0));
        let p = scalar(1.0 / 3.0);
        let next = server_aggregate(&cfg, &s, &[update(3, p.clone(), 10)]).unwrap();
        assert!(next.global.bitwise_eq(&p));
        assert_eq!(next.round, 1);
        assert!(next.adaptive.is_none());
    }

    #[test]
    fn fedadagrad_scalar_step() {
        let cfg = StrategyConfig::new(Algorithm::FedAdagrad)
            .with_fedopt(1.0, 0.9, 0.99, 0.01)
            .validated()
            .unwrap();
        let s = init_server_state(&cfg, &scalar(0.0));
        assert_eq!(
            s.adaptive.as_ref().unwrap().v.get("w").unwrap().data(),
            &[1e-4]
        );
        let next = server_aggregate(&cfg, &s, &[update(0, scalar(1.0), 5)]).unwrap();
        let st = next.adaptive.as_ref().unwrap();
        assert!((st.v.get("w").unwrap().data()[0] - 1.0001).abs() < 1e-15);
        assert!((st.m.get("w").unwrap().data()[0] - 0.1).abs() < 1e-15);
        let w = next.global.tensor("w").unwrap().data()[0];
        assert!((w - 0.1 / (1.0001f64.sqrt() + 0.01)).abs() < 1e-15);
        assert!((w - 0.0990).abs() < 1e-4);
    }

    #[test]
    fn fedyogi_fixpoint_when_v_equals_delta_squared() {
        let cfg = StrategyConfig::new(Algorithm::FedYogi)
            .with_fedopt(1.0, 0.9, 0.99, 0.01)
            .validated()
            .unwrap();
        let mut s = init_server_state(&cfg, &scalar(0.0));
        s.adaptive.as_mut().unwrap().v = grad(0.25);
        let next = server_aggregate(&cfg, &s, &[update(0, scalar(0.5), 5)]).unwrap();
        assert_eq!(next.adaptive.unwrap().v.get("w").unwrap().data(), &[0.25]);
    }

    #[test]
    fn fedadam_init_and_idempotence() {
        let cfg = StrategyConfig::new(Algorithm::FedAdam)
            .with_fedopt(0.1, 0.9, 0.99, 0.1)
            .validated()
            .unwrap();
        let w0 = scalar(0.7);
        let s = init_server_state(&cfg, &w0);
        assert!((s.adaptive.as_ref().unwrap().v.get("w").unwrap().data()[0] - 0.01).abs() < 1e-17);
        let next = server_aggregate(
            &cfg,
            &s,
            &[update(0, w0.clone(), 1), update(1, w0.clone(), 2)],
        )
        .unwrap();
        assert!(next.global.bitwise_eq(&w0));
    }

    #[test]
    fn fedopt_without_state_errors() {
        let cfg = StrategyConfig::new(Algorithm::FedAdam)
            .with_fedopt(0.1, 0.9, 0.99, 0.1)
            .validated()
            .unwrap();
        let mut s = init_server_state(&cfg, &scalar(0.0));
        s.adaptive = None;
        assert!(matches!(
            server_aggregate(&cfg, &s, &[update(0, scalar(1.0), 1)]),
            Err(Error::UninitializedOptState)
        ));
    }

    #[test]
    fn diverged_updates_are_dropped() {
        let cfg = StrategyConfig::new(Algorithm::FedAvg).validated().unwrap();
        let s = init_server_state(&cfg, &scalar(0.0));
        let mut bad = update(1, scalar(f64::NAN), 100);
        bad.diverged = true;
        let next = server_aggregate(&cfg, &s, &[bad.clone(), update(0, scalar(2.0), 1)]).unwrap();
        assert_eq!(next.global.tensor("w").unwrap().data(), &[2.0]);
        assert!(matches!(
            server_aggregate(&cfg, &s, &[bad]),
            Err(Error::AllClientsDiverged(1))
        ));
    }

    #[test]
    fn arrival_order_does_not_matter() {
        let cfg = StrategyConfig::new(Algorithm::FedAvg).validated().unwrap();
        let s = init_server_state(&cfg, &scalar(0.0));
        let ups = [
            update(0, scalar(0.1), 3),
            update(1, scalar(0.7), 5),
            update(2, scalar(-0.2), 11),
        ];
        let a = server_aggregate(&cfg, &s, &ups).unwrap();
        let rev: Vec<_> = ups.iter().rev().cloned().collect();
        let b = server_aggregate(&cfg, &s, &rev).unwrap();
        assert!(a.global.bitwise_eq(&b.global));
    }

    #[test]
    fn config_validation() {
        let err = StrategyConfig::new(Algorithm::FedProx)
            .validated()
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "strategy.mu"));
        let err = StrategyConfig::new(Algorithm::FedAvg)
            .with_policy(ExclusionPolicy::AllNormExcluded)
            .validated()
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "strategy.policy"));
        let bn = StrategyConfig::new(Algorithm::FedBn).validated().unwrap();
        assert_eq!(bn.policy, Some(ExclusionPolicy::AllNormExcluded));
        let err = StrategyConfig::new(Algorithm::FedBn)
            .with_policy(ExclusionPolicy::None)
            .validated()
            .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        let err = StrategyConfig::new(Algorithm::FedYogi)
            .validated()
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "strategy.eta_g"));
        let err = StrategyConfig::new(Algorithm::FedAvg)
            .with_mu(-1.0)
            .validated()
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "strategy.mu"));
    }
}
