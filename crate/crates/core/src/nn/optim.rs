//! Client-side optimizers. Running statistics are never touched: gradients only
//! exist for trainable entries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};

fn check_grads(params: &ParamSet, grads: &GradSet) -> Result<()> {
    let trainable = params.trainable_names().count();
    if trainable != grads.len() {
        return Err(Error::KeyMismatch(format!(
            "{trainable} trainable entries but {} gradients",
            grads.len()
        )));
    }
    for (name, g) in grads.iter() {
        match params.get(name) {
            Some(p) if p.meta.trainable() && p.value.same_shape(g) => {}
            Some(_) => {
                return Err(Error::KeyMismatch(format!(
                    "`{name}` shape or trainability"
                )))
            }
            None => return Err(Error::KeyMismatch(format!("no parameter `{name}`"))),
        }
    }
    Ok(())
}

/// `w ← w − η·g` in place.
pub fn sgd_step_in_place(params: &mut ParamSet, grads: &GradSet, eta: f64) -> Result<()> {
    check_grads(params, grads)?;
    params.add_scaled(grads, -eta)
}

pub fn local_sgd_step(params: &ParamSet, grads: &GradSet, eta: f64) -> Result<ParamSet> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grads, eta)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "AdamConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamConfig::default_eps")]
    pub eps: f64,
}

impl AdamConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: GradSet,
    pub v: GradSet,
    pub step: u64,
}

impl AdamState {
    pub fn zeros(params: &ParamSet) -> Self {
        AdamState {
            m: GradSet::zeros_like(params),
            v: GradSet::zeros_like(params),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step in place. Empty moment buffers are zero-initialized.
pub fn adam_step_in_place(
    params: &mut ParamSet,
    grads: &GradSet,
    state: &mut AdamState,
    eta: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    check_grads(params, grads)?;
    if state.m.is_empty() && state.v.is_empty() {
        *state = AdamState::zeros(params);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("adam moment `{name}`")))?;
        for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
        }
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::KeyMismatch(format!("adam moment `{name}`")))?;
        for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
        }
        let (m, v) = (state.m.get(name).unwrap(), state.v.get(name).unwrap());
        let w = params.tensor_mut(name)?;
        for ((wv, &mv), &vv) in w.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
            *wv -= eta * (mv / c1) / ((vv / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn local_adam_step(
    params: &ParamSet,
    grads: &GradSet,
    state: &AdamState,
    eta: f64,
    cfg: &AdamConfig,
) -> Result<(ParamSet, AdamState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_step_in_place(&mut p, grads, &mut s, eta, cfg)?;
    Ok((p, s))
}
