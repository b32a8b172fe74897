//! First-order optimizers with per-parameter learning-rate multipliers.
//!
//! The effective learning rate after `t` updates is `lr / (1 + lr_decay·t)`.
//! Weight decay is coupled: `2·wd·θ` is added to the gradient before any
//! momentum or moment estimate sees it.

use std::collections::BTreeMap;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::{InitScheme, Layer, Sequential};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            lr_decay: 0.0,
            momentum: 0.9,
            nesterov: false,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            momentum: 0.0,
            ..Self::default()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("optimizer: {what}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay >= 0.0) {
            return bad("lr_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    /// Learning rate used by update number `t` (0-based).
    pub fn lr_at(&self, t: u64) -> f64 {
        self.lr / (1.0 + self.lr_decay * t as f64)
    }
}

/// Per-parameter learning-rate multipliers keyed by qualified parameter name.
/// Parameters without an entry use the default.
#[derive(Clone, Debug, PartialEq)]
pub struct LrMultipliers {
    pub default: f64,
    pub per_param: BTreeMap<String, f64>,
}

impl Default for LrMultipliers {
    fn default() -> Self {
        Self {
            default: 1.0,
            per_param: BTreeMap::new(),
        }
    }
}

impl LrMultipliers {
    pub fn get(&self, name: &str) -> f64 {
        self.per_param.get(name).copied().unwrap_or(self.default)
    }
}

/// Per-parameter optimizer state. SGD keeps `velocity`; Adam keeps `m` and `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState<T> {
    pub velocity: Option<Tensor<T>>,
    pub m: Option<Tensor<T>>,
    pub v: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimConfig,
    pub multipliers: LrMultipliers,
    step: u64,
    state: BTreeMap<String, ParamState<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            multipliers: LrMultipliers::default(),
            step: 0,
            state: BTreeMap::new(),
        })
    }

    pub fn with_multipliers(mut self, multipliers: LrMultipliers) -> Self {
        self.multipliers = multipliers;
        self
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr_at(self.step)
    }

    /// Applies one update to every parameter of `model` from its accumulated gradients.
    pub fn step(&mut self, model: &mut dyn Layer<T>) -> Result<()> {
        let lr = self.config.lr_at(self.step);
        let t = self.step + 1;
        for (name, p) in model.params_mut() {
            let mul = self.multipliers.get(&name);
            if mul == 0.0 {
                continue;
            }
            let state = self.state.entry(name).or_insert(ParamState {
                velocity: None,
                m: None,
                v: None,
            });
            let step_lr = T::lit(lr * mul);
            let wd2 = T::lit(2.0 * self.config.weight_decay);
            let theta = p.value.as_mut_slice();
            let grad = p.grad.as_slice();
            match self.config.kind {
                OptimizerKind::Sgd => {
                    let mu = T::lit(self.config.momentum);
                    let vel = state.velocity.get_or_insert_with(|| p.grad.zeros_like());
                    for ((th, &g0), v) in theta.iter_mut().zip(grad).zip(vel.as_mut_slice()) {
                        let g = g0 + wd2 * *th;
                        *v = mu * *v + g;
                        let dir = if self.config.nesterov { g + mu * *v } else { *v };
                        *th = *th - step_lr * dir;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (self.config.beta1, self.config.beta2);
                    let c1 = T::lit(1.0 - b1.powi(t as i32));
                    let c2 = T::lit(1.0 - b2.powi(t as i32));
                    let (b1, b2, eps) = (T::lit(b1), T::lit(b2), T::lit(self.config.eps));
                    let m = state.m.get_or_insert_with(|| p.grad.zeros_like());
                    let v = state.v.get_or_insert_with(|| p.grad.zeros_like());
                    for (((th, &g0), mi), vi) in theta.iter_mut().zip(grad).zip(m.as_mut_slice()).zip(v.as_mut_slice())
                    {
                        let g = g0 + wd2 * *th;
                        *mi = b1 * *mi + (T::one() - b1) * g;
                        *vi = b2 * *vi + (T::one() - b2) * g * g;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *th = *th - step_lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Flattened state for persistence: `step` plus `<param>.velocity|m|v`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, s) in &self.state {
            for (slot, t) in [("velocity", &s.velocity), ("m", &s.m), ("v", &s.v)] {
                if let Some(t) = t {
                    out.push((format!("{name}.{slot}"), t.clone()));
                }
            }
        }
        out
    }

    /// Restores state produced by [`Optimizer::state_tensors`].
    pub fn load_state(&mut self, step: u64, tensors: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut state: BTreeMap<String, ParamState<T>> = BTreeMap::new();
        for (key, t) in tensors {
            let (name, slot) = key
                .rsplit_once('.')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed optimizer key '{key}'")))?;
            let entry = state.entry(name.to_string()).or_insert(ParamState {
                velocity: None,
                m: None,
                v: None,
            });
            match slot {
                "velocity" => entry.velocity = Some(t),
                "m" => entry.m = Some(t),
                "v" => entry.v = Some(t),
                _ => return Err(Error::InvalidArgument(format!("unknown optimizer slot '{key}'"))),
            }
        }
        self.step = step;
        self.state = state;
        Ok(())
    }
}

/// Prepares a pretrained model for fine-tuning.
///
/// Top-level layers named in `reset_layers` are re-initialized and train at
/// the full learning rate; every other parameter keeps its value and trains at
/// `pretrained_multiplier` times the base rate.
pub fn make_finetune_groups<T: Element>(
    model: &mut Sequential<T>,
    reset_layers: &[&str],
    pretrained_multiplier: f64,
    scheme: InitScheme,
    rng: &mut dyn RngCore,
) -> Result<LrMultipliers> {
    if !(pretrained_multiplier >= 0.0) {
        return Err(Error::Config("pretrained multiplier must be non-negative".into()));
    }
    for &name in reset_layers {
        let layer = model
            .layer_mut(name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))?;
        layer.init_params(scheme, rng);
    }
    let mut per_param = BTreeMap::new();
    for (pname, _) in model.params() {
        let layer = pname.split('.').next().unwrap_or_default();
        let mul = if reset_layers.contains(&layer) {
            1.0
        } else {
            pretrained_multiplier
        };
        per_param.insert(pname, mul);
    }
    Ok(LrMultipliers {
        default: 1.0,
        per_param,
    })
}
