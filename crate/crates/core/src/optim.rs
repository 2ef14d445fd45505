//! Parameter update rules: LION, SGD with momentum over head/body groups,
//! and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Linear, MlpParams};
use crate::tensor::{Scalar, Tensor};

/// Anything exposing an ordered list of named tensors.
pub trait Parameters<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
}

impl<T: Scalar> Parameters<T> for MlpParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        MlpParams::named(self)
    }
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        MlpParams::named_mut(self)
    }
}

/// A standalone classifier (linear probe); named like the model head.
impl<T: Scalar> Parameters<T> for Linear<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![("head.weight".into(), &self.weight), ("head.bias".into(), &self.bias)]
    }
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![("head.weight".into(), &mut self.weight), ("head.bias".into(), &mut self.bias)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Final classifier layer.
    Head,
    /// Embedding and blocks.
    Body,
}

pub fn param_group(name: &str) -> Result<ParamGroup> {
    if name.starts_with("head.") {
        Ok(ParamGroup::Head)
    } else if name.starts_with("embed.") || name.starts_with("blocks.") {
        Ok(ParamGroup::Body)
    } else {
        Err(Error::UnknownGroup(name.to_string()))
    }
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn check_pairs<T: Scalar>(params: &[(String, &mut Tensor<T>)], grads: &[(String, &Tensor<T>)]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for ((pn, p), (gn, g)) in params.iter().zip(grads) {
        if pn != gn || p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LionConfig {
    pub lr: f64,
    #[serde(default = "LionConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "LionConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl LionConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.99
    }

    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(self.lr >= 0.0) || !unit(self.beta1) || !unit(self.beta2) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("invalid LION hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// LION with decoupled weight decay:
/// `c = b1 m + (1-b1) g; theta -= lr (sign(c) + wd theta); m = b2 m + (1-b2) g`.
#[derive(Debug, Clone)]
pub struct Lion<T> {
    pub config: LionConfig,
    momentum: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Lion<T> {
    pub fn new(config: LionConfig) -> Self {
        Self {
            config,
            momentum: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut impl Parameters<T>, grads: &impl Parameters<T>, lr_scale: f64) -> Result<()> {
        let mut params = params.named_mut();
        let grads = grads.named();
        check_pairs(&params, &grads)?;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let lr = T::lit(self.config.lr * lr_scale);
        let wd = T::lit(self.config.weight_decay);
        for ((name, theta), (_, g)) in params.iter_mut().zip(&grads) {
            let m = self
                .momentum
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            for ((t, &gi), mi) in theta.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                let c = b1 * *mi + (T::one() - b1) * gi;
                *t = *t - lr * (sign(c) + wd * *t);
                *mi = b2 * *mi + (T::one() - b2) * gi;
            }
        }
        Ok(())
    }

    pub fn momentum(&self, name: &str) -> Option<&Tensor<T>> {
        self.momentum.get(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub head_lr: f64,
    pub body_lr: f64,
    #[serde(default = "SgdConfig::default_momentum")]
    pub momentum: f64,
}

impl SgdConfig {
    fn default_momentum() -> f64 {
        0.9
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.head_lr >= 0.0) || !(self.body_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("invalid SGD hyperparameters {self:?}")));
        }
        Ok(())
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Head => self.head_lr,
            ParamGroup::Body => self.body_lr,
        }
    }
}

/// `v = mu v + g; theta -= lr_group v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut impl Parameters<T>, grads: &impl Parameters<T>, lr_scale: f64) -> Result<()> {
        let mut params = params.named_mut();
        let grads = grads.named();
        check_pairs(&params, &grads)?;
        let mu = T::lit(self.config.momentum);
        for ((name, theta), (_, g)) in params.iter_mut().zip(&grads) {
            let lr = T::lit(self.config.lr(param_group(name)?) * lr_scale);
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape()));
            for ((t, &gi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi;
                *t = *t - lr * *vi;
            }
        }
        Ok(())
    }
}

/// Optimizer choice as stored in run configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Lion(LionConfig),
    SgdMomentum(SgdConfig),
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Lion(c) => c.validate(),
            OptimizerConfig::SgdMomentum(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Lion(Lion<T>),
    SgdMomentum(SgdMomentum<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        match config {
            OptimizerConfig::Lion(c) => Optimizer::Lion(Lion::new(c)),
            OptimizerConfig::SgdMomentum(c) => Optimizer::SgdMomentum(SgdMomentum::new(c)),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        match self {
            Optimizer::Lion(o) => OptimizerConfig::Lion(o.config),
            Optimizer::SgdMomentum(o) => OptimizerConfig::SgdMomentum(o.config),
        }
    }

    pub fn step(&mut self, params: &mut impl Parameters<T>, grads: &impl Parameters<T>, lr_scale: f64) -> Result<()> {
        match self {
            Optimizer::Lion(o) => o.step(params, grads, lr_scale),
            Optimizer::SgdMomentum(o) => o.step(params, grads, lr_scale),
        }
    }

    /// Slot tensors keyed by parameter name.
    pub fn state(&self) -> &BTreeMap<String, Tensor<T>> {
        match self {
            Optimizer::Lion(o) => &o.momentum,
            Optimizer::SgdMomentum(o) => &o.velocity,
        }
    }

    pub fn set_state(&mut self, state: BTreeMap<String, Tensor<T>>) {
        match self {
            Optimizer::Lion(o) => o.momentum = state,
            Optimizer::SgdMomentum(o) => o.velocity = state,
        }
    }
}

/// Scales all gradients by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut impl Parameters<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::invalid(format!("max_norm must be positive, got {max_norm}")));
    }
    let mut sq = 0.0f64;
    for (name, g) in grads.named() {
        if !g.all_finite() {
            return Err(Error::NonFinite(name));
        }
        sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::lit(max_norm / norm);
        for (_, g) in grads.named_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * scale);
        }
    }
    Ok(norm)
}
