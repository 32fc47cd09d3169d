//! SGD with momentum and Adam over lists of tensors.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::invalid(format!("unknown optimizer `{s}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// Hyper-parameters of one optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// SGD momentum.
    pub momentum: f64,
    /// Adam `(β₁, β₂)`.
    pub betas: (f64, f64),
    pub eps: f64,
    /// L2 term added to the gradient.
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr,
            momentum,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn adam(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            momentum: 0.0,
            betas,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// `lr == 0` is allowed and freezes the parameters.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::invalid("weight decay must be ≥ 0"));
        }
        Ok(())
    }
}

/// Optimizer configuration plus per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr` (the scheduled value). `step` is
    /// only used to label errors.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr: f64,
        step: usize,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Step {
                step,
                message: format!("{} parameters but {} gradients", params.len(), grads.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Step {
                    step,
                    message: format!(
                        "parameter {i} has shape {:?}, gradient {:?}",
                        p.shape(),
                        g.shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(Error::Step {
                    step,
                    message: format!("non-finite gradient for parameter {i}"),
                });
            }
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            if self.config.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(b, p)| b.shape() != p.shape())
        {
            return Err(Error::Step {
                step,
                message: "moment buffers do not match the parameters".into(),
            });
        }
        self.steps += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                let first_step = self.steps == 1;
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    let (pd, gd, bd) = (p.data_mut(), g.data(), buf.data_mut());
                    for k in 0..pd.len() {
                        let d = gd[k] + c.weight_decay * pd[k];
                        bd[k] = if first_step { d } else { c.momentum * bd[k] + d };
                        pd[k] -= lr * bd[k];
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = c.betas;
                let t = self.steps as i32;
                let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let (pd, gd) = (p.data_mut(), g.data());
                    let (md, vd) = (m.data_mut(), v.data_mut());
                    for k in 0..pd.len() {
                        let d = gd[k] + c.weight_decay * pd[k];
                        md[k] = b1 * md[k] + (1.0 - b1) * d;
                        vd[k] = b2 * vd[k] + (1.0 - b2) * d * d;
                        let mhat = md[k] / bc1;
                        let vhat = vd[k] / bc2;
                        pd[k] -= lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
    Constant,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LrSchedule::Cosine),
            "constant" => Ok(LrSchedule::Constant),
            _ => Err(Error::invalid(format!("unknown schedule `{s}`"))),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Cosine => "cosine",
            LrSchedule::Constant => "constant",
        })
    }
}

impl LrSchedule {
    /// Learning rate at progress `t` of `total` (`t == total` is the end).
    pub fn lr(self, lr_max: f64, t: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr_max,
            LrSchedule::Cosine => {
                if total == 0 {
                    return lr_max;
                }
                if t >= total {
                    return 0.0;
                }
                0.5 * lr_max * (1.0 + (PI * t as f64 / total as f64).cos())
            }
        }
    }
}
