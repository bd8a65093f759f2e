//! Margin ranking loss, ADAM with freeze masks, and the learning-rate table.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FreezeMask, Gradients, ScorerParams};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("parameter and gradient shapes differ")]
    Shape,
    #[error("freeze mask covers {mask} blocks, model has {model}")]
    Mask { mask: usize, model: usize },
    #[error("freeze mask leaves nothing trainable")]
    NothingTrainable,
    #[error("invalid optimizer setting: {0}")]
    Settings(String),
}

/// Which side the margin favours.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossOrientation {
    /// `max(0, delta - s_gold + s_agent)`: gold must clear the agent by `delta`.
    #[default]
    GoldAbove,
    /// `max(0, delta + s_gold - s_agent)`, the sign as literally printed in
    /// the original formulation. Kept for comparison only.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hinge {
    pub loss: f64,
    pub d_gold: f64,
    pub d_agent: f64,
}

pub fn hinge_loss(s_gold: f64, s_agent: f64, delta: f64) -> Hinge {
    hinge_loss_oriented(s_gold, s_agent, delta, LossOrientation::GoldAbove)
}

/// Hinge loss and its (sub)gradient. At the kink (`loss == 0`) the gradient is zero.
pub fn hinge_loss_oriented(s_gold: f64, s_agent: f64, delta: f64, orientation: LossOrientation) -> Hinge {
    let (margin, sign) = match orientation {
        LossOrientation::GoldAbove => (delta - s_gold + s_agent, -1.0),
        LossOrientation::AsPrinted => (delta + s_gold - s_agent, 1.0),
    };
    if margin > 0.0 {
        Hinge {
            loss: margin,
            d_gold: sign,
            d_agent: -sign,
        }
    } else {
        Hinge {
            loss: 0.0,
            d_gold: 0.0,
            d_agent: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(OptimError::Settings(format!("lr {} must be positive", self.lr)));
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(OptimError::Settings(format!("{n} {b} outside [0, 1)")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(OptimError::Settings(format!("eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: ScorerParams,
    pub v: ScorerParams,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ScorerParams, config: AdamConfig) -> Result<Self, OptimError> {
        config.validate()?;
        Ok(Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        })
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(OptimError::Settings(format!("lr {lr} must be positive")));
        }
        self.config.lr = lr;
        Ok(())
    }

    /// One bias-corrected ADAM update. Frozen groups keep both their
    /// parameters and their moment estimates; `t` advances regardless.
    pub fn step(&mut self, params: &mut ScorerParams, grads: &Gradients, mask: &FreezeMask) -> Result<(), OptimError> {
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(OptimError::Shape);
        }
        if mask.blocks.len() != params.num_blocks() {
            return Err(OptimError::Mask {
                mask: mask.blocks.len(),
                model: params.num_blocks(),
            });
        }
        if !mask.any_trainable() {
            return Err(OptimError::NothingTrainable);
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for g in 0..params.num_groups() {
            if !mask.is_trainable(g) {
                continue;
            }
            let ps = params.group_mut(g);
            let gs = grads.group(g);
            let ms = self.m.group_mut(g);
            let vs = self.v.group_mut(g);
            for (((p, gr), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
                let it = p.iter_mut().zip(gr.iter()).zip(m.iter_mut()).zip(v.iter_mut());
                for (((p, &gi), m), v) in it {
                    *m = flush(beta1 * *m + (1.0 - beta1) * gi);
                    *v = flush(beta2 * *v + (1.0 - beta2) * gi * gi);
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Moments of parameters whose gradient stays zero decay geometrically into
/// subnormal range, where arithmetic is orders of magnitude slower.
#[inline]
fn flush(x: f64) -> f64 {
    if x.abs() < 1e-200 {
        0.0
    } else {
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Utterance,
    Conversation,
    ScheduledSampling,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Utterance => "utterance",
            Phase::Conversation => "conversation",
            Phase::ScheduledSampling => "scheduled_sampling",
        }
    }
}

/// Learning rate per (phase, epoch). Conversation and scheduled-sampling
/// epochs share one counter (1-based across both).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub utterance: f64,
    pub conversation_initial: f64,
    pub conversation_decayed: f64,
    /// First epoch that uses the decayed rate.
    pub decay_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            utterance: 1e-3,
            conversation_initial: 1e-3,
            conversation_decayed: 1e-4,
            decay_epoch: 4,
        }
    }
}

impl LrSchedule {
    pub fn lr_for(&self, phase: Phase, epoch: usize) -> f64 {
        match phase {
            Phase::Utterance => self.utterance,
            Phase::Conversation | Phase::ScheduledSampling => {
                if epoch < self.decay_epoch {
                    self.conversation_initial
                } else {
                    self.conversation_decayed
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        for r in [self.utterance, self.conversation_initial, self.conversation_decayed] {
            if !(r > 0.0 && r.is_finite()) {
                return Err(OptimError::Settings(format!("learning rate {r} must be positive")));
            }
        }
        Ok(())
    }
}
