//! Group-relative advantages and task-advantage balancing.
//!
//! Rewards are whitened within each rollout group,
//!
//! ```text
//! A_i = (r_i - mean(r)) / (std(r) + eps_a)
//! ```
//!
//! with the population (divide-by-G) standard deviation. Mixed
//! classification/regression training tracks the mean magnitude of the
//! correctness advantage per task type with exponential moving averages,
//!
//! ```text
//! m_t = beta * m_{t-1} + (1 - beta) * E[|A_c| | task]
//! ```
//!
//! and damps regression correctness advantages by the clipped ratio
//!
//! ```text
//! eta = clip(m_cls / (m_reg + eps_b), eta_min, eta_max),   eta(cls) = 1.
//! ```
//!
//! The combined advantage is the weighted sum
//! `A = lambda_f * A_f + lambda_e * A_e + lambda_c * eta * A_c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::TaskType;

/// EMA balancer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancerConfig {
    /// EMA decay.
    pub beta: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    /// Ratio denominator guard.
    pub eps_b: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        BalancerConfig {
            beta: 0.99,
            eta_min: 0.8,
            eta_max: 1.0,
            eps_b: 1e-8,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1), got {}", self.beta)));
        }
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max && self.eta_max <= 1.0) {
            return Err(Error::Config(format!(
                "eta bounds must satisfy 0 < eta_min <= eta_max <= 1, got [{}, {}]",
                self.eta_min, self.eta_max
            )));
        }
        if self.eps_b <= 0.0 {
            return Err(Error::Config("eps_b must be positive".into()));
        }
        Ok(())
    }
}

/// Serialized balancer state for checkpoint/resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancerSnapshot {
    pub m_cls: f64,
    pub m_reg: f64,
    pub step: u64,
}

/// EMA scales of the correctness-advantage magnitude per task type.
///
/// Single-writer: exactly one updater per training step; readers may
/// snapshot between steps.
#[derive(Debug, Clone)]
pub struct BalancerState {
    cfg: BalancerConfig,
    m_cls: f64,
    m_reg: f64,
    step: u64,
}

impl BalancerState {
    /// Neutral start: both EMAs at 1, so the initial factor is 1.
    pub fn new(cfg: BalancerConfig) -> Self {
        BalancerState {
            cfg,
            m_cls: 1.0,
            m_reg: 1.0,
            step: 0,
        }
    }

    pub fn m_cls(&self) -> f64 {
        self.m_cls
    }

    pub fn m_reg(&self) -> f64 {
        self.m_reg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &BalancerConfig {
        &self.cfg
    }

    /// EMA update from one batch of correctness advantages.
    ///
    /// `batch` holds (signed) correctness advantages with their task types;
    /// magnitudes are taken here. Task types absent from the batch keep
    /// their previous EMA. An empty batch leaves the state untouched.
    pub fn update(&mut self, batch: &[(f64, TaskType)]) {
        if batch.is_empty() {
            return;
        }
        for task in [TaskType::Cls, TaskType::Reg] {
            let magnitudes: Vec<f64> = batch
                .iter()
                .filter(|(_, t)| *t == task)
                .map(|(a, _)| a.abs())
                .collect();
            if magnitudes.is_empty() {
                continue;
            }
            let mean = magnitudes.iter().sum::<f64>() / magnitudes.len() as f64;
            let m = match task {
                TaskType::Cls => &mut self.m_cls,
                TaskType::Reg => &mut self.m_reg,
            };
            *m = self.cfg.beta * *m + (1.0 - self.cfg.beta) * mean;
        }
        self.step += 1;
    }

    /// Balancing factor: 1 for classification, the clipped EMA ratio for
    /// regression.
    pub fn factor(&self, task: TaskType) -> f64 {
        match task {
            TaskType::Cls => 1.0,
            TaskType::Reg => {
                let raw = self.m_cls / (self.m_reg + self.cfg.eps_b);
                raw.clamp(self.cfg.eta_min, self.cfg.eta_max)
            }
        }
    }

    pub fn snapshot(&self) -> BalancerSnapshot {
        BalancerSnapshot {
            m_cls: self.m_cls,
            m_reg: self.m_reg,
            step: self.step,
        }
    }

    pub fn restore(cfg: BalancerConfig, snapshot: &BalancerSnapshot) -> Self {
        BalancerState {
            cfg,
            m_cls: snapshot.m_cls,
            m_reg: snapshot.m_reg,
            step: snapshot.step,
        }
    }
}

/// Component weights and the whitening stability constant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightConfig {
    pub lambda_f: f64,
    pub lambda_e: f64,
    pub lambda_c: f64,
    pub eps_a: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            lambda_f: 0.1,
            lambda_e: 0.2,
            lambda_c: 0.7,
            eps_a: 1e-6,
        }
    }
}

impl WeightConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_f < 0.0 || self.lambda_e < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::Config("component weights must be non-negative".into()));
        }
        if self.eps_a <= 0.0 {
            return Err(Error::Config("eps_a must be positive".into()));
        }
        Ok(())
    }
}

/// Whitens one reward component within a group, using the population
/// standard deviation. All-equal groups yield exactly zero.
pub fn whiten_group(rewards: &[f64], eps_a: f64) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::GroupTooSmall(g));
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; g]);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps_a)).collect())
}

/// Per-group whitened component advantages and their combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageGroup {
    pub format: Vec<f64>,
    pub evidence: Vec<f64>,
    pub correctness: Vec<f64>,
    /// Correctness advantages after the balancing factor.
    pub balanced_correctness: Vec<f64>,
    /// Weighted sum of the three components.
    pub combined: Vec<f64>,
}

impl AdvantageGroup {
    pub fn group_size(&self) -> usize {
        self.combined.len()
    }
}

/// Combines whitened component advantages with an explicit balancing factor.
pub fn combine_with_factor(
    format: &[f64],
    evidence: &[f64],
    correctness: &[f64],
    eta: f64,
    weights: &WeightConfig,
) -> Result<AdvantageGroup> {
    let g = format.len();
    if evidence.len() != g || correctness.len() != g {
        return Err(Error::LengthMismatch(format!(
            "component lengths {} / {} / {} differ",
            format.len(),
            evidence.len(),
            correctness.len()
        )));
    }
    let balanced: Vec<f64> = correctness.iter().map(|a| eta * a).collect();
    let combined: Vec<f64> = (0..g)
        .map(|i| weights.lambda_f * format[i] + weights.lambda_e * evidence[i] + weights.lambda_c * balanced[i])
        .collect();
    Ok(AdvantageGroup {
        format: format.to_vec(),
        evidence: evidence.to_vec(),
        correctness: correctness.to_vec(),
        balanced_correctness: balanced,
        combined,
    })
}

/// Combines whitened component advantages using the balancer's current
/// factor for the group's task type.
pub fn combine_advantages(
    format: &[f64],
    evidence: &[f64],
    correctness: &[f64],
    task: TaskType,
    state: &BalancerState,
    weights: &WeightConfig,
) -> Result<AdvantageGroup> {
    combine_with_factor(format, evidence, correctness, state.factor(task), weights)
}
