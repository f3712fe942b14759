//! Reward components for scored rollouts.
//!
//! Each rollout earns a triple `(r_f, r_e, r_c)`:
//!
//! - format `r_f ∈ {0, 1}`: 1 iff both protocol spans parsed;
//! - evidence `r_e ∈ [0, 1]`: F1 of the selected indices against the gold
//!   set, with a stability constant in all three denominators:
//!   `Prec = |S∩G| / (|S| + ε)`, `Rec = |S∩G| / (|G| + ε)`,
//!   `r_e = 2·Prec·Rec / (Prec + Rec + ε)`;
//! - correctness `r_c ∈ [0, 1]`: exact match after trim/case-fold for
//!   classification, `exp(-gamma · |ŷ-y| / (|y| + delta))` for regression.
//!
//! The components are independent: a parseable boxed answer is scored even
//! when the selection block is missing, while the evidence reward is zeroed
//! whenever the format check fails (no parsed set to score).

use serde::{Deserialize, Serialize};

use crate::prompt::{parse_output, Answer, ParsedOutput};
use crate::table::{normalize_label, Target, TaskType, TrainingInstance};
use std::collections::BTreeSet;

/// Reward shaping constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Regression shaping rate.
    pub gamma: f64,
    /// Relative-error denominator guard.
    pub delta: f64,
    /// F1 stability constant.
    pub eps_f: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            gamma: 1.0,
            delta: 1e-8,
            eps_f: 1e-6,
        }
    }
}

/// Per-rollout reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardTriple {
    pub r_f: f64,
    pub r_e: f64,
    pub r_c: f64,
}

/// 1 iff the output parsed as well-formed.
pub fn format_reward(parsed: &ParsedOutput) -> f64 {
    if parsed.well_formed {
        1.0
    } else {
        0.0
    }
}

/// F1-based evidence score; both arguments are sets of display indices.
pub fn evidence_reward(selected: &BTreeSet<usize>, gold: &BTreeSet<usize>, cfg: &RewardConfig) -> f64 {
    let eps = cfg.eps_f;
    let hits = selected.intersection(gold).count() as f64;
    let precision = hits / (selected.len() as f64 + eps);
    let recall = hits / (gold.len() as f64 + eps);
    2.0 * precision * recall / (precision + recall + eps)
}

/// Relative error used by the regression reward.
pub fn mape(predicted: f64, truth: f64, delta: f64) -> f64 {
    (predicted - truth).abs() / (truth.abs() + delta)
}

/// Correctness of a parsed boxed answer against the ground truth.
pub fn correctness_reward(answer: Option<&Answer>, target: &Target, task: TaskType, cfg: &RewardConfig) -> f64 {
    let Some(answer) = answer else {
        return 0.0;
    };
    match (task, target) {
        (TaskType::Cls, Target::Class(label)) => {
            if normalize_label(&answer.raw) == normalize_label(label) {
                1.0
            } else {
                0.0
            }
        }
        (TaskType::Reg, Target::Number(y)) => match answer.number {
            Some(predicted) => (-cfg.gamma * mape(predicted, *y, cfg.delta)).exp(),
            None => 0.0,
        },
        _ => 0.0,
    }
}

/// Parses an output once and applies the three component rewards.
pub fn score_rollout(output_text: &str, instance: &TrainingInstance, cfg: &RewardConfig) -> RewardTriple {
    let parsed = parse_output(output_text);
    score_parsed(&parsed, instance, cfg)
}

/// Scores an already-parsed output.
pub fn score_parsed(parsed: &ParsedOutput, instance: &TrainingInstance, cfg: &RewardConfig) -> RewardTriple {
    let r_f = format_reward(parsed);
    let r_e = match (&parsed.selected, r_f > 0.0) {
        (Some(selected), true) => evidence_reward(selected, &instance.gold_evidence, cfg),
        _ => 0.0,
    };
    let r_c = correctness_reward(parsed.answer.as_ref(), &instance.target, instance.task_type, cfg);
    RewardTriple { r_f, r_e, r_c }
}
