//! Policies over select-then-predict actions, and a built-in toy policy
//! with exact analytic gradients.
//!
//! The toy policy conditions only on the per-row query similarities `s_k`
//! carried by an instance:
//!
//! - selection: independent Bernoulli per context row with
//!   `p_k = sigmoid(a * s_k + b)`;
//! - classification: a class is sampled from `softmax(vote_j / tau)` where
//!   `vote_j` sums the similarities of selected rows labeled `j`
//!   (uniform over the classes when nothing is selected);
//! - regression: `y ~ Normal(mu, sigma^2)` with
//!   `mu = sum_k w_k * y_k`, `w_k = softmax(s_k / tau)` over the selected
//!   rows (the mean of all context labels when nothing is selected, the
//!   table prior at zero shots), and `sigma = exp(log_sigma)`.
//!
//! The temperature parameter acts in log space, `tau = exp(c)`, mirroring
//! the noise scale: the temperature stays positive for any finite `c`, and
//! the gradient decays smoothly as the softmax sharpens instead of blowing
//! up like `1/c^2` near zero (which makes a fixed-step ascent overshoot
//! into inverted temperatures).
//!
//! The action log-probability is the sum of the Bernoulli terms and the
//! prediction term; `grad_log_prob` differentiates it exactly with respect
//! to `(a, b, c, log_sigma)`.

use std::collections::BTreeSet;

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::prompt::render_action_text;
use crate::table::{normalize_label, TaskType, TrainingInstance};

/// The predicted value of an action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PredictionValue {
    Class { index: usize, label: String },
    Number(f64),
}

/// One select-then-predict action: a selection mask over the context rows
/// (display order) plus a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub selected: Vec<bool>,
    pub prediction: PredictionValue,
}

impl Action {
    /// 1-based display indices of the selected rows.
    pub fn display_indices(&self) -> BTreeSet<usize> {
        self.selected
            .iter()
            .enumerate()
            .filter(|(_, &s)| s)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn answer_text(&self) -> String {
        match &self.prediction {
            PredictionValue::Class { label, .. } => label.clone(),
            PredictionValue::Number(v) => format!("{v}"),
        }
    }
}

/// A parameterized policy over protocol actions.
///
/// `log_prob` must be finite for any action sampled under the same
/// parameters, and `render ∘ parse` must be the identity on the
/// (selection set, answer) pair.
pub trait Policy {
    fn param_len(&self) -> usize;
    fn sample(&self, params: &[f64], instance: &TrainingInstance, rng: &mut dyn RngCore) -> Action;
    fn log_prob(&self, params: &[f64], instance: &TrainingInstance, action: &Action) -> f64;
    fn grad_log_prob(&self, params: &[f64], instance: &TrainingInstance, action: &Action) -> Vec<f64>;
    fn render(&self, action: &Action) -> String;
}

/// Parameters of the toy policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyParams {
    /// Similarity gain of the selection logit.
    pub a: f64,
    /// Selection bias.
    pub b: f64,
    /// Log of the vote temperature (classification) / weight temperature
    /// (regression).
    pub c: f64,
    /// Log-scale of the regression noise.
    pub log_sigma: f64,
}

impl ToyParams {
    pub const LEN: usize = 4;

    /// Neutral initialization: random selection, unit temperature and noise
    /// scale.
    pub fn init() -> Self {
        ToyParams { a: 0.0, b: 0.0, c: 0.0, log_sigma: 0.0 }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.a, self.b, self.c, self.log_sigma]
    }

    pub fn from_slice(params: &[f64]) -> Self {
        ToyParams {
            a: params[0],
            b: params[1],
            c: params[2],
            log_sigma: params[3],
        }
    }
}

/// The built-in analytically differentiable policy.
#[derive(Debug, Clone, Copy, Default)]
pub struct ToyPolicy;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Numerically stable log(1 + exp(z)).
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| (v - lse).exp()).collect()
}

struct ClsView<'a> {
    labels: &'a [String],
    /// class index per context row
    row_classes: Vec<usize>,
}

impl<'a> ClsView<'a> {
    fn new(instance: &'a TrainingInstance) -> Self {
        let labels = instance
            .context
            .class_labels
            .as_deref()
            .expect("classification instance carries class labels");
        let row_classes = instance
            .context
            .rows
            .iter()
            .map(|row| {
                let key = normalize_label(&row.label.render());
                labels
                    .iter()
                    .position(|l| normalize_label(l) == key)
                    .expect("context label is one of the class labels")
            })
            .collect();
        ClsView { labels, row_classes }
    }

    /// Similarity-weighted vote per class over the selected rows.
    fn votes(&self, instance: &TrainingInstance, selected: &[bool]) -> Vec<f64> {
        let mut votes = vec![0.0; self.labels.len()];
        for (k, row) in instance.context.rows.iter().enumerate() {
            if selected[k] {
                votes[self.row_classes[k]] += row.similarity;
            }
        }
        votes
    }
}

/// Softmax weights over the selected rows' similarities (at temperature
/// `tau`) and the resulting label mean; `None` when nothing is selected.
fn reg_weighted_mean(instance: &TrainingInstance, selected: &[bool], tau: f64) -> Option<(Vec<usize>, Vec<f64>, f64)> {
    let chosen: Vec<usize> = selected
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| i)
        .collect();
    if chosen.is_empty() {
        return None;
    }
    let logits: Vec<f64> = chosen
        .iter()
        .map(|&k| instance.context.rows[k].similarity / tau)
        .collect();
    let weights = softmax(&logits);
    let mu = chosen
        .iter()
        .zip(weights.iter())
        .map(|(&k, w)| w * instance.context.rows[k].label.as_number().unwrap_or(0.0))
        .sum();
    Some((chosen, weights, mu))
}

/// Fallback regression mean: all context labels, or the table prior at K=0.
fn reg_fallback_mean(instance: &TrainingInstance) -> f64 {
    let rows = &instance.context.rows;
    if rows.is_empty() {
        instance.reg_prior().unwrap_or(0.0)
    } else {
        rows.iter().map(|r| r.label.as_number().unwrap_or(0.0)).sum::<f64>() / rows.len() as f64
    }
}

impl ToyPolicy {
    /// Mode action: rows with selection probability above 1/2, the argmax
    /// class (first label when nothing is selected), the noise-free mean for
    /// regression. Deterministic.
    pub fn greedy(&self, params: &[f64], instance: &TrainingInstance) -> Action {
        let p = ToyParams::from_slice(params);
        let rows = &instance.context.rows;
        let selected: Vec<bool> = rows
            .iter()
            .map(|row| p.a * row.similarity + p.b > 0.0)
            .collect();
        let prediction = match instance.task_type {
            TaskType::Cls => {
                let view = ClsView::new(instance);
                let index = if selected.iter().any(|&s| s) {
                    let votes = view.votes(instance, &selected);
                    let mut best = 0usize;
                    for (j, v) in votes.iter().enumerate() {
                        if *v > votes[best] {
                            best = j;
                        }
                    }
                    best
                } else {
                    0
                };
                PredictionValue::Class {
                    index,
                    label: view.labels[index].clone(),
                }
            }
            TaskType::Reg => {
                let mu = reg_weighted_mean(instance, &selected, p.c.exp())
                    .map(|(_, _, mu)| mu)
                    .unwrap_or_else(|| reg_fallback_mean(instance));
                PredictionValue::Number(mu)
            }
        };
        Action { selected, prediction }
    }
}

impl Policy for ToyPolicy {
    fn param_len(&self) -> usize {
        ToyParams::LEN
    }

    fn sample(&self, params: &[f64], instance: &TrainingInstance, rng: &mut dyn RngCore) -> Action {
        let p = ToyParams::from_slice(params);
        let rows = &instance.context.rows;
        let mut selected = vec![false; rows.len()];
        for (k, row) in rows.iter().enumerate() {
            let prob = sigmoid(p.a * row.similarity + p.b);
            selected[k] = rng.gen::<f64>() < prob;
        }
        let prediction = match instance.task_type {
            TaskType::Cls => {
                let view = ClsView::new(instance);
                let n_classes = view.labels.len();
                let tau = p.c.exp();
                let probs = if selected.iter().any(|&s| s) {
                    let votes = view.votes(instance, &selected);
                    let logits: Vec<f64> = votes.iter().map(|v| v / tau).collect();
                    softmax(&logits)
                } else {
                    vec![1.0 / n_classes as f64; n_classes]
                };
                let mut u = rng.gen::<f64>();
                let mut index = n_classes - 1;
                for (j, prob) in probs.iter().enumerate() {
                    if u < *prob {
                        index = j;
                        break;
                    }
                    u -= prob;
                }
                PredictionValue::Class {
                    index,
                    label: view.labels[index].clone(),
                }
            }
            TaskType::Reg => {
                let mu = reg_weighted_mean(instance, &selected, p.c.exp())
                    .map(|(_, _, mu)| mu)
                    .unwrap_or_else(|| reg_fallback_mean(instance));
                let sigma = p.log_sigma.exp();
                let noise: f64 = rng.sample(StandardNormal);
                PredictionValue::Number(mu + sigma * noise)
            }
        };
        Action { selected, prediction }
    }

    fn log_prob(&self, params: &[f64], instance: &TrainingInstance, action: &Action) -> f64 {
        let p = ToyParams::from_slice(params);
        let rows = &instance.context.rows;
        debug_assert_eq!(action.selected.len(), rows.len());
        let mut lp = 0.0;
        for (k, row) in rows.iter().enumerate() {
            let z = p.a * row.similarity + p.b;
            lp += if action.selected[k] {
                -softplus(-z)
            } else {
                -softplus(z)
            };
        }
        match (&action.prediction, instance.task_type) {
            (PredictionValue::Class { index, .. }, TaskType::Cls) => {
                let view = ClsView::new(instance);
                if action.selected.iter().any(|&s| s) {
                    let tau = p.c.exp();
                    let votes = view.votes(instance, &action.selected);
                    let logits: Vec<f64> = votes.iter().map(|v| v / tau).collect();
                    lp += logits[*index] - log_sum_exp(&logits);
                } else {
                    lp -= (view.labels.len() as f64).ln();
                }
            }
            (PredictionValue::Number(y), TaskType::Reg) => {
                let mu = reg_weighted_mean(instance, &action.selected, p.c.exp())
                    .map(|(_, _, mu)| mu)
                    .unwrap_or_else(|| reg_fallback_mean(instance));
                let sigma = p.log_sigma.exp();
                lp += -0.5 * (2.0 * std::f64::consts::PI).ln()
                    - p.log_sigma
                    - (y - mu).powi(2) / (2.0 * sigma * sigma);
            }
            _ => return f64::NAN,
        }
        lp
    }

    fn grad_log_prob(&self, params: &[f64], instance: &TrainingInstance, action: &Action) -> Vec<f64> {
        let p = ToyParams::from_slice(params);
        let rows = &instance.context.rows;
        let mut grad = vec![0.0; ToyParams::LEN];
        for (k, row) in rows.iter().enumerate() {
            let z = p.a * row.similarity + p.b;
            let residual = (if action.selected[k] { 1.0 } else { 0.0 }) - sigmoid(z);
            grad[0] += row.similarity * residual;
            grad[1] += residual;
        }
        match (&action.prediction, instance.task_type) {
            (PredictionValue::Class { index, .. }, TaskType::Cls) => {
                if action.selected.iter().any(|&s| s) {
                    let tau = p.c.exp();
                    let view = ClsView::new(instance);
                    let votes = view.votes(instance, &action.selected);
                    let logits: Vec<f64> = votes.iter().map(|v| v / tau).collect();
                    let probs = softmax(&logits);
                    let expected_vote: f64 = probs.iter().zip(votes.iter()).map(|(pj, v)| pj * v).sum();
                    // d logit_j / dc = -vote_j / tau for tau = exp(c)
                    grad[2] += (expected_vote - votes[*index]) / tau;
                }
                // nothing-selected prediction is uniform: constant in params
            }
            (PredictionValue::Number(y), TaskType::Reg) => {
                let sigma = p.log_sigma.exp();
                let tau = p.c.exp();
                match reg_weighted_mean(instance, &action.selected, tau) {
                    Some((chosen, weights, mu)) => {
                        let s_bar: f64 = chosen
                            .iter()
                            .zip(weights.iter())
                            .map(|(&k, w)| w * rows[k].similarity)
                            .sum();
                        // d w_k / dc = w_k (s_bar - s_k) / tau
                        let dmu_dc: f64 = chosen
                            .iter()
                            .zip(weights.iter())
                            .map(|(&k, w)| {
                                let label = rows[k].label.as_number().unwrap_or(0.0);
                                w * label * (s_bar - rows[k].similarity)
                            })
                            .sum::<f64>()
                            / tau;
                        grad[2] += (y - mu) / (sigma * sigma) * dmu_dc;
                        grad[3] += (y - mu).powi(2) / (sigma * sigma) - 1.0;
                    }
                    None => {
                        let mu = reg_fallback_mean(instance);
                        grad[3] += (y - mu).powi(2) / (sigma * sigma) - 1.0;
                    }
                }
            }
            _ => {}
        }
        grad
    }

    fn render(&self, action: &Action) -> String {
        render_action_text(&action.display_indices(), &action.answer_text())
    }
}

/// Worst-case relative disagreement between the analytic gradient and a
/// central finite difference of `log_prob`, over all parameter coordinates.
///
/// Relative error is `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<P: Policy>(
    policy: &P,
    params: &[f64],
    instance: &TrainingInstance,
    action: &Action,
    h: f64,
) -> f64 {
    let analytic = policy.grad_log_prob(params, instance, action);
    let mut worst: f64 = 0.0;
    for coord in 0..policy.param_len() {
        let mut plus = params.to_vec();
        plus[coord] += h;
        let mut minus = params.to_vec();
        minus[coord] -= h;
        let numeric =
            (policy.log_prob(&plus, instance, action) - policy.log_prob(&minus, instance, action)) / (2.0 * h);
        let rel = (analytic[coord] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(rel);
    }
    worst
}
