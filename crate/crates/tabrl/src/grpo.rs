//! Grouped-rollout policy optimization with task-advantage balancing.
//!
//! Each step samples a batch of instances, draws a group of `G` rollouts per
//! instance from the behavior policy, scores them with the reward triple,
//! whitens each reward component within its group, updates the EMA balancer
//! from the batch's correctness advantages, combines the components into one
//! advantage per rollout, and ascends the clipped surrogate
//!
//! ```text
//! J = mean_i min(rho_i * A_i, clip(rho_i, 1 - eps_low, 1 + eps_high) * A_i)
//!     - kl_coef * mean_i (log pi_theta(o_i) - log pi_ref(o_i))
//! ```
//!
//! with sequence-level importance ratios
//! `rho_i = pi_theta(o_i|x) / pi_behavior(o_i|x)`. At the sync point
//! (theta = behavior) every ratio is 1, the surrogate reduces to `mean_i A_i`,
//! and the KL estimate vanishes.
//!
//! Gradients use the min/clip subgradient convention: the active branch is
//! differentiated, and a binding clip contributes zero. Rollouts within a
//! batch draw from seeds derived as `hash(seed, step, slot)`, so any rollout
//! schedule produces identical traces.

use rand::SeedableRng;
use rand::{Rng, RngCore};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    combine_with_factor, whiten_group, AdvantageGroup, BalancerConfig, BalancerSnapshot, BalancerState,
    WeightConfig,
};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::policy::{Action, Policy};
use crate::rewards::{score_rollout, RewardConfig, RewardTriple};
use crate::table::{TaskType, TrainingInstance};

const TAG_SELECT: u64 = 0x5e1ec7;
const TAG_ROLLOUT: u64 = 0x20110a7;

/// When the balancer EMA is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancerUpdate {
    /// Once per optimizer batch, after whitening and before combining.
    PerBatch,
    /// After each rollout group, before combining that group.
    PerGroup,
}

/// Reference policy for the KL penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlReference {
    /// The behavior policy of the current step (zero at the sync point).
    Behavior,
    /// The initial parameters the run started from.
    Initial,
}

/// Trainer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Behavior-policy sync cadence; 1 keeps the run on-policy.
    pub sync_every: usize,
    /// When false, the balancing factor is pinned to 1 (vanilla behavior).
    pub balancing: bool,
    pub balancer_update: BalancerUpdate,
    pub kl_reference: KlReference,
    pub weights: WeightConfig,
    pub reward: RewardConfig,
    pub balancer: BalancerConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 8,
            eps_low: 0.2,
            eps_high: 0.28,
            kl_coef: 0.001,
            learning_rate: 0.05,
            batch_size: 8,
            steps: 300,
            seed: 0,
            sync_every: 1,
            balancing: true,
            balancer_update: BalancerUpdate::PerBatch,
            kl_reference: KlReference::Behavior,
            weights: WeightConfig::default(),
            reward: RewardConfig::default(),
            balancer: BalancerConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::GroupTooSmall(self.group_size));
        }
        if self.eps_low <= 0.0 || self.eps_high <= 0.0 {
            return Err(Error::Config("clip thresholds must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.sync_every == 0 {
            return Err(Error::Config("sync_every must be positive".into()));
        }
        if !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be finite".into()));
        }
        self.weights.validate()?;
        self.balancer.validate()
    }
}

/// One instance's group of rollouts with everything needed for the update.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub instance_index: usize,
    pub task: TaskType,
    pub actions: Vec<Action>,
    pub texts: Vec<String>,
    pub behavior_log_probs: Vec<f64>,
    pub rewards: Vec<RewardTriple>,
    pub advantages: AdvantageGroup,
}

/// Samples, renders, scores, whitens, and combines one rollout group under
/// the behavior parameters, using the balancer's current factor.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group<P: Policy>(
    policy: &P,
    params_behavior: &[f64],
    instance: &TrainingInstance,
    instance_index: usize,
    group_size: usize,
    rng: &mut dyn RngCore,
    reward_cfg: &RewardConfig,
    state: &BalancerState,
    weights: &WeightConfig,
) -> Result<RolloutGroup> {
    if group_size < 2 {
        return Err(Error::GroupTooSmall(group_size));
    }
    let mut actions = Vec::with_capacity(group_size);
    let mut texts = Vec::with_capacity(group_size);
    let mut behavior_log_probs = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let action = policy.sample(params_behavior, instance, rng);
        let text = policy.render(&action);
        behavior_log_probs.push(policy.log_prob(params_behavior, instance, &action));
        rewards.push(score_rollout(&text, instance, reward_cfg));
        actions.push(action);
        texts.push(text);
    }
    let advantages = whiten_and_combine(&rewards, state.factor(instance.task_type), weights)?;
    Ok(RolloutGroup {
        instance_index,
        task: instance.task_type,
        actions,
        texts,
        behavior_log_probs,
        rewards,
        advantages,
    })
}

fn whiten_and_combine(rewards: &[RewardTriple], eta: f64, weights: &WeightConfig) -> Result<AdvantageGroup> {
    let f: Vec<f64> = rewards.iter().map(|r| r.r_f).collect();
    let e: Vec<f64> = rewards.iter().map(|r| r.r_e).collect();
    let c: Vec<f64> = rewards.iter().map(|r| r.r_c).collect();
    let wf = whiten_group(&f, weights.eps_a)?;
    let we = whiten_group(&e, weights.eps_a)?;
    let wc = whiten_group(&c, weights.eps_a)?;
    combine_with_factor(&wf, &we, &wc, eta, weights)
}

/// Per-rollout clipped surrogate term of the objective:
/// `min(ratio * advantage, clip(ratio, 1 - eps_low, 1 + eps_high) * advantage)`.
pub fn clipped_term(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped_ratio = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped_ratio * advantage)
}

/// Outcome of evaluating the clipped surrogate on one group.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub objective: f64,
    pub gradient: Vec<f64>,
    /// Mean log-ratio KL estimate entering the objective.
    pub kl: f64,
    /// Rollouts dropped for non-finite log-probabilities.
    pub excluded: usize,
}

/// Evaluates the clipped surrogate and its gradient for one group.
///
/// `reference_log_probs` are sequence log-probabilities under the KL
/// reference policy (the behavior policy by default). Rollouts with a
/// non-finite current log-probability are excluded with a warning.
#[allow(clippy::too_many_arguments)]
pub fn surrogate_objective<P: Policy>(
    policy: &P,
    instance: &TrainingInstance,
    group: &RolloutGroup,
    params_current: &[f64],
    reference_log_probs: &[f64],
    eps_low: f64,
    eps_high: f64,
    kl_coef: f64,
) -> SurrogateEval {
    let n_params = policy.param_len();
    let mut objective = 0.0;
    let mut kl = 0.0;
    let mut gradient = vec![0.0; n_params];
    let mut included = 0usize;
    let mut excluded = 0usize;

    for (i, action) in group.actions.iter().enumerate() {
        let lp_cur = policy.log_prob(params_current, instance, action);
        let lp_beh = group.behavior_log_probs[i];
        let lp_ref = reference_log_probs[i];
        if !lp_cur.is_finite() || !lp_beh.is_finite() || !lp_ref.is_finite() {
            log::warn!("excluding rollout {i} with non-finite log-probability");
            excluded += 1;
            continue;
        }
        let advantage = group.advantages.combined[i];
        let ratio = (lp_cur - lp_beh).exp();
        let clipped_ratio = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
        let unclipped = ratio * advantage;
        let clipped = clipped_ratio * advantage;
        let grad = policy.grad_log_prob(params_current, instance, action);
        if unclipped <= clipped {
            objective += unclipped;
            for (g, dg) in gradient.iter_mut().zip(grad.iter()) {
                *g += advantage * ratio * dg - kl_coef * dg;
            }
        } else {
            // the clipped branch is active and binding: zero policy gradient
            objective += clipped;
            for (g, dg) in gradient.iter_mut().zip(grad.iter()) {
                *g += -kl_coef * dg;
            }
        }
        kl += lp_cur - lp_ref;
        included += 1;
    }
    if included == 0 {
        return SurrogateEval {
            objective: 0.0,
            gradient,
            kl: 0.0,
            excluded,
        };
    }
    let n = included as f64;
    objective /= n;
    kl /= n;
    for g in gradient.iter_mut() {
        *g /= n;
    }
    SurrogateEval {
        objective: objective - kl_coef * kl,
        gradient,
        kl,
        excluded,
    }
}

/// One diagnostic row per training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub reward_format: f64,
    pub reward_evidence: f64,
    pub reward_correctness: f64,
    pub reward_correctness_cls: Option<f64>,
    pub reward_correctness_reg: Option<f64>,
    pub m_cls: f64,
    pub m_reg: f64,
    pub eta_reg: f64,
    pub objective: f64,
    pub kl: f64,
    pub params: Vec<f64>,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub initial_params: Vec<f64>,
    pub params: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub balancer: BalancerSnapshot,
    /// Set when parameters went non-finite; the trace holds every completed
    /// step for the dump.
    pub diverged_at: Option<usize>,
}

/// Runs the training loop.
///
/// Per step: sync the behavior parameters on cadence, roll out groups for
/// the batch, score and whiten, update the balancer, combine advantages with
/// the (possibly disabled) balancing factor, and take one ascent step on the
/// clipped surrogate. Bit-reproducible under a fixed seed.
pub fn train<P: Policy>(
    policy: &P,
    init_params: &[f64],
    instances: &[TrainingInstance],
    cfg: &TrainerConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if instances.is_empty() {
        return Err(Error::Config("no training instances".into()));
    }
    let mut params = init_params.to_vec();
    let mut behavior = params.clone();
    let mut state = BalancerState::new(cfg.balancer.clone());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;

    for step in 0..cfg.steps {
        if step % cfg.sync_every == 0 {
            behavior = params.clone();
        }
        let mut select_rng =
            ChaCha12Rng::seed_from_u64(derive_seed(&[cfg.seed, step as u64, TAG_SELECT]));
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| select_rng.gen_range(0..instances.len()))
            .collect();

        let mut groups = Vec::with_capacity(cfg.batch_size);
        for (slot, &instance_index) in batch.iter().enumerate() {
            let mut rollout_rng = ChaCha12Rng::seed_from_u64(derive_seed(&[
                cfg.seed,
                step as u64,
                slot as u64,
                TAG_ROLLOUT,
            ]));
            let group = rollout_group(
                policy,
                &behavior,
                &instances[instance_index],
                instance_index,
                cfg.group_size,
                &mut rollout_rng,
                &cfg.reward,
                &state,
                &cfg.weights,
            )?;
            groups.push(group);
        }

        // balancer update, then (re)combine with the updated factor
        match cfg.balancer_update {
            BalancerUpdate::PerBatch => {
                let batch_adv: Vec<(f64, TaskType)> = groups
                    .iter()
                    .flat_map(|g| g.advantages.correctness.iter().map(move |&a| (a, g.task)))
                    .collect();
                state.update(&batch_adv);
                for group in groups.iter_mut() {
                    let eta = if cfg.balancing { state.factor(group.task) } else { 1.0 };
                    group.advantages = combine_with_factor(
                        &group.advantages.format,
                        &group.advantages.evidence,
                        &group.advantages.correctness,
                        eta,
                        &cfg.weights,
                    )?;
                }
            }
            BalancerUpdate::PerGroup => {
                for group in groups.iter_mut() {
                    let group_adv: Vec<(f64, TaskType)> = group
                        .advantages
                        .correctness
                        .iter()
                        .map(|&a| (a, group.task))
                        .collect();
                    state.update(&group_adv);
                    let eta = if cfg.balancing { state.factor(group.task) } else { 1.0 };
                    group.advantages = combine_with_factor(
                        &group.advantages.format,
                        &group.advantages.evidence,
                        &group.advantages.correctness,
                        eta,
                        &cfg.weights,
                    )?;
                }
            }
        }

        // reference log-probs for the KL term
        let mut objective = 0.0;
        let mut kl = 0.0;
        let mut gradient = vec![0.0; policy.param_len()];
        for group in &groups {
            let instance = &instances[group.instance_index];
            let reference: Vec<f64> = match cfg.kl_reference {
                KlReference::Behavior => group.behavior_log_probs.clone(),
                KlReference::Initial => group
                    .actions
                    .iter()
                    .map(|a| policy.log_prob(init_params, instance, a))
                    .collect(),
            };
            let eval = surrogate_objective(
                policy,
                instance,
                group,
                &params,
                &reference,
                cfg.eps_low,
                cfg.eps_high,
                cfg.kl_coef,
            );
            objective += eval.objective;
            kl += eval.kl;
            for (g, dg) in gradient.iter_mut().zip(eval.gradient.iter()) {
                *g += dg;
            }
        }
        let n_groups = groups.len() as f64;
        objective /= n_groups;
        kl /= n_groups;
        for g in gradient.iter_mut() {
            *g /= n_groups;
        }
        for (p, g) in params.iter_mut().zip(gradient.iter()) {
            *p += cfg.learning_rate * g;
        }

        trace.push(trace_row(step, &groups, &state, objective, kl, &params));

        if params.iter().any(|p| !p.is_finite()) {
            log::error!("parameters diverged at step {step}; aborting with trace dump");
            diverged_at = Some(step);
            break;
        }
    }

    Ok(TrainOutput {
        initial_params: init_params.to_vec(),
        params,
        trace,
        balancer: state.snapshot(),
        diverged_at,
    })
}

fn trace_row(
    step: usize,
    groups: &[RolloutGroup],
    state: &BalancerState,
    objective: f64,
    kl: f64,
    params: &[f64],
) -> TraceRow {
    let mut f_sum = 0.0;
    let mut e_sum = 0.0;
    let mut c_sum = 0.0;
    let mut n = 0usize;
    let mut c_cls = (0.0, 0usize);
    let mut c_reg = (0.0, 0usize);
    for group in groups {
        for reward in &group.rewards {
            f_sum += reward.r_f;
            e_sum += reward.r_e;
            c_sum += reward.r_c;
            n += 1;
            match group.task {
                TaskType::Cls => {
                    c_cls.0 += reward.r_c;
                    c_cls.1 += 1;
                }
                TaskType::Reg => {
                    c_reg.0 += reward.r_c;
                    c_reg.1 += 1;
                }
            }
        }
    }
    let n = n.max(1) as f64;
    TraceRow {
        step,
        reward_format: f_sum / n,
        reward_evidence: e_sum / n,
        reward_correctness: c_sum / n,
        reward_correctness_cls: (c_cls.1 > 0).then(|| c_cls.0 / c_cls.1 as f64),
        reward_correctness_reg: (c_reg.1 > 0).then(|| c_reg.0 / c_reg.1 as f64),
        m_cls: state.m_cls(),
        m_reg: state.m_reg(),
        eta_reg: state.factor(TaskType::Reg),
        objective,
        kl,
        params: params.to_vec(),
    }
}

/// Writes a trace as CSV with one row per step.
pub fn write_trace_csv<Path: AsRef<std::path::Path>>(path: Path, trace: &[TraceRow]) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    let n_params = trace.first().map(|r| r.params.len()).unwrap_or(0);
    let param_names: Vec<String> = (0..n_params).map(|i| format!("param_{i}")).collect();
    writeln!(
        file,
        "step,r_f,r_e,r_c,r_c_cls,r_c_reg,m_cls,m_reg,eta,objective,kl,{}",
        param_names.join(",")
    )?;
    for row in trace {
        let cls = row
            .reward_correctness_cls
            .map(|v| format!("{v:?}"))
            .unwrap_or_default();
        let reg = row
            .reward_correctness_reg
            .map(|v| format!("{v:?}"))
            .unwrap_or_default();
        let params: Vec<String> = row.params.iter().map(|p| format!("{p:?}")).collect();
        writeln!(
            file,
            "{},{:?},{:?},{:?},{},{},{:?},{:?},{:?},{:?},{:?},{}",
            row.step,
            row.reward_format,
            row.reward_evidence,
            row.reward_correctness,
            cls,
            reg,
            row.m_cls,
            row.m_reg,
            row.eta_reg,
            row.objective,
            row.kl,
            params.join(",")
        )?;
    }
    Ok(())
}

/// Mean rewards of a policy over a corpus, from seeded fresh rollouts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyMeasurement {
    pub reward_format: f64,
    pub reward_evidence: f64,
    pub reward_correctness: f64,
    pub correctness_cls: Option<f64>,
    pub correctness_reg: Option<f64>,
    pub evidence_nonzero_gold: f64,
    pub n_instances: usize,
}

/// Samples `group_size` rollouts per instance at fixed parameters and
/// averages the reward components. Deterministic under the seed.
pub fn measure_policy<P: Policy>(
    policy: &P,
    params: &[f64],
    instances: &[TrainingInstance],
    group_size: usize,
    seed: u64,
    reward_cfg: &RewardConfig,
) -> PolicyMeasurement {
    let mut f_sum = 0.0;
    let mut e_sum = 0.0;
    let mut c_sum = 0.0;
    let mut n = 0usize;
    let mut cls = (0.0, 0usize);
    let mut reg = (0.0, 0usize);
    let mut e_gold = (0.0, 0usize);
    for (idx, instance) in instances.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(&[seed, idx as u64, 0x3ea5]));
        for _ in 0..group_size {
            let action = policy.sample(params, instance, &mut rng);
            let text = policy.render(&action);
            let reward = score_rollout(&text, instance, reward_cfg);
            f_sum += reward.r_f;
            e_sum += reward.r_e;
            c_sum += reward.r_c;
            n += 1;
            match instance.task_type {
                TaskType::Cls => {
                    cls.0 += reward.r_c;
                    cls.1 += 1;
                }
                TaskType::Reg => {
                    reg.0 += reward.r_c;
                    reg.1 += 1;
                }
            }
            if !instance.gold_evidence.is_empty() {
                e_gold.0 += reward.r_e;
                e_gold.1 += 1;
            }
        }
    }
    let denom = n.max(1) as f64;
    PolicyMeasurement {
        reward_format: f_sum / denom,
        reward_evidence: e_sum / denom,
        reward_correctness: c_sum / denom,
        correctness_cls: (cls.1 > 0).then(|| cls.0 / cls.1 as f64),
        correctness_reg: (reg.1 > 0).then(|| reg.0 / reg.1 as f64),
        evidence_nonzero_gold: if e_gold.1 > 0 { e_gold.0 / e_gold.1 as f64 } else { 0.0 },
        n_instances: instances.len(),
    }
}
