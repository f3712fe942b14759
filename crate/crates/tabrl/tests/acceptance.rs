//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::time::Instant;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use tabrl::advantage::{whiten_group, BalancerConfig, BalancerState, WeightConfig};
use tabrl::eval::{nmae, rank_methods, Direction};
use tabrl::grpo::{
    clipped_term, measure_policy, rollout_group, surrogate_objective, train, TrainerConfig,
};
use tabrl::pipeline::{build_corpus, feature_mi_scores, filter_features, ContextSpec, CorpusSpec, FilterConfig};
use tabrl::policy::{finite_difference_check, Action, Policy, PredictionValue, ToyParams, ToyPolicy};
use tabrl::prompt::{parse_output, render_action_text};
use tabrl::rewards::{correctness_reward, evidence_reward, mape, RewardConfig};
use tabrl::synthetic::{bundled_ablation_tables, bundled_training_tables};
use tabrl::table::{
    ColumnKind, ColumnRole, ColumnSchema, ContextFeature, InstanceContext, Table, Target, TaskType,
    TrainingInstance, Value,
};

/// Criterion 1: evidence reward against exact rational evaluation of the
/// F1 formula on every pair of index sets with size <= 6 over a 10-index
/// universe, and the regression reward against the exponential form.
#[test]
fn acceptance_1_reward_oracle_suite() {
    let start = Instant::now();
    let cfg = RewardConfig::default();

    // exact rational F1 with eps in all three denominators
    let eps = BigRational::new(BigInt::from(1), BigInt::from(1_000_000));
    let mut memo: BTreeMap<(u32, u32, u32), f64> = BTreeMap::new();
    let mut rational_f1 = |hits: u32, k_sel: u32, k_gold: u32| -> f64 {
        *memo.entry((hits, k_sel, k_gold)).or_insert_with(|| {
            let hits = BigRational::from_integer(BigInt::from(hits));
            let precision = &hits / (BigRational::from_integer(BigInt::from(k_sel)) + &eps);
            let recall = &hits / (BigRational::from_integer(BigInt::from(k_gold)) + &eps);
            let f1 = BigRational::from_integer(BigInt::from(2)) * &precision * &recall
                / (&precision + &recall + &eps);
            f1.to_f64().unwrap()
        })
    };

    let masks: Vec<u16> = (0u16..1024).filter(|m| m.count_ones() <= 6).collect();
    let as_set = |mask: u16| -> BTreeSet<usize> {
        (0..10).filter(|i| mask & (1 << i) != 0).collect()
    };
    let sets: Vec<BTreeSet<usize>> = masks.iter().map(|&m| as_set(m)).collect();

    let mut checked = 0u64;
    for (i, &m_sel) in masks.iter().enumerate() {
        for (j, &m_gold) in masks.iter().enumerate() {
            let hits = (m_sel & m_gold).count_ones();
            let expected = rational_f1(hits, m_sel.count_ones(), m_gold.count_ones());
            let got = evidence_reward(&sets[i], &sets[j], &cfg);
            assert!(
                (got - expected).abs() < 1e-9,
                "sets {m_sel:#b}/{m_gold:#b}: got {got}, oracle {expected}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 848 * 848);

    // regression correctness against the exponential form
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let y: f64 = rng.gen_range(-1000.0..1000.0);
        let predicted: f64 = rng.gen_range(-1000.0..1000.0);
        let gamma: f64 = rng.gen_range(0.1..3.0);
        let cfg = RewardConfig { gamma, ..RewardConfig::default() };
        let answer = tabrl::prompt::Answer { raw: format!("{predicted}"), number: Some(predicted) };
        let got = correctness_reward(Some(&answer), &Target::Number(y), TaskType::Reg, &cfg);
        let expected = (-gamma * ((predicted - y).abs() / (y.abs() + cfg.delta))).exp();
        assert!((got - expected).abs() < 1e-12, "got {got}, expected {expected}");
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!("ACCEPTANCE 1 PASS: reward oracle suite ({checked} set pairs + 1000 triples in {elapsed:?})");
}

/// Criterion 2: whitening moments over 10,000 random groups.
#[test]
fn acceptance_2_whitening_suite() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let eps_a = 1e-6;
    for trial in 0..10_000 {
        let g = rng.gen_range(2..=16);
        let rewards: Vec<f64> = if trial % 10 == 0 {
            let v: f64 = rng.gen_range(0.0..1.0);
            vec![v; g]
        } else {
            (0..g).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let whitened = whiten_group(&rewards, eps_a).unwrap();

        let mean_in = rewards.iter().sum::<f64>() / g as f64;
        let std_in = (rewards.iter().map(|r| (r - mean_in).powi(2)).sum::<f64>() / g as f64).sqrt();

        let mean_out = whitened.iter().sum::<f64>() / g as f64;
        assert!(mean_out.abs() <= 1e-12, "trial {trial}: output mean {mean_out}");

        if rewards.iter().all(|&r| r == rewards[0]) {
            assert!(whitened.iter().all(|&a| a == 0.0), "all-equal group must whiten to zero");
        } else if std_in >= 1e-2 {
            let std_out =
                (whitened.iter().map(|a| (a - mean_out).powi(2)).sum::<f64>() / g as f64).sqrt();
            assert!(
                (1.0 - 1e-4..=1.0).contains(&std_out),
                "trial {trial}: output std {std_out} for input std {std_in}"
            );
        }
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 10, "took {elapsed:?}");
    println!("ACCEPTANCE 2 PASS: whitening suite (10000 groups in {elapsed:?})");
}

/// Criterion 3: balancer convergence under stationary batch means.
#[test]
fn acceptance_3_balancer_convergence() {
    let start = Instant::now();
    let mut state = BalancerState::new(BalancerConfig::default());
    for step in 0..1000 {
        state.update(&[(0.6, TaskType::Cls), (1.2, TaskType::Reg)]);
        let eta = state.factor(TaskType::Reg);
        assert!(
            (0.8..=1.0).contains(&eta),
            "step {step}: eta {eta} left the clip band"
        );
    }
    let eta = state.factor(TaskType::Reg);
    assert!(
        (eta - 0.8).abs() < 1e-3,
        "eta {eta} is not within 1e-3 of clip(0.5, 0.8, 1.0) = 0.8"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_millis() < 1000, "took {elapsed:?}");
    println!("ACCEPTANCE 3 PASS: balancer converges to eta = 0.8 ({elapsed:?})");
}

fn random_cls_instance(rng: &mut ChaCha12Rng) -> TrainingInstance {
    let k = rng.gen_range(1..=6);
    let labels = ["a", "b", "c"];
    let n_classes = rng.gen_range(2..=3usize);
    let class_labels: Vec<String> = labels.iter().take(n_classes).map(|s| s.to_string()).collect();
    TrainingInstance {
        table_id: "t".into(),
        query_index: 0,
        shot_k: k,
        task_type: TaskType::Cls,
        prompt: String::new(),
        target: Target::Class(class_labels[0].clone()),
        gold_evidence: BTreeSet::new(),
        evidence_ratio: 0.0,
        seed: 0,
        context: InstanceContext {
            rows: (0..k)
                .map(|_| ContextFeature {
                    similarity: rng.gen_range(-1.0..1.0),
                    label: Value::Text(class_labels[rng.gen_range(0..n_classes)].clone()),
                })
                .collect(),
            class_labels: Some(class_labels),
            reg_prior: None,
        },
    }
}

fn random_reg_instance(rng: &mut ChaCha12Rng) -> TrainingInstance {
    let k = rng.gen_range(1..=6);
    TrainingInstance {
        table_id: "t".into(),
        query_index: 0,
        shot_k: k,
        task_type: TaskType::Reg,
        prompt: String::new(),
        target: Target::Number(rng.gen_range(-5.0..5.0)),
        gold_evidence: BTreeSet::new(),
        evidence_ratio: 0.0,
        seed: 0,
        context: InstanceContext {
            rows: (0..k)
                .map(|_| ContextFeature {
                    similarity: rng.gen_range(-1.0..1.0),
                    label: Value::Number(rng.gen_range(-5.0..5.0)),
                })
                .collect(),
            class_labels: None,
            reg_prior: Some(rng.gen_range(-2.0..2.0)),
        },
    }
}

/// Criterion 4: analytic gradients against central finite differences,
/// including the Taylor-order check of the error over an h sweep.
#[test]
fn acceptance_4_gradient_verification() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let policy = ToyPolicy;

    for trial in 0..100 {
        let params = vec![
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.9..0.9),
            rng.gen_range(-0.8..0.8),
        ];
        let instance = if trial % 2 == 0 {
            random_cls_instance(&mut rng)
        } else {
            random_reg_instance(&mut rng)
        };
        let action = policy.sample(&params, &instance, &mut rng);
        let err = finite_difference_check(&policy, &params, &instance, &action, 1e-5);
        assert!(err < 1e-4, "trial {trial}: max relative error {err}");
    }

    // Taylor-order sweep on a fixed curvature-rich configuration: central
    // differences have error C*h^2, so each decade of h scales the error by
    // about 100 while truncation dominates rounding.
    let mut rng = ChaCha12Rng::seed_from_u64(44);
    let instance = random_reg_instance(&mut rng);
    let params = vec![0.9, -0.4, 0.3, 0.2];
    let action = Action {
        selected: vec![true; instance.shot_k],
        prediction: PredictionValue::Number(3.7),
    };
    let analytic = policy.grad_log_prob(&params, &instance, &action);
    let sweep: Vec<f64> = [1e-6, 1e-5, 1e-4, 1e-3]
        .iter()
        .map(|&h| {
            let mut total = 0.0;
            for coord in 0..4 {
                let mut plus = params.clone();
                plus[coord] += h;
                let mut minus = params.clone();
                minus[coord] -= h;
                let numeric = (policy.log_prob(&plus, &instance, &action)
                    - policy.log_prob(&minus, &instance, &action))
                    / (2.0 * h);
                total += (numeric - analytic[coord]).abs();
            }
            total
        })
        .collect();
    let ratio = sweep[3] / sweep[2].max(1e-300);
    assert!(
        (20.0..=500.0).contains(&ratio),
        "error ratio per decade {ratio} is not O(h^2)-like (sweep {sweep:?})"
    );
    // the quadratic bound fitted at the largest h dominates the sweep down to
    // the rounding floor eps * |f| / h of central differences
    let c_est = sweep[3] / 1e-3f64.powi(2);
    let f_scale = policy.log_prob(&params, &instance, &action).abs().max(1.0);
    for (h, err) in [1e-6, 1e-5, 1e-4].iter().zip(sweep.iter()) {
        let rounding_floor = 4.0 * 1e-14 * f_scale / h;
        assert!(
            *err <= 2.0 * c_est * h * h + rounding_floor,
            "error {err} at h={h} exceeds the quadratic envelope plus rounding floor {rounding_floor}"
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 30, "took {elapsed:?}");
    println!("ACCEPTANCE 4 PASS: gradient verification (100 triples, h-sweep ratio {ratio:.1}, {elapsed:?})");
}

/// Criterion 5: clipped surrogate hand values and the sync-point reduction.
#[test]
fn acceptance_5_surrogate_correctness() {
    assert_eq!(clipped_term(1.5, 1.0, 0.2, 0.28), 1.28);
    let a = -0.37;
    assert_eq!(clipped_term(1.0, a, 0.2, 0.28), a);
    let a = 0.9123;
    assert_eq!(clipped_term(1.0, a, 0.2, 0.28), a);
    assert_eq!(clipped_term(0.5, -1.0, 0.2, 0.28), -0.8);

    // at theta = theta^- the objective is exactly the mean advantage and the
    // KL estimate is zero
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let instance = random_cls_instance(&mut rng);
    let params = ToyParams::init().to_vec();
    let state = BalancerState::new(BalancerConfig::default());
    let group = rollout_group(
        &ToyPolicy,
        &params,
        &instance,
        0,
        8,
        &mut rng,
        &RewardConfig::default(),
        &state,
        &WeightConfig::default(),
    )
    .unwrap();
    let eval = surrogate_objective(
        &ToyPolicy,
        &instance,
        &group,
        &params,
        &group.behavior_log_probs,
        0.2,
        0.28,
        0.001,
    );
    let mean_advantage: f64 =
        group.advantages.combined.iter().sum::<f64>() / group.advantages.combined.len() as f64;
    assert!((eval.objective - mean_advantage).abs() < 1e-12);
    assert!(eval.kl.abs() < 1e-12);
    println!("ACCEPTANCE 5 PASS: surrogate hand values and sync-point reduction");
}

fn training_corpus(seed: u64) -> Vec<TrainingInstance> {
    let tables = bundled_training_tables(16, seed);
    let spec = CorpusSpec {
        filter: FilterConfig::default(),
        context: ContextSpec {
            shots: vec![4, 8, 16],
            pool_size: 16,
            ratio_lo: 0.2,
            ratio_hi: 0.5,
            seed,
        },
        queries_per_table: 4,
    };
    build_corpus(&tables, &spec).unwrap()
}

/// Criterion 6: end-to-end desk-scale training on the bundled
/// planted-cluster corpus.
#[test]
fn acceptance_6_end_to_end_training() {
    let start = Instant::now();
    let instances = training_corpus(0);
    assert!(instances.iter().any(|i| i.task_type == TaskType::Cls));
    assert!(instances.iter().any(|i| i.task_type == TaskType::Reg));

    let init = ToyParams::init().to_vec();
    let cfg = TrainerConfig {
        steps: 500,
        learning_rate: 0.05,
        seed: 0,
        ..TrainerConfig::default()
    };
    let out = train(&ToyPolicy, &init, &instances, &cfg).unwrap();
    assert!(out.diverged_at.is_none());

    let reward_cfg = RewardConfig::default();
    let before = measure_policy(&ToyPolicy, &init, &instances, 8, 999, &reward_cfg);
    let after = measure_policy(&ToyPolicy, &out.params, &instances, 8, 999, &reward_cfg);

    // random-selection baseline sits near the mean evidence ratio
    assert!(
        before.reward_evidence > 0.2 && before.reward_evidence < 0.6,
        "baseline evidence F1 {} is not near the evidence ratio",
        before.reward_evidence
    );
    assert!(
        after.reward_evidence >= 0.8,
        "trained evidence F1 {} < 0.8",
        after.reward_evidence
    );
    let cls_before = before.correctness_cls.expect("cls instances present");
    let cls_after = after.correctness_cls.expect("cls instances present");
    assert!(
        cls_after - cls_before >= 0.15,
        "cls correctness gain {} < 0.15 ({cls_before} -> {cls_after})",
        cls_after - cls_before
    );

    // deterministic per seed
    let again = train(&ToyPolicy, &init, &instances, &cfg).unwrap();
    assert_eq!(out.params, again.params, "training is bit-reproducible");

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}, budget is 5 minutes");
    println!(
        "ACCEPTANCE 6 PASS: evidence F1 {:.3} -> {:.3}, cls correctness {:.3} -> {:.3} in {elapsed:?}",
        before.reward_evidence, after.reward_evidence, cls_before, cls_after
    );
}

/// Criterion 7: balancing ablation. The corpus is constructed so early
/// regression correctness-advantage magnitudes exceed classification's by
/// at least 2x; with everything else identical, the balanced run's mean
/// classification correctness at step 200 must match or beat the
/// vanilla run on at least 4 of 5 seeds.
#[test]
fn acceptance_7_balancing_ablation() {
    let tables = bundled_ablation_tables(16, 0);
    let spec = CorpusSpec {
        filter: FilterConfig::default(),
        context: ContextSpec {
            shots: vec![8, 16],
            pool_size: 16,
            ratio_lo: 0.2,
            ratio_hi: 0.5,
            seed: 0,
        },
        queries_per_table: 4,
    };
    let instances = build_corpus(&tables, &spec).unwrap();
    let init = ToyParams::init().to_vec();
    let reward_cfg = RewardConfig::default();

    // corpus premise: early |A_c| ratio at the initial parameters
    let state = BalancerState::new(BalancerConfig::default());
    let mut cls_sum = (0.0, 0usize);
    let mut reg_sum = (0.0, 0usize);
    for (idx, instance) in instances.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(idx as u64);
        let group = rollout_group(
            &ToyPolicy,
            &init,
            instance,
            idx,
            8,
            &mut rng,
            &reward_cfg,
            &state,
            &WeightConfig::default(),
        )
        .unwrap();
        for a in &group.advantages.correctness {
            match instance.task_type {
                TaskType::Cls => {
                    cls_sum.0 += a.abs();
                    cls_sum.1 += 1;
                }
                TaskType::Reg => {
                    reg_sum.0 += a.abs();
                    reg_sum.1 += 1;
                }
            }
        }
    }
    let early_cls = cls_sum.0 / cls_sum.1 as f64;
    let early_reg = reg_sum.0 / reg_sum.1 as f64;
    assert!(
        early_reg >= 2.0 * early_cls,
        "corpus premise violated: early |A_c| reg {early_reg:.3} vs cls {early_cls:.3}"
    );

    let mut wins = 0;
    let mut deltas = Vec::new();
    for seed in 1..=5u64 {
        let mut cls_scores = Vec::new();
        for balancing in [true, false] {
            let cfg = TrainerConfig {
                steps: 200,
                learning_rate: 0.03,
                seed,
                balancing,
                ..TrainerConfig::default()
            };
            let out = train(&ToyPolicy, &init, &instances, &cfg).unwrap();
            let measured = measure_policy(&ToyPolicy, &out.params, &instances, 32, 777, &reward_cfg);
            cls_scores.push(measured.correctness_cls.expect("cls instances present"));
        }
        deltas.push(cls_scores[0] - cls_scores[1]);
        if cls_scores[0] >= cls_scores[1] {
            wins += 1;
        }
    }
    assert!(
        wins >= 4,
        "balanced run won only {wins}/5 seeds (deltas {deltas:?})"
    );
    println!(
        "ACCEPTANCE 7 PASS: early |A_c| ratio {:.2}, balanced >= vanilla on {wins}/5 seeds (deltas {:?})",
        early_reg / early_cls,
        deltas.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
}

fn random_mi_table(rng: &mut ChaCha12Rng) -> Table {
    let n_rows = rng.gen_range(24..=60);
    let d = rng.gen_range(1..=11);
    let n_classes = rng.gen_range(2..=4);
    let target: Vec<Value> = (0..n_rows)
        .map(|i| Value::Text(format!("c{}", i % n_classes)))
        .collect();
    let mut columns: Vec<Vec<Value>> = Vec::new();
    let mut schema: Vec<ColumnSchema> = Vec::new();
    for j in 0..d {
        let informative = rng.gen_range(0..3);
        let numeric = rng.gen_bool(0.5);
        let col: Vec<Value> = (0..n_rows)
            .map(|i| {
                let class = i % n_classes;
                match informative {
                    // strongly informative: class plus small jitter
                    0 => {
                        if numeric {
                            Value::Number(class as f64 * 3.0 + rng.gen_range(0.0..1.0))
                        } else {
                            Value::Text(format!("v{class}"))
                        }
                    }
                    // weakly informative: corrupted copy
                    1 => {
                        let shown = if rng.gen_bool(0.4) { rng.gen_range(0..n_classes) } else { class };
                        if numeric {
                            Value::Number(shown as f64 + rng.gen_range(0.0..0.5))
                        } else {
                            Value::Text(format!("w{shown}"))
                        }
                    }
                    // noise
                    _ => {
                        if numeric {
                            Value::Number(rng.gen_range(0.0..10.0))
                        } else {
                            Value::Text(format!("n{}", rng.gen_range(0..5)))
                        }
                    }
                }
            })
            .collect();
        columns.push(col);
        schema.push(ColumnSchema {
            name: format!("f{j}"),
            kind: if numeric { ColumnKind::Numeric } else { ColumnKind::Categorical },
            role: ColumnRole::Feature,
        });
    }
    schema.push(ColumnSchema {
        name: "y".into(),
        kind: ColumnKind::Categorical,
        role: ColumnRole::Target,
    });
    let rows: Vec<Vec<Value>> = (0..n_rows)
        .map(|i| {
            let mut row: Vec<Value> = columns.iter().map(|c| c[i].clone()).collect();
            row.push(target[i].clone());
            row
        })
        .collect();
    Table::new(
        "random".into(),
        schema,
        rows,
        TaskType::Cls,
        Some((0..n_classes).map(|c| format!("c{c}")).collect()),
    )
    .unwrap()
}

/// Criterion 8: the MI filter against a brute-force prefix-enumeration
/// oracle on 200 random tables, including the m_min floor and the mass rule.
#[test]
fn acceptance_8_mi_filter_equivalence() {
    let start = Instant::now();
    let cfg = FilterConfig::default(); // rho = 0.9, m_min = 8
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    for trial in 0..200 {
        let table = random_mi_table(&mut rng);
        let scores = feature_mi_scores(&table, &cfg).unwrap();
        let d = scores.len();

        // oracle: stable-sort by score descending, enumerate every prefix,
        // take the smallest whose cumulative mass reaches rho of the total,
        // then apply the floor and cap
        let total: f64 = scores.iter().map(|(_, s)| s).sum();
        let expected_cols: Vec<usize> = if total <= 0.0 {
            scores.iter().take(cfg.m_min.min(d)).map(|(c, _)| *c).collect()
        } else {
            let mut ranked = scores.clone();
            ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            let mut m_star = d;
            for m in 1..=d {
                let cum: f64 = ranked.iter().take(m).map(|(_, s)| s).sum();
                if cum >= cfg.rho * total {
                    m_star = m;
                    break;
                }
            }
            let m_star = m_star.max(cfg.m_min).min(d);
            ranked.iter().take(m_star).map(|(c, _)| *c).collect()
        };
        let mut expected_names: Vec<String> = expected_cols
            .iter()
            .map(|&c| table.schema()[c].name.clone())
            .collect();
        expected_names.sort();

        let filtered = filter_features(&table, &cfg).unwrap();
        let mut got_names: Vec<String> = filtered
            .feature_indices()
            .iter()
            .map(|&c| filtered.schema()[c].name.clone())
            .collect();
        got_names.sort();
        assert_eq!(got_names, expected_names, "trial {trial}");
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 20, "took {elapsed:?}");
    println!("ACCEPTANCE 8 PASS: MI filter equals the prefix oracle on 200 tables ({elapsed:?})");
}

/// Criterion 9: protocol round-trip on 1000 random actions, the NMAE clip
/// and rank-tie hand values, and the full demo pipeline end to end.
#[test]
fn acceptance_9_protocol_and_demo() {
    let start = Instant::now();
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    for trial in 0..1000 {
        let k = rng.gen_range(0..=12usize);
        let selected: BTreeSet<usize> = (1..=k).filter(|_| rng.gen_bool(0.4)).collect();
        let answer = if rng.gen_bool(0.5) {
            format!("{}", rng.gen_range(-1e6..1e6))
        } else {
            format!("class_{}", rng.gen_range(0..9))
        };
        let text = render_action_text(&selected, &answer);
        let parsed = parse_output(&text);
        assert!(parsed.well_formed, "trial {trial}");
        assert_eq!(parsed.selected.unwrap(), selected, "trial {trial}");
        let got = parsed.answer.unwrap();
        assert_eq!(got.raw, answer, "trial {trial}");
        if let Ok(number) = answer.parse::<f64>() {
            assert_eq!(got.number, Some(number), "trial {trial}");
        }
    }

    // NMAE clip hand value: range 10, error 25 -> per-sample 1.0
    assert_eq!(nmae(&[Some(26.0)], &[1.0], 10.0, 1.0).unwrap(), 1.0);
    // rank ties: both methods get 1.5 on an exactly tied cell
    let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    scores.insert("a".into(), [("t".to_string(), 0.7)].into_iter().collect());
    scores.insert("b".into(), [("t".to_string(), 0.7)].into_iter().collect());
    let ranks = rank_methods(&scores, Direction::HigherBetter).unwrap();
    assert_eq!((ranks["a"], ranks["b"]), (1.5, 1.5));

    // full demo via the CLI binary
    let out_dir = std::env::temp_dir().join(format!("tabrl_demo_{}", std::process::id()));
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_tabrl"))
        .args(["demo", "--out"])
        .arg(&out_dir)
        .args(["--seed", "0"])
        .status()
        .expect("demo runs");
    assert!(status.success(), "demo exited with {status}");
    assert!(out_dir.join("DONE").exists());
    assert!(out_dir.join("train/trace.csv").exists());
    assert!(out_dir.join("eval/ranks.json").exists());
    std::fs::remove_dir_all(&out_dir).ok();

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 600, "took {elapsed:?}, budget is 10 minutes");
    println!("ACCEPTANCE 9 PASS: round-trip, metric hand values, demo end-to-end ({elapsed:?})");
}

/// Sanity check shared by criteria 6 and 7: mape and the regression reward
/// agree on the gate arithmetic used throughout.
#[test]
fn mape_gate_arithmetic() {
    assert!((mape(15.0, 10.0, 1e-8) - 0.5).abs() < 1e-9);
    assert!(mape(12.0, 10.0, 1e-8) < 0.25);
    println!("ACCEPTANCE aux PASS: gate arithmetic");
}
