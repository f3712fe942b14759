//! The multi-shot evaluation protocol: metrics, seeded sweeps, rank tables.
//!
//! Every (table, shot budget, seed) cell scores a fixed set of query rows.
//! Query rows are sampled once per (table, shot) and reused across seeds;
//! the seeds vary only the support sets. Classification reports accuracy,
//! regression reports NMAE: per-sample absolute error divided by the
//! table's target range, clipped at `nmae_clip` before averaging. Rank
//! tables are computed per cell across methods (ties get the average rank)
//! and then averaged.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::pipeline::{
    build_instance, embed_rows, fingerprint, prepare_table, ContextSpec, FilterConfig, StandardEmbedder,
};
use crate::policy::{Policy, ToyPolicy};
use crate::prompt::{parse_output, render_action_text};
use crate::synthesis::{Probe, TeacherRequest, TeacherResponse};
use crate::table::{normalize_label, Table, Target, TaskType, TrainingInstance};

const TAG_QUERIES: u64 = 0xe7a1;

/// Evaluation protocol settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub shot_budgets: Vec<usize>,
    pub seeds: Vec<u64>,
    pub nmae_clip: f64,
    /// Query rows scored per (table, shot budget).
    pub sample_cap: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            shot_budgets: vec![0, 4, 8, 16, 32],
            seeds: vec![0, 1, 2],
            nmae_clip: 1.0,
            sample_cap: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nmae_clip <= 0.0 {
            return Err(Error::Config("nmae_clip must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.sample_cap == 0 {
            return Err(Error::Config("sample_cap must be positive".into()));
        }
        Ok(())
    }
}

/// Mean normalized exact-match indicator.
pub fn accuracy(predictions: &[String], labels: &[String]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| normalize_label(p) == normalize_label(l))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mean clipped normalized absolute error. Unparseable predictions (`None`)
/// score the clip value.
pub fn nmae(predictions: &[Option<f64>], labels: &[f64], target_range: f64, clip: f64) -> Result<f64> {
    if target_range <= 0.0 {
        return Err(Error::DegenerateTarget(format!("target range {target_range} must be positive")));
    }
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let total: f64 = predictions
        .iter()
        .zip(labels.iter())
        .map(|(p, y)| match p {
            Some(p) => ((p - y).abs() / target_range).min(clip),
            None => clip,
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Ranking direction for a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Average rank per method over per-cell scores (`method -> cell -> value`).
/// Rank 1 is best; exact ties receive the average of their positions. Every
/// method must score every cell.
pub fn rank_methods(
    scores: &BTreeMap<String, BTreeMap<String, f64>>,
    direction: Direction,
) -> Result<BTreeMap<String, f64>> {
    let methods: Vec<&String> = scores.keys().collect();
    if methods.is_empty() {
        return Err(Error::Config("no methods to rank".into()));
    }
    let cells: Vec<String> = scores[methods[0]].keys().cloned().collect();
    if cells.is_empty() {
        return Err(Error::Config("no cells to rank".into()));
    }
    for method in &methods {
        let keys: Vec<&String> = scores[*method].keys().collect();
        if keys.len() != cells.len() || keys.iter().zip(cells.iter()).any(|(a, b)| *a != b) {
            return Err(Error::Config(format!("method '{method}' is missing cell scores")));
        }
    }
    let mut totals: BTreeMap<String, f64> = methods.iter().map(|m| ((*m).clone(), 0.0)).collect();
    for cell in &cells {
        let mut values: Vec<(&String, f64)> = methods.iter().map(|m| (*m, scores[*m][cell])).collect();
        values.sort_by(|a, b| match direction {
            Direction::HigherBetter => b.1.total_cmp(&a.1),
            Direction::LowerBetter => a.1.total_cmp(&b.1),
        });
        let mut i = 0;
        while i < values.len() {
            let mut j = i;
            while j + 1 < values.len() && values[j + 1].1 == values[i].1 {
                j += 1;
            }
            // positions i..=j share the average rank
            let rank = (i + 1 + j + 1) as f64 / 2.0;
            for entry in values.iter().take(j + 1).skip(i) {
                *totals.get_mut(entry.0).unwrap() += rank;
            }
            i = j + 1;
        }
    }
    Ok(totals
        .into_iter()
        .map(|(m, total)| (m, total / cells.len() as f64))
        .collect())
}

/// A predictor consumes an instance and returns protocol output text.
pub trait Predictor {
    fn predict(&mut self, instance: &TrainingInstance) -> Result<String>;
}

/// Reads the ground truth (and gold evidence) off the instance.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&mut self, instance: &TrainingInstance) -> Result<String> {
        Ok(render_action_text(&instance.gold_evidence, &instance.target.render()))
    }
}

/// Always answers the same value, selecting nothing.
pub struct ConstantPredictor(pub String);

impl Predictor for ConstantPredictor {
    fn predict(&mut self, instance: &TrainingInstance) -> Result<String> {
        let _ = instance;
        Ok(render_action_text(&Default::default(), &self.0))
    }
}

/// How the toy predictor turns parameters into an action.
#[derive(Debug, Clone, Copy)]
pub enum ToyMode {
    /// Deterministic mode action.
    Greedy,
    /// One seeded sample per instance.
    Sample { base_seed: u64 },
}

/// The toy policy as an evaluation predictor.
pub struct ToyPredictor {
    pub params: Vec<f64>,
    pub mode: ToyMode,
}

impl ToyPredictor {
    pub fn greedy(params: Vec<f64>) -> Self {
        ToyPredictor { params, mode: ToyMode::Greedy }
    }
}

impl Predictor for ToyPredictor {
    fn predict(&mut self, instance: &TrainingInstance) -> Result<String> {
        let action = match self.mode {
            ToyMode::Greedy => ToyPolicy.greedy(&self.params, instance),
            ToyMode::Sample { base_seed } => {
                let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(&[
                    base_seed,
                    fingerprint(&instance.table_id),
                    instance.query_index as u64,
                    instance.shot_k as u64,
                ]));
                ToyPolicy.sample(&self.params, instance, &mut rng)
            }
        };
        Ok(ToyPolicy.render(&action))
    }
}

impl Probe for ToyPredictor {
    fn predict(&mut self, instance: &TrainingInstance) -> String {
        Predictor::predict(self, instance).unwrap_or_default()
    }
}

/// Predictor backed by an HTTP endpoint speaking the teacher wire contract
/// with `mode = "predict"`.
pub struct ExternalPredictor {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl ExternalPredictor {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ExternalPredictor {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::new(),
        }
    }
}

impl Predictor for ExternalPredictor {
    fn predict(&mut self, instance: &TrainingInstance) -> Result<String> {
        let request = TeacherRequest {
            prompt: instance.prompt.clone(),
            mode: "predict".into(),
        };
        let response = self
            .client
            .post(&self.endpoint)
            .json(&request)
            .send()
            .map_err(|e| Error::Http(e.to_string()))?;
        if !response.status().is_success() {
            return Err(Error::Http(format!("predictor endpoint returned {}", response.status())));
        }
        let body: TeacherResponse = response.json().map_err(|e| Error::Http(e.to_string()))?;
        let answer = body
            .answer
            .ok_or_else(|| Error::Teacher("predictor response lacks an answer".into()))?;
        let selection = body.selection.unwrap_or_default().into_iter().collect();
        Ok(render_action_text(&selection, &answer))
    }
}

/// One evaluation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCell {
    pub table_id: String,
    pub task_type: TaskType,
    pub shot: usize,
    pub seed: u64,
    pub metric: f64,
    pub n_queries: usize,
    pub failures: usize,
}

/// Full evaluation report for one predictor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    /// Mean metric per shot budget, classification tables.
    pub shot_means_cls: BTreeMap<usize, f64>,
    /// Mean metric per shot budget, regression tables.
    pub shot_means_reg: BTreeMap<usize, f64>,
    pub scored: usize,
    pub failures: usize,
}

impl EvalReport {
    /// `method -> cell` score map for ranking: zero-shot cells keyed by
    /// table, few-shot cells keyed by `table@shot`, seed-averaged.
    pub fn cell_scores(&self, task: TaskType, zero_shot: bool) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for cell in &self.cells {
            if cell.task_type != task || (cell.shot == 0) != zero_shot {
                continue;
            }
            let key = if zero_shot {
                cell.table_id.clone()
            } else {
                format!("{}@{}", cell.table_id, cell.shot)
            };
            let entry = sums.entry(key).or_insert((0.0, 0));
            entry.0 += cell.metric;
            entry.1 += 1;
        }
        sums.into_iter()
            .map(|(k, (total, n))| (k, total / n as f64))
            .collect()
    }
}

/// Runs the full protocol for one predictor over a set of raw tables.
///
/// Tables are prepared through the pipeline (identifier removal, MI
/// filtering); instances are assembled per (table, shot, seed, query) with
/// derived seeds, so two runs with the same configuration produce identical
/// reports. Predictor failures score worst-case (wrong class / clipped
/// error) and are counted.
pub fn run_eval(
    predictor: &mut dyn Predictor,
    tables: &[(String, Table)],
    cfg: &EvalConfig,
    context: &ContextSpec,
    filter: &FilterConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut cells = Vec::new();
    let mut scored = 0usize;
    let mut failures_total = 0usize;
    let mut spec = context.clone();
    spec.shots = cfg.shot_budgets.clone();
    spec.validate()?;

    for (table_id, raw) in tables {
        let table = prepare_table(raw, filter)?;
        let embedder = StandardEmbedder::fit(&table);
        let embeddings = embed_rows(&table, &embedder)?;
        let target_range = match table.task_type() {
            TaskType::Reg => table.target_range()?,
            TaskType::Cls => 0.0,
        };
        for &shot in &cfg.shot_budgets {
            if shot + 1 > table.n_rows() {
                log::warn!("table '{table_id}': skipping shot {shot} (only {} rows)", table.n_rows());
                continue;
            }
            // queries are shared across the support-set seeds
            let mut query_rng = ChaCha12Rng::seed_from_u64(derive_seed(&[
                TAG_QUERIES,
                fingerprint(table_id),
                shot as u64,
            ]));
            let mut candidates: Vec<usize> = (0..table.n_rows()).collect();
            let mut queries = Vec::new();
            for _ in 0..cfg.sample_cap.min(table.n_rows()) {
                let i = query_rng.gen_range(0..candidates.len());
                queries.push(candidates.swap_remove(i));
            }
            for &seed in &cfg.seeds {
                let mut predictions: Vec<String> = Vec::with_capacity(queries.len());
                let mut numbers: Vec<Option<f64>> = Vec::with_capacity(queries.len());
                let mut labels_text: Vec<String> = Vec::with_capacity(queries.len());
                let mut labels_num: Vec<f64> = Vec::with_capacity(queries.len());
                let mut failures = 0usize;
                for &query in &queries {
                    let instance_seed =
                        derive_seed(&[seed, fingerprint(table_id), query as u64, shot as u64]);
                    let instance =
                        build_instance(&table, table_id, &embeddings, query, shot, &spec, instance_seed)?;
                    match &instance.target {
                        Target::Class(label) => labels_text.push(label.clone()),
                        Target::Number(y) => labels_num.push(*y),
                    }
                    match predictor.predict(&instance) {
                        Ok(output) => {
                            let parsed = parse_output(&output);
                            match table.task_type() {
                                TaskType::Cls => predictions.push(
                                    parsed.answer.map(|a| a.raw).unwrap_or_else(|| "\u{0}unparsed".into()),
                                ),
                                TaskType::Reg => numbers.push(parsed.answer.and_then(|a| a.number)),
                            }
                            scored += 1;
                        }
                        Err(e) => {
                            log::warn!("predictor failed on {table_id}/{query}@{shot}: {e}");
                            failures += 1;
                            match table.task_type() {
                                TaskType::Cls => predictions.push("\u{0}failed".into()),
                                TaskType::Reg => numbers.push(None),
                            }
                        }
                    }
                }
                let metric = match table.task_type() {
                    TaskType::Cls => accuracy(&predictions, &labels_text)?,
                    TaskType::Reg => nmae(&numbers, &labels_num, target_range, cfg.nmae_clip)?,
                };
                failures_total += failures;
                cells.push(EvalCell {
                    table_id: table_id.clone(),
                    task_type: table.task_type(),
                    shot,
                    seed,
                    metric,
                    n_queries: queries.len(),
                    failures,
                });
            }
        }
    }

    let mut shot_means_cls: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut shot_means_reg: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for cell in &cells {
        let bucket = match cell.task_type {
            TaskType::Cls => shot_means_cls.entry(cell.shot).or_insert((0.0, 0)),
            TaskType::Reg => shot_means_reg.entry(cell.shot).or_insert((0.0, 0)),
        };
        bucket.0 += cell.metric;
        bucket.1 += 1;
    }
    let finish = |m: BTreeMap<usize, (f64, usize)>| {
        m.into_iter().map(|(k, (t, n))| (k, t / n as f64)).collect()
    };
    Ok(EvalReport {
        cells,
        shot_means_cls: finish(shot_means_cls),
        shot_means_reg: finish(shot_means_reg),
        scored,
        failures: failures_total,
    })
}

/// Average ranks over several named reports: `Rank_z` over zero-shot cells,
/// `Rank_i` over all few-shot cells, computed separately per task type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankSummary {
    pub cls_rank_z: Option<BTreeMap<String, f64>>,
    pub cls_rank_i: Option<BTreeMap<String, f64>>,
    pub reg_rank_z: Option<BTreeMap<String, f64>>,
    pub reg_rank_i: Option<BTreeMap<String, f64>>,
}

/// Computes the rank summary across methods.
pub fn compare_methods(reports: &[(String, EvalReport)]) -> Result<RankSummary> {
    let build = |task: TaskType, zero_shot: bool, direction: Direction| -> Result<Option<BTreeMap<String, f64>>> {
        let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (name, report) in reports {
            let cells = report.cell_scores(task, zero_shot);
            if cells.is_empty() {
                return Ok(None);
            }
            scores.insert(name.clone(), cells);
        }
        if scores.is_empty() {
            return Ok(None);
        }
        rank_methods(&scores, direction).map(Some)
    };
    Ok(RankSummary {
        cls_rank_z: build(TaskType::Cls, true, Direction::HigherBetter)?,
        cls_rank_i: build(TaskType::Cls, false, Direction::HigherBetter)?,
        reg_rank_z: build(TaskType::Reg, true, Direction::LowerBetter)?,
        reg_rank_i: build(TaskType::Reg, false, Direction::LowerBetter)?,
    })
}

/// Writes the per-cell CSV.
pub fn write_cells_csv<P: AsRef<std::path::Path>>(path: P, report: &EvalReport) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "table_id,task_type,shot,seed,metric,n_queries,failures")?;
    for cell in &report.cells {
        writeln!(
            file,
            "{},{},{},{},{:?},{},{}",
            cell.table_id, cell.task_type, cell.shot, cell.seed, cell.metric, cell.n_queries, cell.failures
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_synthetic_table, SyntheticTableSpec};

    #[test]
    fn accuracy_hand_values() {
        let labels = vec!["a".to_string(), "b".to_string()];
        assert_eq!(accuracy(&["a".into(), "b".into()], &labels).unwrap(), 1.0);
        assert_eq!(accuracy(&["a".into(), "x".into()], &labels).unwrap(), 0.5);
        assert!(accuracy(&["a".into()], &labels).is_err());
    }

    #[test]
    fn nmae_hand_values() {
        // perfect predictions
        assert_eq!(nmae(&[Some(1.0), Some(2.0)], &[1.0, 2.0], 10.0, 1.0).unwrap(), 0.0);
        // range 10, single error of 25: per-sample 2.5 clipped to 1.0
        assert_eq!(nmae(&[Some(26.0)], &[1.0], 10.0, 1.0).unwrap(), 1.0);
        // range 10, errors [1, 3]: mean(0.1, 0.3) = 0.2
        let v = nmae(&[Some(2.0), Some(5.0)], &[1.0, 2.0], 10.0, 1.0).unwrap();
        assert!((v - 0.2).abs() < 1e-12);
        // unparseable scores the clip
        assert_eq!(nmae(&[None], &[1.0], 10.0, 1.0).unwrap(), 1.0);
        // degenerate range is an error
        assert!(nmae(&[Some(1.0)], &[1.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn nmae_monotone_in_single_error() {
        let base = nmae(&[Some(2.0), Some(5.0)], &[1.0, 2.0], 10.0, 1.0).unwrap();
        let worse = nmae(&[Some(3.0), Some(5.0)], &[1.0, 2.0], 10.0, 1.0).unwrap();
        assert!(worse >= base);
    }

    #[test]
    fn rank_methods_hand_values() {
        let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        scores.insert(
            "a".into(),
            [("t1".to_string(), 0.9), ("t2".to_string(), 0.8)].into_iter().collect(),
        );
        scores.insert(
            "b".into(),
            [("t1".to_string(), 0.5), ("t2".to_string(), 0.4)].into_iter().collect(),
        );
        let ranks = rank_methods(&scores, Direction::HigherBetter).unwrap();
        assert_eq!(ranks["a"], 1.0);
        assert_eq!(ranks["b"], 2.0);

        // exact tie on one cell: both get 1.5 there
        let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        scores.insert("a".into(), [("t1".to_string(), 0.7)].into_iter().collect());
        scores.insert("b".into(), [("t1".to_string(), 0.7)].into_iter().collect());
        let ranks = rank_methods(&scores, Direction::HigherBetter).unwrap();
        assert_eq!(ranks["a"], 1.5);
        assert_eq!(ranks["b"], 1.5);
    }

    #[test]
    fn rank_methods_matches_sort_oracle_on_random_scores() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..25 {
            let methods = ["m0", "m1", "m2"];
            let tables = ["t0", "t1", "t2", "t3", "t4"];
            let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
            for m in methods {
                let cells: BTreeMap<String, f64> = tables
                    .iter()
                    .map(|t| (t.to_string(), rng.gen_range(0.0..1.0)))
                    .collect();
                scores.insert(m.to_string(), cells);
            }
            let got = rank_methods(&scores, Direction::LowerBetter).unwrap();

            // oracle: per table, full sort ascending, average tied positions
            let mut totals: BTreeMap<&str, f64> = methods.iter().map(|&m| (m, 0.0)).collect();
            for t in tables {
                let mut vals: Vec<(&str, f64)> = methods.iter().map(|&m| (m, scores[m][t])).collect();
                vals.sort_by(|a, b| a.1.total_cmp(&b.1));
                for (pos, (m, v)) in vals.iter().enumerate() {
                    let tied: Vec<usize> = vals
                        .iter()
                        .enumerate()
                        .filter(|(_, (_, other))| other == v)
                        .map(|(p, _)| p + 1)
                        .collect();
                    let _ = pos;
                    let rank = tied.iter().sum::<usize>() as f64 / tied.len() as f64;
                    *totals.get_mut(m).unwrap() += rank;
                }
            }
            for m in methods {
                let expected = totals[m] / tables.len() as f64;
                assert!((got[m] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accuracy_matches_counting_oracle_on_large_vector() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let n = 5000;
        let labels: Vec<String> = (0..n).map(|_| format!("c{}", rng.gen_range(0..4))).collect();
        let predictions: Vec<String> = labels
            .iter()
            .map(|l| {
                if rng.gen_bool(0.37) {
                    l.clone()
                } else {
                    format!("c{}", rng.gen_range(4..9))
                }
            })
            .collect();
        let mut hits = 0usize;
        for i in 0..n {
            if predictions[i].trim().to_lowercase() == labels[i].trim().to_lowercase() {
                hits += 1;
            }
        }
        let got = accuracy(&predictions, &labels).unwrap();
        assert_eq!(got, hits as f64 / n as f64);
    }

    #[test]
    fn rank_methods_rejects_missing_cells() {
        let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        scores.insert("a".into(), [("t1".to_string(), 0.7)].into_iter().collect());
        scores.insert("b".into(), BTreeMap::new());
        assert!(rank_methods(&scores, Direction::HigherBetter).is_err());
    }

    #[test]
    fn rank_invariant_under_monotone_transform() {
        let mut scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        for (m, v) in [("a", 0.3), ("b", 0.9), ("c", 0.6)] {
            scores.insert(m.into(), [("t".to_string(), v)].into_iter().collect());
        }
        let base = rank_methods(&scores, Direction::HigherBetter).unwrap();
        let mut transformed = scores.clone();
        for cell in transformed.values_mut() {
            for v in cell.values_mut() {
                *v = v.exp() * 3.0 + 1.0;
            }
        }
        assert_eq!(base, rank_methods(&transformed, Direction::HigherBetter).unwrap());
    }

    fn small_tables(seed: u64) -> Vec<(String, Table)> {
        vec![
            (
                "cls".into(),
                generate_synthetic_table(&SyntheticTableSpec::cls(34, 4, 2, 0.5, seed)).unwrap(),
            ),
            (
                "reg".into(),
                generate_synthetic_table(&SyntheticTableSpec::reg(40, 4, 0, 0.5, seed + 1)).unwrap(),
            ),
        ]
    }

    fn small_context() -> ContextSpec {
        ContextSpec {
            shots: vec![0, 4],
            pool_size: 8,
            ratio_lo: 0.0,
            ratio_hi: 0.5,
            seed: 0,
        }
    }

    fn small_cfg() -> EvalConfig {
        EvalConfig {
            shot_budgets: vec![0, 4],
            seeds: vec![0, 1],
            nmae_clip: 1.0,
            sample_cap: 4,
        }
    }

    #[test]
    fn oracle_scores_perfectly() {
        let tables = small_tables(5);
        let report = run_eval(
            &mut OraclePredictor,
            &tables,
            &small_cfg(),
            &small_context(),
            &FilterConfig::default(),
        )
        .unwrap();
        for cell in &report.cells {
            match cell.task_type {
                TaskType::Cls => assert_eq!(cell.metric, 1.0),
                TaskType::Reg => assert_eq!(cell.metric, 0.0),
            }
        }
        assert_eq!(report.failures, 0);
        // totals: tables x shots x seeds x queries
        assert_eq!(report.scored, 2 * 2 * 2 * 4);
    }

    #[test]
    fn constant_predictor_on_balanced_binary() {
        let tables = vec![(
            "cls".to_string(),
            generate_synthetic_table(&SyntheticTableSpec::cls(40, 4, 2, 0.5, 9)).unwrap(),
        )];
        let cfg = EvalConfig {
            shot_budgets: vec![0],
            seeds: vec![0],
            nmae_clip: 1.0,
            sample_cap: 40,
        };
        let mut predictor = ConstantPredictor("class_0".into());
        let report = run_eval(&mut predictor, &tables, &cfg, &small_context(), &FilterConfig::default()).unwrap();
        // the generator assigns classes round-robin, so the table is balanced
        let acc = report.cells[0].metric;
        assert!((acc - 0.5).abs() < 1e-9, "got {acc}");
    }

    #[test]
    fn eval_is_deterministic() {
        let tables = small_tables(7);
        let run = || {
            run_eval(
                &mut OraclePredictor,
                &tables,
                &small_cfg(),
                &small_context(),
                &FilterConfig::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    struct FailingPredictor;

    impl Predictor for FailingPredictor {
        fn predict(&mut self, _instance: &TrainingInstance) -> Result<String> {
            Err(Error::Teacher("down".into()))
        }
    }

    #[test]
    fn failures_score_worst_case() {
        let tables = small_tables(11);
        let report = run_eval(
            &mut FailingPredictor,
            &tables,
            &small_cfg(),
            &small_context(),
            &FilterConfig::default(),
        )
        .unwrap();
        assert_eq!(report.scored, 0);
        assert_eq!(report.failures, 2 * 2 * 2 * 4);
        for cell in &report.cells {
            match cell.task_type {
                TaskType::Cls => assert_eq!(cell.metric, 0.0),
                TaskType::Reg => assert_eq!(cell.metric, 1.0),
            }
        }
    }

    #[test]
    fn compare_methods_ranks_oracle_first() {
        let tables = small_tables(13);
        let cfg = small_cfg();
        let ctx = small_context();
        let filter = FilterConfig::default();
        let oracle = run_eval(&mut OraclePredictor, &tables, &cfg, &ctx, &filter).unwrap();
        let constant = run_eval(
            &mut ConstantPredictor("nope".into()),
            &tables,
            &cfg,
            &ctx,
            &filter,
        )
        .unwrap();
        let summary = compare_methods(&[
            ("oracle".to_string(), oracle),
            ("constant".to_string(), constant),
        ])
        .unwrap();
        let z = summary.cls_rank_z.unwrap();
        assert!(z["oracle"] < z["constant"]);
        let i = summary.reg_rank_i.unwrap();
        assert!(i["oracle"] < i["constant"]);
    }
}
