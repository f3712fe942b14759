//! Cold-start corpus synthesis with a pluggable teacher and strict
//! rejection gates.
//!
//! The workflow per instance: the teacher is told how many evidential rows
//! exist and must select exactly that many (wrong cardinality rejects the
//! trajectory); the selection trace is rewritten to hide the count; the
//! teacher then predicts, with up to `max_retries` attempts gated on exact
//! match (classification) or relative error below `mape_gate` followed by
//! refinement to the exact value (regression); finally the assembled trace
//! must pass a length band and a judge. Every rejection carries its
//! first-failing reason.
//!
//! [`filter_rl_instances`] applies the difficulty filter for RL training:
//! instances a single-pass probe already answers correctly are dropped, as
//! are instances whose synthesis exhausted its retries.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::pipeline::{build_corpus, detect_identifier_columns, fingerprint, CorpusSpec};
use crate::prompt::extract_number;
use crate::rewards::mape;
use crate::table::{normalize_label, ColumnKind, Table, Target, TrainingInstance};

/// Why a trajectory was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TargetVote,
    EvidenceMismatch,
    PredictionGate,
    RetriesExhausted,
    Length,
    Judge,
}

/// A synthesized trajectory and its gate outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub instance: TrainingInstance,
    pub trace: String,
    pub selected: BTreeSet<usize>,
    pub answer: String,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
}

/// Teacher contract. Implementations must be deterministic under a fixed
/// seed; `select_evidence` returns exactly `e_count` indices when it
/// succeeds.
pub trait Teacher {
    /// Re-derives the internal stream so corpora are order-independent.
    fn reseed(&mut self, seed: u64);
    /// Accept/reject a column as a prediction target.
    fn propose_target(&mut self, table: &Table, column: &str) -> Result<bool>;
    /// Returns (selection trace, selected display indices).
    fn select_evidence(&mut self, instance: &TrainingInstance, e_count: usize) -> Result<(String, BTreeSet<usize>)>;
    /// Returns (prediction trace, boxed answer text).
    fn predict(&mut self, instance: &TrainingInstance, trace: &str) -> Result<(String, String)>;
    /// Removes statements that reveal prior knowledge of the evidence count.
    fn rewrite_trace(&mut self, trace: &str) -> Result<String>;
}

/// Trace-quality judge.
pub trait Judge {
    fn accept(&self, trace: &str, instance: &TrainingInstance) -> bool;
}

/// Accepts everything.
pub struct PassAllJudge;

impl Judge for PassAllJudge {
    fn accept(&self, _trace: &str, _instance: &TrainingInstance) -> bool {
        true
    }
}

/// Rejects traces without any digit, and (for few-shot instances) traces
/// without a selection-rationale keyword.
pub struct HeuristicJudge {
    pub rationale_keywords: Vec<String>,
}

impl Default for HeuristicJudge {
    fn default() -> Self {
        HeuristicJudge {
            rationale_keywords: vec!["select".into(), "evidence".into(), "similar".into()],
        }
    }
}

impl Judge for HeuristicJudge {
    fn accept(&self, trace: &str, instance: &TrainingInstance) -> bool {
        if !trace.chars().any(|c| c.is_ascii_digit()) {
            return false;
        }
        if instance.shot_k > 0 {
            let lower = trace.to_lowercase();
            if !self.rationale_keywords.iter().any(|k| lower.contains(k.as_str())) {
                return false;
            }
        }
        true
    }
}

/// Synthesis gate settings.
#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub max_retries: usize,
    /// Regression acceptance gate on relative error.
    pub mape_gate: f64,
    /// Whitespace-token length band for the final trace.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Self-consistency votes per candidate target column (odd).
    pub n_votes: usize,
    /// Cap on accepted targets per table in corpus synthesis.
    pub max_targets_per_table: usize,
    pub delta: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            max_retries: 5,
            mape_gate: 0.25,
            min_tokens: 50,
            max_tokens: 4000,
            n_votes: 5,
            max_targets_per_table: 2,
            delta: 1e-8,
        }
    }
}

/// Majority-vote target selection over the candidate columns (non-identifier
/// numeric or categorical columns, the current target first). A column
/// becomes a target iff a strict majority of `n_votes` samples accepts;
/// teacher failures count as rejections.
pub fn select_targets(table: &Table, teacher: &mut dyn Teacher, n_votes: usize) -> Result<Vec<String>> {
    if n_votes < 3 || n_votes.is_multiple_of(2) {
        return Err(Error::Config(format!("n_votes must be odd and at least 3, got {n_votes}")));
    }
    let identifiers = detect_identifier_columns(table);
    let mut candidates: Vec<String> = vec![table.target_name().to_string()];
    for col in table.schema() {
        if col.name != table.target_name()
            && !identifiers.contains(&col.name)
            && matches!(col.kind, ColumnKind::Numeric | ColumnKind::Categorical)
        {
            candidates.push(col.name.clone());
        }
    }
    let mut accepted = Vec::new();
    for column in candidates {
        let mut yes = 0usize;
        for _ in 0..n_votes {
            match teacher.propose_target(table, &column) {
                Ok(true) => yes += 1,
                Ok(false) => {}
                Err(e) => log::warn!("teacher failed on column '{column}': {e}; counted as reject"),
            }
        }
        if yes * 2 > n_votes {
            accepted.push(column);
        }
    }
    Ok(accepted)
}

fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn reject(instance: &TrainingInstance, trace: String, reason: RejectReason) -> TrajectoryRecord {
    TrajectoryRecord {
        instance: instance.clone(),
        trace,
        selected: BTreeSet::new(),
        answer: String::new(),
        accepted: false,
        reject_reason: Some(reason),
    }
}

/// Runs the full per-instance synthesis workflow. Failures do not raise;
/// they are encoded in the record's `reject_reason`.
pub fn synthesize_trajectory(
    instance: &TrainingInstance,
    teacher: &mut dyn Teacher,
    cfg: &SynthesisConfig,
    judge: &dyn Judge,
) -> TrajectoryRecord {
    let e_count = instance.gold_evidence.len();
    let (selection_trace, selected) = if instance.shot_k > 0 {
        let (raw_trace, selected) = match teacher.select_evidence(instance, e_count) {
            Ok(pair) => pair,
            Err(e) => {
                log::warn!("teacher selection failed: {e}");
                return reject(instance, String::new(), RejectReason::EvidenceMismatch);
            }
        };
        if selected.len() != e_count {
            return reject(instance, raw_trace, RejectReason::EvidenceMismatch);
        }
        let rewritten = match teacher.rewrite_trace(&raw_trace) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("trace rewrite failed: {e}");
                return reject(instance, raw_trace, RejectReason::EvidenceMismatch);
            }
        };
        (rewritten, selected)
    } else {
        (String::new(), BTreeSet::new())
    };

    let mut outcome: Option<(String, String)> = None;
    for _attempt in 0..cfg.max_retries {
        let (pred_trace, answer) = match teacher.predict(instance, &selection_trace) {
            Ok(pair) => pair,
            Err(e) => {
                log::warn!("teacher prediction failed: {e}");
                return reject(instance, selection_trace, RejectReason::PredictionGate);
            }
        };
        match &instance.target {
            Target::Class(label) => {
                if normalize_label(&answer) == normalize_label(label) {
                    outcome = Some((pred_trace, answer));
                    break;
                }
            }
            Target::Number(y) => {
                if let Some(predicted) = extract_number(&answer) {
                    if mape(predicted, *y, cfg.delta) < cfg.mape_gate {
                        // refinement: the accepted boxed value is made exact
                        outcome = Some((pred_trace, format!("{y}")));
                        break;
                    }
                }
            }
        }
    }
    let Some((prediction_trace, answer)) = outcome else {
        return reject(instance, selection_trace, RejectReason::RetriesExhausted);
    };

    let trace = if selection_trace.is_empty() {
        format!("{prediction_trace}\nThe final answer is \\boxed{{{answer}}}.")
    } else {
        format!("{selection_trace}\n{prediction_trace}\nThe final answer is \\boxed{{{answer}}}.")
    };

    let tokens = token_count(&trace);
    if tokens < cfg.min_tokens || tokens > cfg.max_tokens {
        return reject(instance, trace, RejectReason::Length);
    }
    if !judge.accept(&trace, instance) {
        return reject(instance, trace, RejectReason::Judge);
    }
    TrajectoryRecord {
        instance: instance.clone(),
        trace,
        selected,
        answer,
        accepted: true,
        reject_reason: None,
    }
}

/// Synthesizes trajectories for a set of raw tables: target vote,
/// (re-)targeting, pipeline instance construction, then per-instance
/// synthesis. Deterministic under the pipeline seed (the teacher is reseeded
/// per instance).
pub fn synthesize_corpus(
    tables: &[(String, Table)],
    teacher: &mut dyn Teacher,
    pipeline: &CorpusSpec,
    cfg: &SynthesisConfig,
    judge: &dyn Judge,
) -> Result<Vec<TrajectoryRecord>> {
    let mut targeted: Vec<(String, Table)> = Vec::new();
    for (table_id, table) in tables {
        teacher.reseed(derive_seed(&[pipeline.context.seed, fingerprint(table_id), 0x70f3]));
        let accepted = select_targets(table, teacher, cfg.n_votes)?;
        if accepted.is_empty() {
            log::warn!("table '{table_id}': every candidate target was voted down");
            continue;
        }
        for column in accepted.iter().take(cfg.max_targets_per_table) {
            if column == table.target_name() {
                targeted.push((table_id.clone(), table.clone()));
            } else {
                match table.retargeted(column) {
                    Ok(t) => targeted.push((format!("{table_id}__{column}"), t)),
                    Err(e) => log::warn!("table '{table_id}': cannot retarget to '{column}': {e}"),
                }
            }
        }
    }
    let instances = build_corpus(&targeted, pipeline)?;
    let mut records = Vec::with_capacity(instances.len());
    for instance in &instances {
        teacher.reseed(derive_seed(&[
            pipeline.context.seed,
            fingerprint(&instance.table_id),
            instance.query_index as u64,
            instance.shot_k as u64,
        ]));
        records.push(synthesize_trajectory(instance, teacher, cfg, judge));
    }
    Ok(records)
}

/// Single-pass predictor used by the RL difficulty filter.
pub trait Probe {
    fn predict(&mut self, instance: &TrainingInstance) -> String;
}

/// Difficulty filter for the RL set: drops instances the probe answers
/// correctly in one pass (classification exact; regression relative error
/// below 0.25) and instances whose synthesis exhausted its retries. The
/// result preserves input order.
pub fn filter_rl_instances(records: &[TrajectoryRecord], probe: &mut dyn Probe) -> Vec<TrainingInstance> {
    let mut kept = Vec::new();
    for record in records {
        if record.reject_reason == Some(RejectReason::RetriesExhausted) {
            continue;
        }
        let output = probe.predict(&record.instance);
        let parsed = crate::prompt::parse_output(&output);
        let solved = match (&record.instance.target, parsed.answer.as_ref()) {
            (Target::Class(label), Some(answer)) => {
                normalize_label(&answer.raw) == normalize_label(label)
            }
            (Target::Number(y), Some(answer)) => answer
                .number
                .map(|p| mape(p, *y, 1e-8) < 0.25)
                .unwrap_or(false),
            (_, None) => false,
        };
        if !solved {
            kept.push(record.instance.clone());
        }
    }
    if kept.is_empty() {
        log::warn!("RL difficulty filter kept no instances");
    }
    kept
}

/// Reads trajectory records from JSON Lines.
pub fn read_records_jsonl<P: AsRef<std::path::Path>>(path: P) -> Result<Vec<TrajectoryRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}

/// Writes trajectory records as JSON Lines.
pub fn write_records_jsonl<P: AsRef<std::path::Path>>(path: P, records: &[TrajectoryRecord]) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    for record in records {
        serde_json::to_writer(&mut file, record)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Deterministic mock teacher.
///
/// Selects the `e_count` most similar context rows, predicts with a
/// similarity-weighted vote (classification) or mean (regression), and
/// exposes knobs that make every rejection gate reachable: `noise` perturbs
/// predictions across retries, `miscount_prob` returns wrong-cardinality
/// selections, `reg_bias` forces a fixed multiplicative error, and `oracle`
/// short-circuits to the ground truth.
#[derive(Debug, Clone)]
pub struct MockTeacher {
    rng: ChaCha12Rng,
    pub noise: f64,
    pub miscount_prob: f64,
    pub reg_bias: Option<f64>,
    pub oracle: bool,
    pub scrub_phrases: Vec<String>,
}

impl MockTeacher {
    pub fn new(seed: u64) -> Self {
        MockTeacher {
            rng: ChaCha12Rng::seed_from_u64(seed),
            noise: 0.1,
            miscount_prob: 0.0,
            reg_bias: None,
            oracle: false,
            scrub_phrases: vec!["evidential rows".into()],
        }
    }

    /// A teacher that always answers with the ground truth.
    pub fn oracle(seed: u64) -> Self {
        MockTeacher {
            oracle: true,
            noise: 0.0,
            ..MockTeacher::new(seed)
        }
    }

    fn ranked_rows(instance: &TrainingInstance) -> Vec<usize> {
        let mut order: Vec<usize> = (0..instance.context.rows.len()).collect();
        order.sort_by(|&i, &j| {
            instance.context.rows[j]
                .similarity
                .total_cmp(&instance.context.rows[i].similarity)
                .then(i.cmp(&j))
        });
        order
    }

    fn estimate(&mut self, instance: &TrainingInstance, rows: &BTreeSet<usize>) -> String {
        match &instance.target {
            Target::Class(_) => {
                let labels = instance.context.class_labels.as_deref().unwrap_or(&[]);
                let mut votes = vec![0.0f64; labels.len()];
                let chosen: Vec<usize> = if rows.is_empty() {
                    (0..instance.context.rows.len()).collect()
                } else {
                    rows.iter().map(|&d| d - 1).collect()
                };
                for k in chosen {
                    let row = &instance.context.rows[k];
                    let key = normalize_label(&row.label.render());
                    if let Some(j) = labels.iter().position(|l| normalize_label(l) == key) {
                        votes[j] += row.similarity.max(0.05);
                    }
                }
                let mut best = 0usize;
                for (j, v) in votes.iter().enumerate() {
                    if *v > votes[best] {
                        best = j;
                    }
                }
                if !labels.is_empty() && self.noise > 0.0 && self.rng.gen::<f64>() < self.noise {
                    best = self.rng.gen_range(0..labels.len());
                }
                labels.get(best).cloned().unwrap_or_default()
            }
            Target::Number(_) => {
                let chosen: Vec<usize> = if rows.is_empty() {
                    (0..instance.context.rows.len()).collect()
                } else {
                    rows.iter().map(|&d| d - 1).collect()
                };
                let mut num = 0.0;
                let mut den = 0.0;
                for k in &chosen {
                    let row = &instance.context.rows[*k];
                    let w = row.similarity.max(0.05);
                    num += w * row.label.as_number().unwrap_or(0.0);
                    den += w;
                }
                let mut estimate = if den > 0.0 {
                    num / den
                } else {
                    instance.reg_prior().unwrap_or(0.0)
                };
                if self.noise > 0.0 {
                    let wobble: f64 = self.rng.sample(StandardNormal);
                    estimate *= 1.0 + self.noise * wobble;
                }
                format!("{estimate}")
            }
        }
    }
}

impl Teacher for MockTeacher {
    fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha12Rng::seed_from_u64(seed);
    }

    fn propose_target(&mut self, table: &Table, column: &str) -> Result<bool> {
        let index = table
            .schema()
            .iter()
            .position(|c| c.name == column)
            .ok_or_else(|| Error::Teacher(format!("no column named '{column}'")))?;
        let col = &table.schema()[index];
        let mut distinct = BTreeSet::new();
        for row in table.rows() {
            if let Some(key) = row[index].category_key() {
                distinct.insert(key);
            }
        }
        let distinct_ratio = distinct.len() as f64 / table.n_rows().max(1) as f64;
        let base = match col.kind {
            ColumnKind::Numeric => 0.85,
            ColumnKind::Categorical => 0.75,
            ColumnKind::Text => 0.05,
        };
        let inferable = if col.kind != ColumnKind::Numeric && distinct_ratio > 0.5 {
            0.05
        } else {
            base
        };
        Ok(self.rng.gen::<f64>() < inferable)
    }

    fn select_evidence(&mut self, instance: &TrainingInstance, e_count: usize) -> Result<(String, BTreeSet<usize>)> {
        let ranked = Self::ranked_rows(instance);
        let mut selected: BTreeSet<usize> = ranked.iter().take(e_count).map(|&k| k + 1).collect();
        if self.miscount_prob > 0.0 && self.rng.gen::<f64>() < self.miscount_prob {
            if selected.is_empty() {
                selected.insert(1);
            } else {
                let first = *selected.iter().next().unwrap();
                selected.remove(&first);
            }
        }
        let listed: Vec<String> = selected.iter().map(|i| i.to_string()).collect();
        let listed = if listed.is_empty() { "none".to_string() } else { listed.join(", ") };
        let trace = format!(
            "Reading the table schema first, the feature columns jointly determine the target, \
             so context rows whose feature patterns closely match the query row should carry the \
             most predictive signal for this task. There are exactly {e_count} evidential rows \
             among the candidates. Ranking the context rows by their similarity to the query row \
             separates a clearly stronger group from the weakly related remainder, and the gap \
             between the two groups is wide enough to trust. On that basis I will rely on rows \
             {listed} as supporting evidence for the prediction. <select> {} </select>",
            selected.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ")
        );
        Ok((trace, selected))
    }

    fn predict(&mut self, instance: &TrainingInstance, trace: &str) -> Result<(String, String)> {
        let selected: BTreeSet<usize> = crate::prompt::parse_output(&format!("{trace}\\boxed{{0}}"))
            .selected
            .unwrap_or_default();
        let answer = if self.oracle {
            instance.target.render()
        } else if let (Target::Number(y), Some(bias)) = (&instance.target, self.reg_bias) {
            format!("{}", y * bias)
        } else {
            self.estimate(instance, &selected)
        };
        let pred_trace = format!(
            "Working from the chosen evidence, the feature values of those rows bracket the query \
             closely on the most informative columns, and the target varies smoothly with them. \
             Combining the evidence labels weighted by similarity, and cross-checking the result \
             against the candidate range shown in the prompt, the estimate stays consistent across \
             2 independent readings, so I commit to {answer} as the prediction."
        );
        Ok((pred_trace, answer))
    }

    fn rewrite_trace(&mut self, trace: &str) -> Result<String> {
        Ok(remove_sentences(trace, &self.scrub_phrases))
    }
}

/// Drops every sentence (period-delimited) containing one of the phrases.
fn remove_sentences(text: &str, phrases: &[String]) -> String {
    let mut out = String::new();
    let bytes = text.as_bytes();
    let mut start = 0usize;
    let mut i = 0usize;
    while i <= bytes.len() {
        let at_end = i == bytes.len();
        if at_end || bytes[i] == b'.' {
            let end = if at_end { i } else { i + 1 };
            if start < end {
                let sentence = &text[start..end];
                if !phrases.iter().any(|p| sentence.contains(p.as_str())) {
                    out.push_str(sentence);
                }
            }
            start = end;
        }
        i += 1;
    }
    out
}

/// Wire format of the external teacher request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherRequest {
    pub prompt: String,
    pub mode: String,
}

/// Wire format of the external teacher response.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TeacherResponse {
    #[serde(default)]
    pub trace: Option<String>,
    #[serde(default)]
    pub selection: Option<Vec<usize>>,
    #[serde(default)]
    pub answer: Option<String>,
}

/// Teacher backed by an HTTP endpoint speaking the
/// [`TeacherRequest`]/[`TeacherResponse`] JSON contract.
pub struct ExternalTeacher {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl ExternalTeacher {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ExternalTeacher {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::new(),
        }
    }

    fn call(&self, request: &TeacherRequest) -> Result<TeacherResponse> {
        let response = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .map_err(|e| Error::Http(e.to_string()))?;
        if !response.status().is_success() {
            return Err(Error::Http(format!("teacher endpoint returned {}", response.status())));
        }
        response.json().map_err(|e| Error::Http(e.to_string()))
    }
}

impl Teacher for ExternalTeacher {
    fn reseed(&mut self, _seed: u64) {}

    fn propose_target(&mut self, table: &Table, column: &str) -> Result<bool> {
        let schema: Vec<String> = table
            .schema()
            .iter()
            .map(|c| format!("{} ({:?})", c.name, c.kind).to_lowercase())
            .collect();
        let request = TeacherRequest {
            prompt: format!(
                "Table '{}' has columns: {}. Should column '{}' serve as a prediction target? \
                 Answer accept or reject.",
                table.name(),
                schema.join(", "),
                column
            ),
            mode: "propose_target".into(),
        };
        let response = self.call(&request)?;
        let answer = response
            .answer
            .ok_or_else(|| Error::Teacher("propose_target response lacks an answer".into()))?;
        Ok(normalize_label(&answer) == "accept")
    }

    fn select_evidence(&mut self, instance: &TrainingInstance, e_count: usize) -> Result<(String, BTreeSet<usize>)> {
        let request = TeacherRequest {
            prompt: format!(
                "{}\nThere are exactly {e_count} evidential rows among the context rows. \
                 Select exactly {e_count} rows.",
                instance.prompt
            ),
            mode: "select_evidence".into(),
        };
        let response = self.call(&request)?;
        let trace = response
            .trace
            .ok_or_else(|| Error::Teacher("select_evidence response lacks a trace".into()))?;
        let selection = response
            .selection
            .ok_or_else(|| Error::Teacher("select_evidence response lacks a selection".into()))?;
        Ok((trace, selection.into_iter().collect()))
    }

    fn predict(&mut self, instance: &TrainingInstance, trace: &str) -> Result<(String, String)> {
        let request = TeacherRequest {
            prompt: format!("{}\nPrior reasoning:\n{}", instance.prompt, trace),
            mode: "predict".into(),
        };
        let response = self.call(&request)?;
        let answer = response
            .answer
            .ok_or_else(|| Error::Teacher("predict response lacks an answer".into()))?;
        Ok((response.trace.unwrap_or_default(), answer))
    }

    fn rewrite_trace(&mut self, trace: &str) -> Result<String> {
        let request = TeacherRequest {
            prompt: trace.to_string(),
            mode: "rewrite".into(),
        };
        let response = self.call(&request)?;
        response
            .trace
            .ok_or_else(|| Error::Teacher("rewrite response lacks a trace".into()))
    }
}
