//! Task construction: from raw tables to training instances.
//!
//! The preparation path is: flag identifier-like columns, rank the remaining
//! features by plug-in mutual information with the target and keep the
//! smallest prefix carrying a `rho` fraction of the total MI mass (never
//! fewer than `m_min` features), embed rows, retrieve a top-`pool_size`
//! evidence pool by cosine similarity, and assemble each context by mixing
//! pool rows with randomly drawn non-pool rows at an evidence ratio sampled
//! uniformly from a configured interval.
//!
//! Everything here is a pure function of its inputs; randomness enters only
//! through explicitly passed seeded generators.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::prompt::render_prompt;
use crate::table::{
    ColumnKind, ContextFeature, ContextRow, ContextSet, InstanceContext, Table, Target, TaskType,
    TrainingInstance, Value,
};

/// Mutual-information filter settings.
#[derive(Debug, Clone)]
pub struct FilterConfig {
    /// Fraction of the total MI mass the kept prefix must reach.
    pub rho: f64,
    /// Minimum number of features retained.
    pub m_min: usize,
    /// Bin budget for discretizing continuous features.
    pub n_bins: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            rho: 0.9,
            m_min: 8,
            n_bins: 16,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.m_min < 1 {
            return Err(Error::Config("m_min must be at least 1".into()));
        }
        if self.n_bins < 2 {
            return Err(Error::Config("n_bins must be at least 2".into()));
        }
        Ok(())
    }
}

/// Context assembly settings.
#[derive(Debug, Clone)]
pub struct ContextSpec {
    /// Allowed shot budgets.
    pub shots: Vec<usize>,
    /// Evidence pool size (top neighbors by cosine similarity).
    pub pool_size: usize,
    /// Evidence ratio is drawn uniformly from `[ratio_lo, ratio_hi]`.
    pub ratio_lo: f64,
    pub ratio_hi: f64,
    /// Base seed for per-instance stream derivation.
    pub seed: u64,
}

impl Default for ContextSpec {
    fn default() -> Self {
        ContextSpec {
            shots: vec![0, 4, 8, 16, 32],
            pool_size: 32,
            ratio_lo: 0.0,
            ratio_hi: 0.5,
            seed: 0,
        }
    }
}

impl ContextSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio_lo < 0.0 || self.ratio_hi > 1.0 || self.ratio_lo > self.ratio_hi {
            return Err(Error::Config(format!(
                "evidence ratio range [{}, {}] must satisfy 0 <= lo <= hi <= 1",
                self.ratio_lo, self.ratio_hi
            )));
        }
        let max_shot = self.shots.iter().copied().max().unwrap_or(0);
        let needed = (max_shot as f64 * self.ratio_hi).ceil() as usize;
        if self.pool_size < needed {
            return Err(Error::Config(format!(
                "pool_size {} is below max_shot * ratio_hi = {}",
                self.pool_size, needed
            )));
        }
        Ok(())
    }
}

/// Row-to-vector map. Same row must always produce the same vector, and all
/// vectors share the dimension.
pub trait RowEmbedder {
    fn dim(&self) -> usize;
    /// Embeds the feature cells of one row (feature-column order).
    fn embed(&self, features: &[Value]) -> Vec<f64>;
}

enum ColumnEncoder {
    Numeric { mean: f64, std: f64 },
    OneHot { categories: Vec<String> },
}

/// Built-in embedder: z-scored numerics concatenated with one-hot
/// categoricals, L2-normalized. Zero-variance numerics and missing cells
/// contribute zeros.
pub struct StandardEmbedder {
    encoders: Vec<ColumnEncoder>,
    dim: usize,
}

impl StandardEmbedder {
    pub fn fit(table: &Table) -> Self {
        let mut encoders = Vec::new();
        let mut dim = 0usize;
        for &col in &table.feature_indices() {
            let values = table.column_values(col);
            let numeric = table.schema()[col].kind == ColumnKind::Numeric
                && values.iter().all(|v| !matches!(v, Value::Text(_)));
            if numeric {
                let nums: Vec<f64> = values.iter().filter_map(|v| v.as_number()).collect();
                let mean = if nums.is_empty() {
                    0.0
                } else {
                    nums.iter().sum::<f64>() / nums.len() as f64
                };
                let var = if nums.is_empty() {
                    0.0
                } else {
                    nums.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nums.len() as f64
                };
                encoders.push(ColumnEncoder::Numeric { mean, std: var.sqrt() });
                dim += 1;
            } else {
                let mut cats = BTreeSet::new();
                for v in &values {
                    if let Some(key) = v.category_key() {
                        cats.insert(key);
                    }
                }
                let categories: Vec<String> = cats.into_iter().collect();
                dim += categories.len();
                encoders.push(ColumnEncoder::OneHot { categories });
            }
        }
        StandardEmbedder { encoders, dim }
    }
}

impl RowEmbedder for StandardEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, features: &[Value]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for (enc, value) in self.encoders.iter().zip(features.iter()) {
            match enc {
                ColumnEncoder::Numeric { mean, std } => {
                    let z = match value.as_number() {
                        Some(v) if *std > 0.0 => (v - mean) / std,
                        _ => 0.0,
                    };
                    out.push(z);
                }
                ColumnEncoder::OneHot { categories } => {
                    let key = value.category_key();
                    for cat in categories {
                        let hit = key.as_deref() == Some(cat.as_str());
                        out.push(if hit { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in &mut out {
                *v /= norm;
            }
        }
        out
    }
}

/// Flags likely identifier columns: distinct-value ratio above 0.95 combined
/// with a text/categorical kind or an id-like name (`id`, `uuid`, `email`, or
/// a `_id` suffix). The target column is never flagged.
pub fn detect_identifier_columns(table: &Table) -> BTreeSet<String> {
    let mut flagged = BTreeSet::new();
    let n = table.n_rows();
    if n == 0 {
        return flagged;
    }
    for (i, col) in table.schema().iter().enumerate() {
        if i == table.target_index() {
            continue;
        }
        let mut distinct = BTreeSet::new();
        for row in table.rows() {
            if let Some(key) = row[i].category_key() {
                distinct.insert(key);
            }
        }
        let ratio = distinct.len() as f64 / n as f64;
        if ratio <= 0.95 {
            continue;
        }
        let lname = col.name.to_lowercase();
        let name_is_idlike =
            lname == "id" || lname == "uuid" || lname == "email" || lname.ends_with("_id");
        let kind_flags = matches!(col.kind, ColumnKind::Text | ColumnKind::Categorical);
        if kind_flags || name_is_idlike {
            flagged.insert(col.name.clone());
        }
    }
    flagged
}

/// Plug-in mutual information between two columns, in nats.
///
/// Columns whose non-missing values are all numeric are discretized by
/// equal-frequency binning into `min(n_bins, ceil(sqrt(n)))` bins, where `n`
/// counts the complete pairs; any other column is used as categories.
/// Rows missing on either side are skipped. Fewer than two complete pairs
/// give a zero score with a warning.
pub fn mutual_information(feature: &[Value], target: &[Value], n_bins: usize) -> Result<f64> {
    if feature.len() != target.len() {
        return Err(Error::LengthMismatch(format!(
            "feature has {} values, target has {}",
            feature.len(),
            target.len()
        )));
    }
    if feature.len() < 2 {
        return Err(Error::LengthMismatch("columns must have at least 2 values".into()));
    }
    let pairs: Vec<(&Value, &Value)> = feature
        .iter()
        .zip(target.iter())
        .filter(|(f, t)| !f.is_missing() && !t.is_missing())
        .collect();
    if pairs.len() < 2 {
        log::warn!("mutual information over {} complete pairs; returning 0", pairs.len());
        return Ok(0.0);
    }
    let n = pairs.len();
    let f_codes = encode_column(pairs.iter().map(|(f, _)| *f), n, n_bins);
    let t_codes = encode_column(pairs.iter().map(|(_, t)| *t), n, n_bins);

    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut f_marginal: BTreeMap<usize, usize> = BTreeMap::new();
    let mut t_marginal: BTreeMap<usize, usize> = BTreeMap::new();
    for (&fu, &tv) in f_codes.iter().zip(t_codes.iter()) {
        *joint.entry((fu, tv)).or_insert(0) += 1;
        *f_marginal.entry(fu).or_insert(0) += 1;
        *t_marginal.entry(tv).or_insert(0) += 1;
    }
    let n = n as f64;
    let mut mi = 0.0;
    for (&(fu, tv), &count) in &joint {
        let p_uv = count as f64 / n;
        let p_u = f_marginal[&fu] as f64 / n;
        let p_v = t_marginal[&tv] as f64 / n;
        mi += p_uv * (p_uv / (p_u * p_v)).ln();
    }
    Ok(mi.max(0.0))
}

/// Category codes for one side of an MI computation.
fn encode_column<'a>(values: impl Iterator<Item = &'a Value> + Clone, n: usize, n_bins: usize) -> Vec<usize> {
    let all_numeric = values.clone().all(|v| matches!(v, Value::Number(_)));
    if all_numeric {
        let nums: Vec<f64> = values.map(|v| v.as_number().unwrap()).collect();
        let b = n_bins.min((n as f64).sqrt().ceil() as usize).max(1);
        equal_frequency_codes(&nums, b)
    } else {
        let mut codes = BTreeMap::new();
        let mut out = Vec::with_capacity(n);
        for v in values {
            let key = v.category_key().unwrap_or_default();
            let next = codes.len();
            let code = *codes.entry(key).or_insert(next);
            out.push(code);
        }
        out
    }
}

/// Equal-frequency bin codes. Equal values always land in the same bin.
fn equal_frequency_codes(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // upper edges of the first bins-1 bins
    let mut cuts = Vec::with_capacity(bins.saturating_sub(1));
    for t in 1..bins {
        let idx = (n * t).div_ceil(bins).min(n) - 1;
        cuts.push(sorted[idx]);
    }
    values
        .iter()
        .map(|&x| cuts.iter().filter(|&&c| c < x).count())
        .collect()
}

/// MI score per feature column, in schema order: `(column index, score)`.
pub fn feature_mi_scores(table: &Table, cfg: &FilterConfig) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    let target = table.column_values(table.target_index());
    let mut scores = Vec::new();
    for &col in &table.feature_indices() {
        let feature = table.column_values(col);
        let score = mutual_information(&feature, &target, cfg.n_bins)?;
        scores.push((col, score));
    }
    Ok(scores)
}

/// Keeps the strongest features by cumulative MI mass.
///
/// Features are sorted by MI descending (ties keep the original column
/// order); the kept prefix is the smallest one whose cumulative MI reaches
/// `rho` of the total, then raised to at least `m_min` and capped at the
/// candidate count. The returned table preserves the original relative
/// column order and always retains the target.
pub fn filter_features(table: &Table, cfg: &FilterConfig) -> Result<Table> {
    let scores = feature_mi_scores(table, cfg)?;
    let d = scores.len();
    if d == 0 {
        return Err(Error::Schema("table has no feature columns".into()));
    }
    let total: f64 = scores.iter().map(|(_, s)| s).sum();
    let kept: Vec<usize> = if total <= 0.0 {
        log::warn!(
            "total MI is zero; keeping the first {} feature columns",
            cfg.m_min.min(d)
        );
        scores.iter().take(cfg.m_min.min(d)).map(|(c, _)| *c).collect()
    } else {
        let mut ranked = scores.clone();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let mut cum = 0.0;
        let mut m_star = d;
        for (m, (_, s)) in ranked.iter().enumerate() {
            cum += s;
            if cum >= cfg.rho * total {
                m_star = m + 1;
                break;
            }
        }
        let m_star = m_star.max(cfg.m_min).min(d);
        ranked.iter().take(m_star).map(|(c, _)| *c).collect()
    };
    let keep_names: BTreeSet<String> = kept
        .iter()
        .map(|&c| table.schema()[c].name.clone())
        .collect();
    table.with_feature_subset(&keep_names)
}

/// One embedding vector per row, feature columns only.
pub fn embed_rows(table: &Table, embedder: &dyn RowEmbedder) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(table.n_rows());
    for row in 0..table.n_rows() {
        out.push(embedder.embed(&table.feature_values(row)?));
    }
    Ok(out)
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Indices of the `pool_size` rows most similar to the query row, descending,
/// ties broken by ascending row index. The query row itself is excluded.
pub fn retrieve_evidence_pool(
    query_index: usize,
    embeddings: &[Vec<f64>],
    pool_size: usize,
) -> Result<Vec<usize>> {
    if query_index >= embeddings.len() {
        return Err(Error::RowIndex {
            index: query_index,
            n_rows: embeddings.len(),
        });
    }
    let query = &embeddings[query_index];
    let mut scored: Vec<(usize, f64)> = embeddings
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != query_index)
        .map(|(i, e)| (i, cosine_similarity(query, e)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if scored.len() < pool_size {
        log::warn!(
            "only {} candidate rows available for a pool of {}",
            scored.len(),
            pool_size
        );
    }
    Ok(scored.into_iter().take(pool_size).map(|(i, _)| i).collect())
}

/// Result of context assembly: the context, the gold evidence display
/// indices, and the sampled evidence ratio.
#[derive(Debug, Clone)]
pub struct AssembledContext {
    pub context: ContextSet,
    pub gold_evidence: BTreeSet<usize>,
    pub evidence_ratio: f64,
}

/// Assembles a K-shot context by mixing evidence-pool rows with random
/// non-pool rows.
///
/// Draws `r ~ Uniform[ratio_lo, ratio_hi]`, samples `round(K * r)` rows from
/// the pool and the remainder from outside the pool, shuffles, and reports
/// the 1-based display positions of the pool-drawn rows as gold evidence.
/// When non-pool rows run out the deficit is backfilled from the pool tail
/// (those rows join the gold set, with a warning).
pub fn assemble_context(
    pool: &[usize],
    table: &Table,
    query_index: usize,
    k: usize,
    spec: &ContextSpec,
    rng: &mut ChaCha12Rng,
) -> Result<AssembledContext> {
    spec.validate()?;
    if !spec.shots.contains(&k) {
        return Err(Error::Config(format!("shot budget {k} is not in the configured set")));
    }
    if query_index >= table.n_rows() {
        return Err(Error::RowIndex {
            index: query_index,
            n_rows: table.n_rows(),
        });
    }
    let r = rng.gen_range(spec.ratio_lo..=spec.ratio_hi);
    if k == 0 {
        return Ok(AssembledContext {
            context: ContextSet::empty(),
            gold_evidence: BTreeSet::new(),
            evidence_ratio: r,
        });
    }
    if k > table.n_rows() - 1 {
        return Err(Error::Config(format!(
            "shot budget {k} exceeds the {} available rows",
            table.n_rows() - 1
        )));
    }
    let e = (k as f64 * r).round() as usize;
    if e > pool.len() {
        return Err(Error::Config(format!(
            "evidence count {e} exceeds the pool of {}",
            pool.len()
        )));
    }

    let mut pool_shuffled: Vec<usize> = pool.to_vec();
    let evidence: Vec<usize> = sample_without_replacement(&mut pool_shuffled, e, rng);

    let pool_set: BTreeSet<usize> = pool.iter().copied().collect();
    let mut non_pool: Vec<usize> = (0..table.n_rows())
        .filter(|i| *i != query_index && !pool_set.contains(i))
        .collect();
    let need = k - e;
    let take = need.min(non_pool.len());
    let noise: Vec<usize> = sample_without_replacement(&mut non_pool, take, rng);

    let mut entries: Vec<(usize, bool)> = Vec::with_capacity(k);
    entries.extend(evidence.iter().map(|&i| (i, true)));
    entries.extend(noise.iter().map(|&i| (i, false)));
    if entries.len() < k {
        // not enough non-pool rows; backfill from the pool tail
        let deficit = k - entries.len();
        log::warn!("backfilling {deficit} context rows from the pool tail");
        let already: BTreeSet<usize> = entries.iter().map(|(i, _)| *i).collect();
        let backfill: Vec<usize> = pool
            .iter()
            .rev()
            .filter(|i| !already.contains(i))
            .take(deficit)
            .copied()
            .collect();
        if backfill.len() < deficit {
            return Err(Error::Config(format!(
                "cannot assemble a {k}-shot context from {} rows",
                table.n_rows() - 1
            )));
        }
        entries.extend(backfill.into_iter().map(|i| (i, true)));
    }
    entries.shuffle(rng);

    let mut rows = Vec::with_capacity(k);
    let mut gold = BTreeSet::new();
    for (pos, &(row_index, is_evidence)) in entries.iter().enumerate() {
        rows.push(ContextRow {
            row_index,
            features: table.feature_values(row_index)?,
            label: table.target_value(row_index)?.clone(),
        });
        if is_evidence {
            gold.insert(pos + 1);
        }
    }
    Ok(AssembledContext {
        context: ContextSet::new(rows, query_index)?,
        gold_evidence: gold,
        evidence_ratio: r,
    })
}

/// Uniform sample without replacement; consumes from `candidates` in place.
fn sample_without_replacement(candidates: &mut Vec<usize>, amount: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let mut out = Vec::with_capacity(amount);
    for _ in 0..amount {
        let idx = rng.gen_range(0..candidates.len());
        out.push(candidates.swap_remove(idx));
    }
    out
}

/// Builds one training instance for a prepared table.
///
/// `seed` pins the whole assembly; identical arguments produce identical
/// instances.
pub fn build_instance(
    table: &Table,
    table_id: &str,
    embeddings: &[Vec<f64>],
    query_index: usize,
    k: usize,
    spec: &ContextSpec,
    seed: u64,
) -> Result<TrainingInstance> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let pool_size = spec.pool_size.min(table.n_rows().saturating_sub(1));
    let pool = retrieve_evidence_pool(query_index, embeddings, pool_size)?;
    let assembled = assemble_context(&pool, table, query_index, k, spec, &mut rng)?;
    let prompt = render_prompt(table, &assembled.context, query_index)?;

    let query_embedding = &embeddings[query_index];
    let rows: Vec<ContextFeature> = assembled
        .context
        .rows()
        .iter()
        .map(|row| ContextFeature {
            similarity: cosine_similarity(query_embedding, &embeddings[row.row_index]),
            label: row.label.clone(),
        })
        .collect();

    let (target, class_labels, reg_prior) = match table.task_type() {
        TaskType::Cls => {
            let label = table
                .target_value(query_index)?
                .as_text()
                .ok_or_else(|| Error::Schema("classification target is not text".into()))?
                .to_string();
            (
                Target::Class(label),
                Some(table.class_labels().unwrap_or(&[]).to_vec()),
                None,
            )
        }
        TaskType::Reg => {
            let y = table
                .target_value(query_index)?
                .as_number()
                .ok_or_else(|| Error::Schema("regression target is not numeric".into()))?;
            (
                Target::Number(y),
                None,
                Some(table.target_mean_excluding(query_index)?),
            )
        }
    };

    let instance = TrainingInstance {
        table_id: table_id.to_string(),
        query_index,
        shot_k: k,
        task_type: table.task_type(),
        prompt,
        target,
        gold_evidence: assembled.gold_evidence,
        evidence_ratio: assembled.evidence_ratio,
        seed,
        context: InstanceContext {
            rows,
            class_labels,
            reg_prior,
        },
    };
    instance.validate()?;
    Ok(instance)
}

/// Corpus construction settings.
#[derive(Debug, Clone, Default)]
pub struct CorpusSpec {
    pub filter: FilterConfig,
    pub context: ContextSpec,
    /// Query rows sampled per (table, shot budget).
    pub queries_per_table: usize,
}

/// Prepares a table for instance construction: identifier columns dropped,
/// weak features filtered.
pub fn prepare_table(table: &Table, cfg: &FilterConfig) -> Result<Table> {
    let identifiers = detect_identifier_columns(table);
    let marked = table.with_identifiers_marked(&identifiers)?;
    filter_features(&marked, cfg)
}

/// Runs the full pipeline over a set of tables, producing training instances
/// for every configured shot budget. Deterministic under the configured seed.
pub fn build_corpus(tables: &[(String, Table)], spec: &CorpusSpec) -> Result<Vec<TrainingInstance>> {
    spec.context.validate()?;
    if spec.queries_per_table == 0 {
        return Err(Error::Config("queries_per_table must be positive".into()));
    }
    let mut out = Vec::new();
    for (table_id, raw) in tables {
        let table = prepare_table(raw, &spec.filter)?;
        let embedder = StandardEmbedder::fit(&table);
        let embeddings = embed_rows(&table, &embedder)?;
        for &k in &spec.context.shots {
            let mut query_rng = ChaCha12Rng::seed_from_u64(derive_seed(&[
                spec.context.seed,
                k as u64,
                fingerprint(table_id),
            ]));
            let mut candidates: Vec<usize> = (0..table.n_rows()).collect();
            let n_queries = spec.queries_per_table.min(candidates.len());
            let queries = sample_without_replacement(&mut candidates, n_queries, &mut query_rng);
            for query_index in queries {
                let seed = derive_seed(&[
                    spec.context.seed,
                    fingerprint(table_id),
                    query_index as u64,
                    k as u64,
                ]);
                let mut instance_spec = spec.context.clone();
                instance_spec.seed = seed;
                out.push(build_instance(
                    &table,
                    table_id,
                    &embeddings,
                    query_index,
                    k,
                    &instance_spec,
                    seed,
                )?);
            }
        }
    }
    Ok(out)
}

/// Stable 64-bit fingerprint of a string (FNV-1a).
pub fn fingerprint(s: &str) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for byte in s.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}
