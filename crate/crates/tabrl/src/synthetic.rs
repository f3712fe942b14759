//! Seeded synthetic tables, including planted-cluster designs whose
//! same-cluster rows are guaranteed-informative evidence.
//!
//! Planted tables draw cluster centers far apart relative to the feature
//! noise, assign rows to clusters round-robin (so classes stay balanced),
//! and label each row by its cluster: the class name for classification, a
//! per-cluster base value (plus optional target noise) for regression.
//! Sizing a cluster at `pool_size + 1` rows makes the retrieval pool of a
//! query exactly its cluster mates, so evidence selection is learnable by
//! thresholding similarity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::table::{ColumnKind, ColumnRole, ColumnSchema, Table, TaskType, Value};

/// Task side of a synthetic table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    Cls { n_classes: usize },
    /// `target_fn`: 0 = linear, 1 = quadratic, 2 = sinusoid.
    Reg { target_fn: usize },
}

/// Generator settings.
#[derive(Debug, Clone)]
pub struct SyntheticTableSpec {
    pub n_rows: usize,
    pub n_features: usize,
    pub task: SyntheticTask,
    /// Feature noise around the cluster center.
    pub noise: f64,
    pub planted_clusters: bool,
    pub seed: u64,
    /// Scale of the cluster centers.
    pub cluster_spread: f64,
    /// Cluster count for planted regression tables.
    pub reg_clusters: usize,
    /// Range the per-cluster regression base values are drawn from.
    pub reg_value_range: (f64, f64),
    /// Within-cluster target noise for planted regression tables.
    pub target_noise: f64,
    /// When set, the first row of each regression cluster sits exactly at
    /// the cluster center (most similar to every mate) and carries the base
    /// value scaled by this factor. Sharp similarity weighting then lands on
    /// the outlier, so flat evidence averaging is systematically better.
    pub reg_outlier_factor: Option<f64>,
}

impl SyntheticTableSpec {
    pub fn cls(n_rows: usize, n_features: usize, n_classes: usize, noise: f64, seed: u64) -> Self {
        SyntheticTableSpec {
            n_rows,
            n_features,
            task: SyntheticTask::Cls { n_classes },
            noise,
            planted_clusters: true,
            seed,
            cluster_spread: 10.0,
            reg_clusters: 4,
            reg_value_range: (10.0, 100.0),
            target_noise: 0.0,
            reg_outlier_factor: None,
        }
    }

    pub fn reg(n_rows: usize, n_features: usize, target_fn: usize, noise: f64, seed: u64) -> Self {
        SyntheticTableSpec {
            n_rows,
            n_features,
            task: SyntheticTask::Reg { target_fn },
            noise,
            planted_clusters: true,
            seed,
            cluster_spread: 10.0,
            reg_clusters: 4,
            reg_value_range: (10.0, 100.0),
            target_noise: 0.0,
            reg_outlier_factor: None,
        }
    }
}

/// Generates a table from the spec; identical specs produce identical
/// tables.
pub fn generate_synthetic_table(spec: &SyntheticTableSpec) -> Result<Table> {
    if spec.n_rows == 0 || spec.n_features == 0 {
        return Err(Error::Config("synthetic table needs rows and features".into()));
    }
    if let SyntheticTask::Cls { n_classes } = spec.task {
        if n_classes < 2 {
            return Err(Error::Config("classification needs at least 2 classes".into()));
        }
        if spec.n_rows < n_classes {
            return Err(Error::Config(format!(
                "{} rows cannot cover {} classes",
                spec.n_rows, n_classes
            )));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    if spec.planted_clusters {
        planted(spec, &mut rng)
    } else {
        unstructured(spec, &mut rng)
    }
}

fn schema(spec: &SyntheticTableSpec, target_kind: ColumnKind) -> Vec<ColumnSchema> {
    let mut schema: Vec<ColumnSchema> = (0..spec.n_features)
        .map(|j| ColumnSchema {
            name: format!("f{j}"),
            kind: ColumnKind::Numeric,
            role: ColumnRole::Feature,
        })
        .collect();
    schema.push(ColumnSchema {
        name: "target".into(),
        kind: target_kind,
        role: ColumnRole::Target,
    });
    schema
}

fn planted(spec: &SyntheticTableSpec, rng: &mut ChaCha12Rng) -> Result<Table> {
    let n_clusters = match spec.task {
        SyntheticTask::Cls { n_classes } => n_classes,
        SyntheticTask::Reg { .. } => spec.reg_clusters.max(1),
    };
    let centers: Vec<Vec<f64>> = (0..n_clusters)
        .map(|_| {
            (0..spec.n_features)
                .map(|_| spec.cluster_spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let cluster_values: Vec<f64> = (0..n_clusters)
        .map(|_| rng.gen_range(spec.reg_value_range.0..=spec.reg_value_range.1))
        .collect();

    let mut rows = Vec::with_capacity(spec.n_rows);
    for i in 0..spec.n_rows {
        let cluster = i % n_clusters;
        let is_reg = matches!(spec.task, SyntheticTask::Reg { .. });
        let outlier = is_reg && spec.reg_outlier_factor.is_some() && i < n_clusters;
        let mut row: Vec<Value> = centers[cluster]
            .iter()
            .map(|c| {
                let jitter = if outlier { 0.0 } else { spec.noise * rng.sample::<f64, _>(StandardNormal) };
                Value::Number(c + jitter)
            })
            .collect();
        let target = match spec.task {
            SyntheticTask::Cls { .. } => Value::Text(format!("class_{cluster}")),
            SyntheticTask::Reg { .. } => {
                if outlier {
                    Value::Number(cluster_values[cluster] * spec.reg_outlier_factor.unwrap())
                } else {
                    Value::Number(
                        cluster_values[cluster] + spec.target_noise * rng.sample::<f64, _>(StandardNormal),
                    )
                }
            }
        };
        row.push(target);
        rows.push(row);
    }
    match spec.task {
        SyntheticTask::Cls { n_classes } => Table::new(
            format!("planted_cls{}_{}", n_classes, spec.seed),
            schema(spec, ColumnKind::Categorical),
            rows,
            TaskType::Cls,
            Some((0..n_classes).map(|j| format!("class_{j}")).collect()),
        ),
        SyntheticTask::Reg { .. } => Table::new(
            format!("planted_reg_{}", spec.seed),
            schema(spec, ColumnKind::Numeric),
            rows,
            TaskType::Reg,
            None,
        ),
    }
}

fn unstructured(spec: &SyntheticTableSpec, rng: &mut ChaCha12Rng) -> Result<Table> {
    let features: Vec<Vec<f64>> = (0..spec.n_rows)
        .map(|_| {
            (0..spec.n_features)
                .map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    match spec.task {
        SyntheticTask::Cls { n_classes } => {
            let weights: Vec<f64> = (0..spec.n_features)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            let scores: Vec<f64> = features
                .iter()
                .map(|row| row.iter().zip(weights.iter()).map(|(x, w)| x * w).sum())
                .collect();
            // equal-frequency buckets keep the classes balanced
            let mut order: Vec<usize> = (0..spec.n_rows).collect();
            order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
            let mut class_of = vec![0usize; spec.n_rows];
            for (rank, &i) in order.iter().enumerate() {
                class_of[i] = rank * n_classes / spec.n_rows;
            }
            let rows: Vec<Vec<Value>> = features
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let mut cells: Vec<Value> = row.iter().map(|&x| Value::Number(x)).collect();
                    cells.push(Value::Text(format!("class_{}", class_of[i])));
                    cells
                })
                .collect();
            Table::new(
                format!("flat_cls{}_{}", n_classes, spec.seed),
                schema(spec, ColumnKind::Categorical),
                rows,
                TaskType::Cls,
                Some((0..n_classes).map(|j| format!("class_{j}")).collect()),
            )
        }
        SyntheticTask::Reg { target_fn } => {
            let rows: Vec<Vec<Value>> = features
                .iter()
                .map(|row| {
                    let y = smooth_target(target_fn, row) + spec.noise * rng.sample::<f64, _>(StandardNormal);
                    let mut cells: Vec<Value> = row.iter().map(|&x| Value::Number(x)).collect();
                    cells.push(Value::Number(y));
                    cells
                })
                .collect();
            Table::new(
                format!("flat_reg{}_{}", target_fn, spec.seed),
                schema(spec, ColumnKind::Numeric),
                rows,
                TaskType::Reg,
                None,
            )
        }
    }
}

/// The fixed smooth regression targets, by id.
pub fn smooth_target(target_fn: usize, features: &[f64]) -> f64 {
    match target_fn {
        0 => features.iter().sum(),
        1 => features.iter().map(|x| (x / 5.0).powi(2)).sum::<f64>() * 10.0,
        _ => 10.0 * (features[0] / 5.0).sin() + features.get(1).copied().unwrap_or(0.0),
    }
}

/// The bundled planted-cluster training corpus: 20 tables mixing binary,
/// 3-way, and 4-way classification with clustered regression. Cluster sizes
/// are `pool_size + 1` so the evidence pool of a query is exactly its
/// cluster mates.
pub fn bundled_training_tables(pool_size: usize, seed: u64) -> Vec<(String, Table)> {
    let cluster = pool_size + 1;
    let mut tables = Vec::new();
    for i in 0..12 {
        let n_classes = 2 + i % 3;
        let spec = SyntheticTableSpec::cls(cluster * n_classes, 5, n_classes, 0.5, seed.wrapping_add(i as u64));
        tables.push((format!("cls_{i:02}"), generate_synthetic_table(&spec).unwrap()));
    }
    for i in 0..8 {
        let mut spec = SyntheticTableSpec::reg(cluster * 4, 5, 0, 0.5, seed.wrapping_add(100 + i as u64));
        spec.target_noise = 0.4;
        tables.push((format!("reg_{i:02}"), generate_synthetic_table(&spec).unwrap()));
    }
    tables
}

/// The bundled ablation corpus for task-advantage balancing.
///
/// Easy binary tables keep early classification rollout groups nearly
/// degenerate (all-correct), so the classification advantage magnitude
/// stays small while regression's continuous rewards keep theirs large.
/// The regression tables share one base value across clusters with sizable
/// per-row target noise: averaging many rows beats trusting the single
/// most-similar one, so regression systematically pulls the shared
/// temperature toward flat weighting, directly opposing the sharpening the
/// harder 4-way classification tables need. Damping regression preserves
/// classification headroom.
pub fn bundled_ablation_tables(pool_size: usize, seed: u64) -> Vec<(String, Table)> {
    let cluster = pool_size + 1;
    let mut tables = Vec::new();
    for i in 0..4 {
        let spec = SyntheticTableSpec::cls(cluster * 2, 5, 2, 0.2, seed.wrapping_add(i as u64));
        tables.push((format!("easy_cls_{i}"), generate_synthetic_table(&spec).unwrap()));
    }
    for i in 0..4 {
        let spec = SyntheticTableSpec::cls(cluster * 4, 5, 4, 1.2, seed.wrapping_add(40 + i as u64));
        tables.push((format!("hard_cls_{i}"), generate_synthetic_table(&spec).unwrap()));
    }
    for i in 0..8 {
        let mut spec = SyntheticTableSpec::reg(cluster * 4, 5, 0, 0.5, seed.wrapping_add(80 + i as u64));
        spec.reg_value_range = (40.0, 40.0);
        spec.target_noise = 12.0;
        tables.push((format!("flatavg_reg_{i}"), generate_synthetic_table(&spec).unwrap()));
    }
    tables
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{cosine_similarity, embed_rows, StandardEmbedder};

    #[test]
    fn deterministic_under_seed() {
        let spec = SyntheticTableSpec::cls(40, 4, 2, 0.5, 7);
        let a = generate_synthetic_table(&spec).unwrap();
        let b = generate_synthetic_table(&spec).unwrap();
        assert_eq!(a.rows(), b.rows());
    }

    #[test]
    fn zero_noise_nearest_neighbors_share_labels() {
        let mut spec = SyntheticTableSpec::cls(30, 4, 3, 0.0, 3);
        spec.noise = 0.0;
        let table = generate_synthetic_table(&spec).unwrap();
        let embedder = StandardEmbedder::fit(&table);
        let embeddings = embed_rows(&table, &embedder).unwrap();
        for query in 0..table.n_rows() {
            let mut best = None;
            let mut best_sim = f64::NEG_INFINITY;
            for other in 0..table.n_rows() {
                if other == query {
                    continue;
                }
                let sim = cosine_similarity(&embeddings[query], &embeddings[other]);
                if sim > best_sim {
                    best_sim = sim;
                    best = Some(other);
                }
            }
            let neighbor = best.unwrap();
            assert_eq!(
                table.target_value(query).unwrap(),
                table.target_value(neighbor).unwrap(),
                "nearest neighbor of row {query} shares its label"
            );
        }
    }

    #[test]
    fn zero_noise_regression_matches_generator_function() {
        let mut spec = SyntheticTableSpec::reg(20, 3, 1, 0.0, 11);
        spec.planted_clusters = false;
        let table = generate_synthetic_table(&spec).unwrap();
        for row in 0..table.n_rows() {
            let features: Vec<f64> = table
                .feature_values(row)
                .unwrap()
                .iter()
                .map(|v| v.as_number().unwrap())
                .collect();
            let y = table.target_value(row).unwrap().as_number().unwrap();
            assert!((y - smooth_target(1, &features)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_more_classes_than_rows() {
        let spec = SyntheticTableSpec::cls(2, 3, 4, 0.5, 0);
        assert!(generate_synthetic_table(&spec).is_err());
    }

    #[test]
    fn round_robin_classes_are_balanced() {
        let spec = SyntheticTableSpec::cls(34, 5, 2, 0.5, 1);
        let table = generate_synthetic_table(&spec).unwrap();
        let ones = table
            .rows()
            .iter()
            .filter(|r| r[table.target_index()] == Value::Text("class_0".into()))
            .count();
        assert_eq!(ones, 17);
    }

    #[test]
    fn bundled_corpus_shape() {
        let tables = bundled_training_tables(16, 0);
        assert_eq!(tables.len(), 20);
        let n_cls = tables.iter().filter(|(_, t)| t.task_type() == TaskType::Cls).count();
        assert_eq!(n_cls, 12);
    }
}
