//! Tables, context sets, and training instances.
//!
//! A [`Table`] is a named schema plus rows, with exactly one target column and
//! a task type (classification or regression). A [`ContextSet`] is the handful
//! of labeled rows shown to a predictor alongside a query row, and a
//! [`TrainingInstance`] bundles the rendered prompt with everything needed to
//! score an answer: the ground truth, the gold evidence set, and the
//! per-context-row similarities a lightweight policy can condition on.
//!
//! Tables are ingested from CSV (header row = column names, RFC-4180 quoting)
//! or from a JSON document `{name, schema, rows, task_type, class_labels}`.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Data kind of a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
    Text,
}

/// Role a column plays in a prepared table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Feature,
    Target,
    Identifier,
    Dropped,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

/// Prediction task type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Cls,
    Reg,
}

impl std::fmt::Display for TaskType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TaskType::Cls => write!(f, "cls"),
            TaskType::Reg => write!(f, "reg"),
        }
    }
}

/// A single cell. `Missing` serializes as JSON `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Text(String),
    Missing,
}

impl Value {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Value::Missing)
    }

    /// Cell rendering used in prompts; missing cells show as `NA`.
    pub fn render(&self) -> String {
        match self {
            Value::Number(v) => format!("{v}"),
            Value::Text(s) => s.clone(),
            Value::Missing => "NA".to_string(),
        }
    }

    /// Category key used when a column is treated as categorical.
    pub fn category_key(&self) -> Option<String> {
        match self {
            Value::Number(v) => Some(format!("{v}")),
            Value::Text(s) => Some(s.clone()),
            Value::Missing => None,
        }
    }
}

/// JSON table document, the on-disk form of a [`Table`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableDocument {
    #[serde(default)]
    pub name: String,
    pub schema: Vec<ColumnSchema>,
    pub rows: Vec<Vec<Value>>,
    pub task_type: TaskType,
    #[serde(default)]
    pub class_labels: Option<Vec<String>>,
}

/// A labeled table with a designated target column.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "TableDocument", into = "TableDocument")]
pub struct Table {
    name: String,
    schema: Vec<ColumnSchema>,
    rows: Vec<Vec<Value>>,
    task_type: TaskType,
    class_labels: Option<Vec<String>>,
    target_index: usize,
}

impl TryFrom<TableDocument> for Table {
    type Error = Error;

    fn try_from(doc: TableDocument) -> Result<Self> {
        Table::new(doc.name, doc.schema, doc.rows, doc.task_type, doc.class_labels)
    }
}

impl From<Table> for TableDocument {
    fn from(t: Table) -> Self {
        TableDocument {
            name: t.name,
            schema: t.schema,
            rows: t.rows,
            task_type: t.task_type,
            class_labels: t.class_labels,
        }
    }
}

impl Table {
    /// Builds a table, validating the schema/row invariants:
    /// unique column names, exactly one target column, rectangular rows,
    /// classification targets drawn from `class_labels`, regression targets
    /// finite reals.
    pub fn new(
        name: String,
        schema: Vec<ColumnSchema>,
        rows: Vec<Vec<Value>>,
        task_type: TaskType,
        class_labels: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut names = BTreeSet::new();
        for col in &schema {
            if !names.insert(col.name.clone()) {
                return Err(Error::Schema(format!("duplicate column name '{}'", col.name)));
            }
        }
        let targets: Vec<usize> = schema
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == ColumnRole::Target)
            .map(|(i, _)| i)
            .collect();
        if targets.len() != 1 {
            return Err(Error::Schema(format!(
                "expected exactly one target column, found {}",
                targets.len()
            )));
        }
        let target_index = targets[0];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(Error::Schema(format!(
                    "row {} has {} cells, schema has {} columns",
                    i,
                    row.len(),
                    schema.len()
                )));
            }
        }
        match task_type {
            TaskType::Cls => {
                let labels = class_labels
                    .as_ref()
                    .ok_or_else(|| Error::Schema("classification table requires class_labels".into()))?;
                if labels.is_empty() {
                    return Err(Error::Schema("class_labels must be non-empty".into()));
                }
                let label_set: BTreeSet<&str> = labels.iter().map(|s| s.as_str()).collect();
                if label_set.len() != labels.len() {
                    return Err(Error::Schema("class_labels must be distinct".into()));
                }
                for (i, row) in rows.iter().enumerate() {
                    match &row[target_index] {
                        Value::Text(s) if label_set.contains(s.as_str()) => {}
                        other => {
                            return Err(Error::Schema(format!(
                                "row {i} target {other:?} is not one of the class labels"
                            )))
                        }
                    }
                }
            }
            TaskType::Reg => {
                for (i, row) in rows.iter().enumerate() {
                    match &row[target_index] {
                        Value::Number(v) if v.is_finite() => {}
                        other => {
                            return Err(Error::Schema(format!(
                                "row {i} target {other:?} is not a finite real"
                            )))
                        }
                    }
                }
            }
        }
        Ok(Table {
            name,
            schema,
            rows,
            task_type,
            class_labels,
            target_index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn schema(&self) -> &[ColumnSchema] {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn task_type(&self) -> TaskType {
        self.task_type
    }

    pub fn class_labels(&self) -> Option<&[String]> {
        self.class_labels.as_deref()
    }

    pub fn target_index(&self) -> usize {
        self.target_index
    }

    pub fn target_name(&self) -> &str {
        &self.schema[self.target_index].name
    }

    /// Indices of columns with role `Feature`, in schema order.
    pub fn feature_indices(&self) -> Vec<usize> {
        self.schema
            .iter()
            .enumerate()
            .filter(|(_, c)| c.role == ColumnRole::Feature)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn column_values(&self, index: usize) -> Vec<Value> {
        self.rows.iter().map(|r| r[index].clone()).collect()
    }

    pub fn target_value(&self, row: usize) -> Result<&Value> {
        self.rows
            .get(row)
            .map(|r| &r[self.target_index])
            .ok_or(Error::RowIndex {
                index: row,
                n_rows: self.rows.len(),
            })
    }

    /// Feature cells of a row, in feature-column order.
    pub fn feature_values(&self, row: usize) -> Result<Vec<Value>> {
        let r = self.rows.get(row).ok_or(Error::RowIndex {
            index: row,
            n_rows: self.rows.len(),
        })?;
        Ok(self.feature_indices().iter().map(|&i| r[i].clone()).collect())
    }

    /// Max minus min of the target column (regression only).
    pub fn target_range(&self) -> Result<f64> {
        if self.task_type != TaskType::Reg {
            return Err(Error::DegenerateTarget("target range requires a regression table".into()));
        }
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for row in &self.rows {
            if let Value::Number(v) = row[self.target_index] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::DegenerateTarget("no labeled target values".into()));
        }
        Ok(hi - lo)
    }

    /// Min and max of the target column (regression only).
    pub fn target_bounds(&self) -> Result<(f64, f64)> {
        let range = self.target_range()?;
        let lo = self
            .rows
            .iter()
            .filter_map(|r| r[self.target_index].as_number())
            .fold(f64::INFINITY, f64::min);
        Ok((lo, lo + range))
    }

    /// Mean of the target column excluding one row, used as a zero-context prior.
    pub fn target_mean_excluding(&self, exclude_row: usize) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (i, row) in self.rows.iter().enumerate() {
            if i == exclude_row {
                continue;
            }
            if let Value::Number(v) = row[self.target_index] {
                sum += v;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::DegenerateTarget("no labeled rows besides the query".into()));
        }
        Ok(sum / n as f64)
    }

    /// New table keeping only the named feature columns (plus the target),
    /// preserving the original relative column order.
    pub fn with_feature_subset(&self, keep: &BTreeSet<String>) -> Result<Table> {
        let kept: Vec<usize> = self
            .schema
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                c.role == ColumnRole::Target || (c.role == ColumnRole::Feature && keep.contains(&c.name))
            })
            .map(|(i, _)| i)
            .collect();
        let schema: Vec<ColumnSchema> = kept.iter().map(|&i| self.schema[i].clone()).collect();
        let rows: Vec<Vec<Value>> = self
            .rows
            .iter()
            .map(|r| kept.iter().map(|&i| r[i].clone()).collect())
            .collect();
        Table::new(
            self.name.clone(),
            schema,
            rows,
            self.task_type,
            self.class_labels.clone(),
        )
    }

    /// New table with the given columns re-roled as `Identifier`.
    pub fn with_identifiers_marked(&self, identifiers: &BTreeSet<String>) -> Result<Table> {
        let schema: Vec<ColumnSchema> = self
            .schema
            .iter()
            .map(|c| {
                let mut c = c.clone();
                if c.role == ColumnRole::Feature && identifiers.contains(&c.name) {
                    c.role = ColumnRole::Identifier;
                }
                c
            })
            .collect();
        Table::new(
            self.name.clone(),
            schema,
            self.rows.clone(),
            self.task_type,
            self.class_labels.clone(),
        )
    }

    /// New table with a different column as the prediction target. The old
    /// target becomes a feature; the task type follows the new target's kind
    /// (numeric target: regression, otherwise classification with the
    /// distinct values as labels). Rows with a missing or non-conforming new
    /// target are dropped.
    pub fn retargeted(&self, column: &str) -> Result<Table> {
        let new_target = self
            .schema
            .iter()
            .position(|c| c.name == column)
            .ok_or_else(|| Error::Schema(format!("no column named '{column}'")))?;
        let numeric_target = self
            .rows
            .iter()
            .all(|r| matches!(r[new_target], Value::Number(_) | Value::Missing))
            && self.schema[new_target].kind == ColumnKind::Numeric;
        let task_type = if numeric_target { TaskType::Reg } else { TaskType::Cls };
        let schema: Vec<ColumnSchema> = self
            .schema
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut c = c.clone();
                if i == new_target {
                    c.role = ColumnRole::Target;
                } else if c.role == ColumnRole::Target {
                    c.role = ColumnRole::Feature;
                }
                c
            })
            .collect();
        let rows: Vec<Vec<Value>> = self
            .rows
            .iter()
            .filter(|r| match task_type {
                TaskType::Reg => matches!(r[new_target], Value::Number(v) if v.is_finite()),
                TaskType::Cls => !r[new_target].is_missing(),
            })
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(i, v)| {
                        if i == new_target && task_type == TaskType::Cls {
                            Value::Text(v.category_key().unwrap_or_default())
                        } else {
                            v.clone()
                        }
                    })
                    .collect()
            })
            .collect();
        let class_labels = if task_type == TaskType::Cls {
            let mut labels = BTreeSet::new();
            for r in &rows {
                if let Value::Text(s) = &r[new_target] {
                    labels.insert(s.clone());
                }
            }
            Some(labels.into_iter().collect())
        } else {
            None
        };
        Table::new(
            format!("{}__{}", self.name, column),
            schema,
            rows,
            task_type,
            class_labels,
        )
    }

    pub fn from_json_str(s: &str) -> Result<Table> {
        let doc: TableDocument = serde_json::from_str(s)?;
        Table::try_from(doc)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&TableDocument::from(self.clone()))?)
    }

    /// Reads a CSV table. The header row supplies column names; the last
    /// column is taken as the target. Kinds are inferred per column: numeric
    /// if every non-empty cell parses as a number, categorical if the distinct
    /// count is small, text otherwise. The task is regression for a numeric
    /// target and classification otherwise.
    pub fn from_csv_reader<R: Read>(name: String, reader: R) -> Result<Table> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        if headers.is_empty() {
            return Err(Error::Schema("CSV has no columns".into()));
        }
        let mut raw_rows: Vec<Vec<String>> = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != headers.len() {
                return Err(Error::Schema(format!(
                    "CSV row has {} cells, header has {}",
                    rec.len(),
                    headers.len()
                )));
            }
            raw_rows.push(rec.iter().map(|s| s.to_string()).collect());
        }
        if raw_rows.is_empty() {
            return Err(Error::Schema("CSV has no data rows".into()));
        }
        let n_cols = headers.len();
        let n_rows = raw_rows.len();
        let mut kinds = Vec::with_capacity(n_cols);
        for c in 0..n_cols {
            let mut numeric = true;
            let mut distinct = BTreeSet::new();
            let mut non_empty = 0usize;
            for row in &raw_rows {
                let cell = row[c].trim();
                if cell.is_empty() {
                    continue;
                }
                non_empty += 1;
                distinct.insert(cell.to_string());
                if cell.parse::<f64>().is_err() {
                    numeric = false;
                }
            }
            let kind = if non_empty > 0 && numeric {
                ColumnKind::Numeric
            } else if distinct.len() <= 20.max(n_rows / 2) {
                ColumnKind::Categorical
            } else {
                ColumnKind::Text
            };
            kinds.push(kind);
        }
        let target_index = n_cols - 1;
        let task_type = if kinds[target_index] == ColumnKind::Numeric {
            TaskType::Reg
        } else {
            TaskType::Cls
        };
        let schema: Vec<ColumnSchema> = headers
            .iter()
            .enumerate()
            .map(|(i, name)| ColumnSchema {
                name: name.clone(),
                kind: kinds[i],
                role: if i == target_index {
                    ColumnRole::Target
                } else {
                    ColumnRole::Feature
                },
            })
            .collect();
        let rows: Vec<Vec<Value>> = raw_rows
            .iter()
            .map(|raw| {
                raw.iter()
                    .enumerate()
                    .map(|(c, cell)| {
                        let cell = cell.trim();
                        if cell.is_empty() {
                            Value::Missing
                        } else if kinds[c] == ColumnKind::Numeric {
                            match cell.parse::<f64>() {
                                Ok(v) => Value::Number(v),
                                Err(_) => Value::Missing,
                            }
                        } else {
                            Value::Text(cell.to_string())
                        }
                    })
                    .collect()
            })
            .collect();
        let class_labels = if task_type == TaskType::Cls {
            let mut labels = BTreeSet::new();
            for row in &rows {
                if let Value::Text(s) = &row[target_index] {
                    labels.insert(s.clone());
                }
            }
            Some(labels.into_iter().collect())
        } else {
            None
        };
        Table::new(name, schema, rows, task_type, class_labels)
    }

    pub fn from_csv_path<P: AsRef<Path>>(path: P) -> Result<Table> {
        let name = path
            .as_ref()
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "table".to_string());
        let file = std::fs::File::open(path)?;
        Table::from_csv_reader(name, file)
    }

    pub fn from_json_path<P: AsRef<Path>>(path: P) -> Result<Table> {
        let s = std::fs::read_to_string(path)?;
        Table::from_json_str(&s)
    }
}

/// One labeled row shown as context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub row_index: usize,
    pub features: Vec<Value>,
    pub label: Value,
}

/// The ordered context rows for one query. Display indices are 1-based
/// positions in this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    rows: Vec<ContextRow>,
}

impl ContextSet {
    /// Validates that row indices are distinct and none equals the query row.
    pub fn new(rows: Vec<ContextRow>, query_index: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for row in &rows {
            if row.row_index == query_index {
                return Err(Error::Schema(format!(
                    "context row {} collides with the query row",
                    row.row_index
                )));
            }
            if !seen.insert(row.row_index) {
                return Err(Error::Schema(format!(
                    "duplicate context row index {}",
                    row.row_index
                )));
            }
        }
        Ok(ContextSet { rows })
    }

    pub fn empty() -> Self {
        ContextSet { rows: Vec::new() }
    }

    pub fn rows(&self) -> &[ContextRow] {
        &self.rows
    }

    pub fn k(&self) -> usize {
        self.rows.len()
    }
}

/// Ground-truth target of an instance: a class label or a real value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Number(f64),
    Class(String),
}

impl Target {
    pub fn render(&self) -> String {
        match self {
            Target::Number(v) => format!("{v}"),
            Target::Class(s) => s.clone(),
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Target::Number(v) => Some(*v),
            Target::Class(_) => None,
        }
    }
}

/// What a policy sees about one context row: cosine similarity to the query
/// and the row's label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFeature {
    pub similarity: f64,
    pub label: Value,
}

/// Per-instance side information for policies that cannot read the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceContext {
    pub rows: Vec<ContextFeature>,
    #[serde(default)]
    pub class_labels: Option<Vec<String>>,
    #[serde(default)]
    pub reg_prior: Option<f64>,
}

/// One training instance: prompt, ground truth, gold evidence, task type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub table_id: String,
    pub query_index: usize,
    pub shot_k: usize,
    pub task_type: TaskType,
    pub prompt: String,
    pub target: Target,
    pub gold_evidence: BTreeSet<usize>,
    pub evidence_ratio: f64,
    pub seed: u64,
    pub context: InstanceContext,
}

impl TrainingInstance {
    /// Checks the instance invariants: gold evidence lies in the 1-based
    /// display range, zero-shot instances have empty evidence, the target
    /// variant matches the task type, regression context labels are numeric.
    pub fn validate(&self) -> Result<()> {
        if self.context.rows.len() != self.shot_k {
            return Err(Error::Schema(format!(
                "context has {} rows but shot_k = {}",
                self.context.rows.len(),
                self.shot_k
            )));
        }
        if self.shot_k == 0 && !self.gold_evidence.is_empty() {
            return Err(Error::Schema("zero-shot instance with non-empty gold evidence".into()));
        }
        for &idx in &self.gold_evidence {
            if idx == 0 || idx > self.shot_k {
                return Err(Error::Schema(format!(
                    "gold evidence index {idx} outside the display range 1..={}",
                    self.shot_k
                )));
            }
        }
        match (self.task_type, &self.target) {
            (TaskType::Cls, Target::Class(_)) => {
                if self.context.class_labels.is_none() {
                    return Err(Error::Schema("classification instance without class labels".into()));
                }
            }
            (TaskType::Reg, Target::Number(_)) => {
                for row in &self.context.rows {
                    if row.label.as_number().is_none() {
                        return Err(Error::Schema("regression context row with non-numeric label".into()));
                    }
                }
                if self.reg_prior().is_none() {
                    return Err(Error::Schema("regression instance without a prior".into()));
                }
            }
            _ => {
                return Err(Error::Schema("target variant does not match the task type".into()));
            }
        }
        Ok(())
    }

    pub fn reg_prior(&self) -> Option<f64> {
        self.context.reg_prior
    }
}

/// Reads instances from JSON Lines, one per line.
pub fn read_instances_jsonl<P: AsRef<Path>>(path: P) -> Result<Vec<TrainingInstance>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let inst: TrainingInstance = serde_json::from_str(line)?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

/// Writes instances as JSON Lines.
pub fn write_instances_jsonl<P: AsRef<Path>>(path: P, instances: &[TrainingInstance]) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    for inst in instances {
        serde_json::to_writer(&mut file, inst)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Loads every `*.csv` and `*.json` table in a directory, sorted by filename.
pub fn load_tables_dir<P: AsRef<Path>>(dir: P) -> Result<Vec<(String, Table)>> {
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("csv") | Some("json")
            )
        })
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for path in paths {
        let table = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Table::from_csv_path(&path)?,
            _ => Table::from_json_path(&path)?,
        };
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| table.name().to_string());
        out.push((id, table));
    }
    Ok(out)
}

/// Normalization used for exact-match comparison of class labels: trim and
/// case-fold.
pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}
