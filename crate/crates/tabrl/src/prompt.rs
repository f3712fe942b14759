//! The select-then-predict text protocol.
//!
//! A prompt shows table metadata, a sub-table whose context rows carry
//! 1-based display indices, a final query row whose target cell is the
//! literal token `[MISSING]`, and a candidate-value section. A model output
//! commits to evidence inside `<select> ... </select>` and to an answer
//! inside `\boxed{...}`.
//!
//! Parsing rules:
//! - the last `<select>` marker wins; its span ends at the first `</select>`
//!   after it; the content is a comma-separated list of non-negative integers
//!   (whitespace-tolerant, duplicates collapse, empty content is the empty
//!   set, any non-integer token makes the span malformed);
//! - the last `\boxed{` marker wins; its content is read with brace
//!   balancing; a missing closing brace makes it malformed;
//! - `well_formed` is true iff both spans parsed. Parsing never fails on
//!   arbitrary input; malformation is encoded in the flags.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::table::{ContextSet, Table, TaskType};

pub const MISSING_TOKEN: &str = "[MISSING]";
pub const SELECT_OPEN: &str = "<select>";
pub const SELECT_CLOSE: &str = "</select>";
pub const BOXED_OPEN: &str = "\\boxed{";

/// Boxed answer: the raw span content plus its numeric reading, if any.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub raw: String,
    pub number: Option<f64>,
}

/// Result of parsing a model output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub selected: Option<BTreeSet<usize>>,
    pub answer: Option<Answer>,
    pub well_formed: bool,
}

/// Renders the prompt for a query row with the given context.
///
/// The output is deterministic: identical inputs produce identical bytes.
/// Exactly one `[MISSING]` token appears, in the target cell of the final
/// sub-table row.
pub fn render_prompt(table: &Table, context: &ContextSet, query_index: usize) -> Result<String> {
    if query_index >= table.n_rows() {
        return Err(Error::RowIndex {
            index: query_index,
            n_rows: table.n_rows(),
        });
    }
    for row in context.rows() {
        if row.row_index == query_index {
            return Err(Error::Schema(format!(
                "context row {} collides with the query row",
                row.row_index
            )));
        }
        if row.row_index >= table.n_rows() {
            return Err(Error::RowIndex {
                index: row.row_index,
                n_rows: table.n_rows(),
            });
        }
    }

    let feature_indices = table.feature_indices();
    let k = context.k();
    let mut out = String::new();

    out.push_str(
        "You are an expert in data mining and logical reasoning over tables. \
         The last cell of the final sub-table row is masked and must be predicted.\n\
         Requirements:\n\
         - Understand the table structure and the semantics of the feature columns.\n\
         - Identify context rows similar to the query row. Enclose the display indices of the rows \
         you rely on within select tags, e.g. `<select> 2, 4, 7 </select>`; use `<select> </select>` \
         if none apply.\n\
         - Derive the masked value from the features and your selected evidence.\n\n",
    );

    out.push_str(&format!("## Metadata of the table named {}\n", table.name()));
    let task_desc = match table.task_type() {
        TaskType::Cls => "classification",
        TaskType::Reg => "regression",
    };
    out.push_str(&format!("- task: {task_desc}\n"));
    out.push_str(&format!("- target column: {}\n", table.target_name()));
    let feature_desc: Vec<String> = feature_indices
        .iter()
        .map(|&i| {
            let col = &table.schema()[i];
            format!("{} ({:?})", col.name, col.kind).to_lowercase()
        })
        .collect();
    out.push_str(&format!("- feature columns: {}\n", feature_desc.join(", ")));
    out.push_str(&format!("- context rows: {k}\n\n"));

    out.push_str("## Sampled Sub-table\n");
    let mut header = vec!["index".to_string()];
    for &i in &feature_indices {
        header.push(table.schema()[i].name.clone());
    }
    header.push(table.target_name().to_string());
    out.push_str(&format!("| {} |\n", header.join(" | ")));

    for (pos, row) in context.rows().iter().enumerate() {
        let mut cells = vec![format!("{}", pos + 1)];
        for value in &row.features {
            cells.push(value.render());
        }
        cells.push(row.label.render());
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
    }
    let mut cells = vec![format!("{}", k + 1)];
    for value in table.feature_values(query_index)? {
        cells.push(value.render());
    }
    cells.push(MISSING_TOKEN.to_string());
    out.push_str(&format!("| {} |\n\n", cells.join(" | ")));

    out.push_str("## Candidate Values\n");
    match table.task_type() {
        TaskType::Cls => {
            let labels = table
                .class_labels()
                .ok_or_else(|| Error::Schema("classification table without class labels".into()))?;
            out.push_str(&format!("one of: {}\n", labels.join(", ")));
        }
        TaskType::Reg => {
            let (lo, hi) = table.target_bounds()?;
            out.push_str(&format!("observed range: [{lo}, {hi}]\n"));
        }
    }
    out.push_str(
        "\nReason step by step, include your select block, and put the final answer within \\boxed{}.\n",
    );
    Ok(out)
}

/// Parses a model output. Never fails; see the module docs for the rules.
pub fn parse_output(text: &str) -> ParsedOutput {
    let selected = extract_last_select(text).and_then(|inner| parse_index_list(&inner));
    let answer = extract_last_boxed(text).map(|raw| {
        let number = extract_number(&raw);
        Answer { raw, number }
    });
    let well_formed = selected.is_some() && answer.is_some();
    ParsedOutput {
        selected,
        answer,
        well_formed,
    }
}

/// Renders an action (selection set + answer text) in protocol form, the
/// inverse of [`parse_output`] on well-formed content.
pub fn render_action_text(selected: &BTreeSet<usize>, answer: &str) -> String {
    let indices: Vec<String> = selected.iter().map(|i| i.to_string()).collect();
    if indices.is_empty() {
        format!("{SELECT_OPEN} {SELECT_CLOSE}\n\\boxed{{{answer}}}")
    } else {
        format!("{SELECT_OPEN} {} {SELECT_CLOSE}\n\\boxed{{{answer}}}", indices.join(", "))
    }
}

fn extract_last_select(text: &str) -> Option<String> {
    let open = text.rfind(SELECT_OPEN)?;
    let rest = &text[open + SELECT_OPEN.len()..];
    let close = rest.find(SELECT_CLOSE)?;
    Some(rest[..close].to_string())
}

fn parse_index_list(inner: &str) -> Option<BTreeSet<usize>> {
    let trimmed = inner.trim();
    let mut set = BTreeSet::new();
    if trimmed.is_empty() {
        return Some(set);
    }
    for token in trimmed.split(',') {
        let token = token.trim();
        if token.is_empty() || !token.chars().all(|c| c.is_ascii_digit()) {
            return None;
        }
        set.insert(token.parse::<usize>().ok()?);
    }
    Some(set)
}

fn extract_last_boxed(text: &str) -> Option<String> {
    let open = text.rfind(BOXED_OPEN)?;
    let body = &text[open + BOXED_OPEN.len()..];
    let mut depth = 1usize;
    for (i, c) in body.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(body[..i].trim().to_string());
                }
            }
            _ => {}
        }
    }
    None
}

/// Reads the first numeric literal in a string, tolerating a sign, thousands
/// separators, a decimal point, an exponent, and surrounding prose.
pub fn extract_number(s: &str) -> Option<f64> {
    let bytes = s.as_bytes();
    let n = bytes.len();
    let mut i = 0;
    while i < n {
        let starts_number = bytes[i].is_ascii_digit()
            || (bytes[i] == b'.' && i + 1 < n && bytes[i + 1].is_ascii_digit());
        if !starts_number {
            i += 1;
            continue;
        }
        let mut start = i;
        if start > 0 && (bytes[start - 1] == b'-' || bytes[start - 1] == b'+') {
            start -= 1;
        }
        let mut j = i;
        let mut seen_dot = false;
        while j < n {
            let c = bytes[j];
            if c.is_ascii_digit() || c == b',' {
                j += 1;
            } else if c == b'.' && !seen_dot {
                seen_dot = true;
                j += 1;
            } else {
                break;
            }
        }
        // optional exponent
        if j < n && (bytes[j] == b'e' || bytes[j] == b'E') {
            let mut e = j + 1;
            if e < n && (bytes[e] == b'-' || bytes[e] == b'+') {
                e += 1;
            }
            if e < n && bytes[e].is_ascii_digit() {
                while e < n && bytes[e].is_ascii_digit() {
                    e += 1;
                }
                j = e;
            }
        }
        let cleaned: String = s[start..j].chars().filter(|&c| c != ',').collect();
        if let Ok(v) = cleaned.parse::<f64>() {
            if v.is_finite() {
                return Some(v);
            }
        }
        i = j.max(i + 1);
    }
    None
}
