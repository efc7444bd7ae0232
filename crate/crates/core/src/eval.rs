//! Retrieval metrics and similarity heatmaps.
//!
//! Each object is queried with its own stored description and ranked against
//! the whole index. MRR is the mean of `1/rank`; top-k accuracy is the share of
//! queries whose object lands within the first `k` results.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::associate::ProjectionHeads;
use crate::catalog::{DatasetCatalog, Split};
use crate::encoder::Encoder;
use crate::index::{result_order, IndexError, SearchIndex};
use crate::labeler::PromptKind;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("split {0} has no objects")]
    EmptySplit(EvalSplit),
    #[error("objects without descriptions: {}", .0.join(", "))]
    Unlabeled(Vec<String>),
    #[error("objects not in the index: {}", .0.join(", "))]
    NotIndexed(Vec<String>),
    #[error("unknown object ids: {}", .0.join(", "))]
    UnknownIds(Vec<String>),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("value dump: {0}")]
    Dump(#[from] serde_json::Error),
}

/// Which objects are queried. `Test` covers everything outside the train split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    Test,
    Complete,
}

impl std::fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
            Self::Complete => "complete",
        })
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            "complete" => Ok(Self::Complete),
            other => Err(format!("unknown split {other:?}; expected train, test or complete")),
        }
    }
}

impl EvalSplit {
    /// Object ids in manifest order.
    pub fn select(self, catalog: &DatasetCatalog) -> Vec<String> {
        let ids = catalog.ids().map(str::to_owned);
        match self {
            Self::Complete => ids.collect(),
            Self::Train => catalog.ids_in(Split::Train),
            Self::Test => ids
                .filter(|id| {
                    matches!(
                        catalog.split_assignment.get(id),
                        Some(Split::Validation | Split::Holdout)
                    )
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: EvalSplit,
    pub n: usize,
    pub mrr: f64,
    /// Percent.
    pub top1_accuracy: f64,
    /// Percent.
    pub top10_accuracy: f64,
    pub model_tag: String,
}

/// `1/rank` of `true_id` in `results`, or 0 when it is absent.
pub fn reciprocal_rank<S: AsRef<str>>(results: &[S], true_id: &str) -> f64 {
    results
        .iter()
        .position(|r| r.as_ref() == true_id)
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Aggregates 1-based ranks (`None` for a miss) into MRR and top-1/top-10
/// percentages.
pub fn metrics_from_ranks(ranks: &[Option<usize>]) -> (f64, f64, f64) {
    if ranks.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let n = ranks.len() as f64;
    let mrr = ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum::<f64>() / n;
    let within = |k: usize| 100.0 * ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / n;
    (mrr, within(1), within(10))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Fusion weight on the image score. The default of 1 ranks each
    /// description against images only; at 0 a description would be matched
    /// against its own stored text.
    pub visual_focus: f64,
    pub model_tag: String,
    /// Description kind used as the query; the first stored one when unset or
    /// missing.
    pub prompt_kind: Option<PromptKind>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            visual_focus: 1.0,
            model_tag: "model".into(),
            prompt_kind: None,
        }
    }
}

/// 1-based position of `true_id` among all entries scored for `query`.
fn full_pool_rank(index: &SearchIndex, query: &[f64], visual_focus: f64, true_id: &str) -> Option<usize> {
    let scored = index.score_all(query, visual_focus);
    let target = scored.iter().find(|r| r.object_id == true_id)?;
    let ahead = scored
        .iter()
        .filter(|r| result_order(r, target) == std::cmp::Ordering::Less)
        .count();
    Some(ahead + 1)
}

/// Self-retrieval ranks of the split's objects, in manifest order.
pub fn self_retrieval_ranks(
    index: &SearchIndex,
    catalog: &DatasetCatalog,
    split: EvalSplit,
    heads: &ProjectionHeads,
    encoder: &dyn Encoder,
    options: &EvalOptions,
) -> Result<Vec<(String, Option<usize>)>, EvalError> {
    let ids = split.select(catalog);
    if ids.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let unlabeled: Vec<String> = ids
        .iter()
        .filter(|id| catalog.descriptions_of(id).is_empty())
        .cloned()
        .collect();
    if !unlabeled.is_empty() {
        return Err(EvalError::Unlabeled(unlabeled));
    }
    let missing: Vec<String> = ids.iter().filter(|id| !index.contains(id)).cloned().collect();
    if !missing.is_empty() {
        return Err(EvalError::NotIndexed(missing));
    }
    ids.into_iter()
        .map(|id| {
            let text = catalog.description_text(&id, options.prompt_kind).expect("labeled");
            let q = index.embed_query(&id, text, heads, encoder)?;
            let rank = full_pool_rank(index, &q, options.visual_focus, &id);
            Ok((id, rank))
        })
        .collect()
}

pub fn evaluate(
    index: &SearchIndex,
    catalog: &DatasetCatalog,
    split: EvalSplit,
    heads: &ProjectionHeads,
    encoder: &dyn Encoder,
    options: &EvalOptions,
) -> Result<MetricsReport, EvalError> {
    let ranks = self_retrieval_ranks(index, catalog, split, heads, encoder, options)?;
    let only: Vec<Option<usize>> = ranks.iter().map(|(_, r)| *r).collect();
    let (mrr, top1_accuracy, top10_accuracy) = metrics_from_ranks(&only);
    Ok(MetricsReport {
        split,
        n: only.len(),
        mrr,
        top1_accuracy,
        top10_accuracy,
        model_tag: options.model_tag.clone(),
    })
}

/// Aligned console table with one row per report.
pub fn format_table(reports: &[MetricsReport]) -> String {
    let header = ["Model", "Split", "N", "MRR (0-1)", "Top-1 Acc (%)", "Top-10 Acc (%)"];
    let rows: Vec<[String; 6]> = reports
        .iter()
        .map(|r| {
            [
                r.model_tag.clone(),
                r.split.to_string(),
                r.n.to_string(),
                format!("{:.4}", r.mrr),
                format!("{:.2}", r.top1_accuracy),
                format!("{:.2}", r.top10_accuracy),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        writeln!(out, "{}", parts.join("  ").trim_end()).expect("string write");
    };
    line(&header);
    for row in &rows {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Cosine similarities between projected descriptions (rows) and projected
/// images (columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub row_ids: Vec<String>,
    pub col_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Mean of the diagonal minus mean of the off-diagonal entries; `None`
    /// unless square with at least two rows.
    pub fn diagonal_margin(&self) -> Option<f64> {
        let n = self.values.len();
        if n < 2 || self.row_ids != self.col_ids {
            return None;
        }
        let diag: f64 = (0..n).map(|i| self.values[i][i]).sum();
        let total: f64 = self.values.iter().flatten().sum();
        Some(diag / n as f64 - (total - diag) / (n * (n - 1)) as f64)
    }
}

/// Similarity matrix over `ids` (sorted, deduplicated).
pub fn similarity_matrix(index: &SearchIndex, ids: &[String]) -> Result<SimilarityMatrix, EvalError> {
    let mut ids = ids.to_vec();
    ids.sort();
    ids.dedup();
    let unknown: Vec<String> = ids.iter().filter(|id| !index.contains(id)).cloned().collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownIds(unknown));
    }
    let entries: Vec<_> = ids.iter().map(|id| index.get(id).expect("checked")).collect();
    let values = entries
        .iter()
        .map(|row| {
            entries
                .iter()
                .map(|col| {
                    row.shared_text
                        .iter()
                        .zip(&col.shared_image)
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        .clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect();
    Ok(SimilarityMatrix {
        row_ids: ids.clone(),
        col_ids: ids,
        values,
    })
}

/// Maps a similarity in [-1, 1] to a gray level.
pub fn gray_level(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// Writes `path` as a binary PGM and a JSON value dump next to it. Returns the
/// dump path.
pub fn export_heatmap(matrix: &SimilarityMatrix, path: &Path) -> Result<PathBuf, EvalError> {
    let height = matrix.values.len();
    let width = matrix.values.first().map_or(0, Vec::len);
    let mut pgm = format!("P5\n{width} {height}\n255\n").into_bytes();
    for row in &matrix.values {
        pgm.extend(row.iter().map(|&v| gray_level(v)));
    }
    fs::write(path, pgm)?;
    let dump = path.with_extension("json");
    fs::write(&dump, serde_json::to_string_pretty(matrix)?)?;
    Ok(dump)
}

pub fn read_value_dump(path: &Path) -> Result<SimilarityMatrix, EvalError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
