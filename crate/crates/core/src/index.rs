//! Exact cosine search over the shared space.
//!
//! Every entry carries two unit vectors in the shared space: its projected
//! image and its projected description. A text query is projected once and
//! scored against both; the visual focus `α` weights the image score against
//! the text score.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::associate::{normalize, AssociateError, BaseEmbeddings, ProjectionHeads};
use crate::catalog::DatasetCatalog;
use crate::embfile::{read_blocks, write_blocks, BlockSpec, EmbFileError, FileHeader, INDEX_FORMAT};
use crate::encoder::{Encoder, EncoderError};
use crate::labeler::Description;

/// Largest result count accepted from callers of [`SearchQuery`].
pub const MAX_K: usize = 10;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("missing base embeddings for: {}", .0.join(", "))]
    MissingEmbeddings(Vec<String>),
    #[error("projection of {0} has zero length")]
    Degenerate(String),
    #[error("unknown object id: {0}")]
    UnknownId(String),
    #[error("no description stored for {0}")]
    Unlabeled(String),
    #[error("index is empty")]
    Empty,
    #[error("invalid query: {0}")]
    Query(String),
    #[error("heads {heads} do not match index built with {index}")]
    HeadsMismatch { heads: String, index: String },
    #[error("encoder: {0}")]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Associate(#[from] AssociateError),
    #[error("index file: {0}")]
    File(#[from] EmbFileError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub object_id: String,
    pub base_image: Vec<f32>,
    pub base_text: Vec<f32>,
    pub shared_image: Vec<f32>,
    pub shared_text: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub text: String,
    pub k: usize,
    pub visual_focus: f64,
}

impl SearchQuery {
    pub fn new(text: impl Into<String>, k: usize, visual_focus: f64) -> Result<Self, IndexError> {
        let q = Self {
            text: text.into(),
            k,
            visual_focus,
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.text.trim().is_empty() {
            return Err(IndexError::Query("query text is empty".into()));
        }
        if !(1..=MAX_K).contains(&self.k) {
            return Err(IndexError::Query(format!("k = {} is outside 1..={MAX_K}", self.k)));
        }
        check_focus(self.visual_focus)
    }
}

fn check_focus(alpha: f64) -> Result<(), IndexError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(IndexError::Query(format!("visual focus {alpha} is outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub object_id: String,
    pub score: f64,
    pub rank: usize,
    pub image_score: f64,
    pub text_score: f64,
}

/// Score descending, then object id ascending.
pub fn result_order(a: &RankedResult, b: &RankedResult) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.object_id.cmp(&b.object_id))
}

/// Sorts `results` by [`result_order`], keeps the first `k` and numbers them.
fn top_k(mut results: Vec<RankedResult>, k: usize) -> Vec<RankedResult> {
    let k = k.min(results.len());
    if k == 0 {
        return Vec::new();
    }
    if k < results.len() {
        results.select_nth_unstable_by(k - 1, result_order);
        results.truncate(k);
    }
    results.sort_by(result_order);
    for (i, r) in results.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    results
}

/// `f32` components accumulated in `f64`, index order.
fn dot(q: &[f64], v: &[f32]) -> f64 {
    q.iter().zip(v).map(|(a, &b)| a * b as f64).sum::<f64>().clamp(-1.0, 1.0)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Immutable store of projected pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchIndex {
    entries: Vec<EmbeddingPair>,
    heads_version: String,
    positions: HashMap<String, usize>,
    /// Free-form provenance persisted with the index.
    pub meta: BTreeMap<String, String>,
}

impl SearchIndex {
    fn from_entries(entries: Vec<EmbeddingPair>, heads_version: String) -> Self {
        let positions = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.object_id.clone(), i))
            .collect();
        Self {
            entries,
            heads_version,
            positions,
            meta: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn heads_version(&self) -> &str {
        &self.heads_version
    }

    pub fn entries(&self) -> &[EmbeddingPair] {
        &self.entries
    }

    pub fn get(&self, object_id: &str) -> Option<&EmbeddingPair> {
        self.positions.get(object_id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, object_id: &str) -> bool {
        self.positions.contains_key(object_id)
    }

    pub fn shared_dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.shared_image.len())
    }

    /// Scores every entry against a unit query vector.
    pub fn score_all(&self, query: &[f64], visual_focus: f64) -> Vec<RankedResult> {
        self.entries
            .iter()
            .map(|e| {
                let image_score = dot(query, &e.shared_image);
                let text_score = dot(query, &e.shared_text);
                RankedResult {
                    object_id: e.object_id.clone(),
                    score: visual_focus * image_score + (1.0 - visual_focus) * text_score,
                    rank: 0,
                    image_score,
                    text_score,
                }
            })
            .collect()
    }

    /// Top `k` entries for a unit query vector. Any `k` is accepted; the
    /// result has `min(k, len)` entries.
    pub fn search_vector(&self, query: &[f64], k: usize, visual_focus: f64) -> Result<Vec<RankedResult>, IndexError> {
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        check_focus(visual_focus)?;
        if query.len() != self.shared_dim() {
            return Err(IndexError::Query(format!(
                "query has {} dims, index has {}",
                query.len(),
                self.shared_dim()
            )));
        }
        Ok(top_k(self.score_all(query, visual_focus), k))
    }

    /// Encodes and projects `text` into a unit query vector. `query_id` is
    /// passed to the encoder, which id-keyed backends use for lookup.
    pub fn embed_query(
        &self,
        query_id: &str,
        text: &str,
        heads: &ProjectionHeads,
        encoder: &dyn Encoder,
    ) -> Result<Vec<f64>, IndexError> {
        if heads.version != self.heads_version {
            return Err(IndexError::HeadsMismatch {
                heads: heads.version.clone(),
                index: self.heads_version.clone(),
            });
        }
        let base = encoder.encode_text(query_id, text)?;
        Ok(heads.project_text(&base.vector)?)
    }

    pub fn search_text(
        &self,
        query: &SearchQuery,
        heads: &ProjectionHeads,
        encoder: &dyn Encoder,
    ) -> Result<Vec<RankedResult>, IndexError> {
        query.validate()?;
        if self.is_empty() {
            return Err(IndexError::Empty);
        }
        let q = self.embed_query("query", &query.text, heads, encoder)?;
        self.search_vector(&q, query.k, query.visual_focus)
    }

    /// Nearest other entries by image similarity.
    pub fn search_similar(&self, object_id: &str, k: usize) -> Result<Vec<RankedResult>, IndexError> {
        let entry = self
            .get(object_id)
            .ok_or_else(|| IndexError::UnknownId(object_id.to_owned()))?;
        let q: Vec<f64> = entry.shared_image.iter().map(|&x| x as f64).collect();
        let mut scored = self.score_all(&q, 1.0);
        scored.retain(|r| r.object_id != object_id);
        Ok(top_k(scored, k))
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<(), IndexError> {
        let first = self.entries.first();
        let dims = [
            ("base_image", first.map_or(0, |e| e.base_image.len())),
            ("base_text", first.map_or(0, |e| e.base_text.len())),
            ("shared_image", first.map_or(0, |e| e.shared_image.len())),
            ("shared_text", first.map_or(0, |e| e.shared_text.len())),
        ];
        let mut header = FileHeader::new(
            INDEX_FORMAT,
            self.entries.iter().map(|e| e.object_id.clone()).collect(),
            dims.iter()
                .map(|(name, dimension)| BlockSpec {
                    name: (*name).into(),
                    dimension: *dimension,
                })
                .collect(),
        );
        header.meta = self.meta.clone();
        header.meta.insert("heads_version".into(), self.heads_version.clone());
        let flat = |f: fn(&EmbeddingPair) -> &Vec<f32>| -> Vec<f32> {
            self.entries.iter().flat_map(|e| f(e).iter().copied()).collect()
        };
        let blocks = [
            flat(|e| &e.base_image),
            flat(|e| &e.base_text),
            flat(|e| &e.shared_image),
            flat(|e| &e.shared_text),
        ];
        let refs: Vec<&[f32]> = blocks.iter().map(Vec::as_slice).collect();
        write_blocks(w, &header, &refs)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, IndexError> {
        let (header, blocks) = read_blocks(r, INDEX_FORMAT)?;
        let names: Vec<&str> = header.blocks.iter().map(|b| b.name.as_str()).collect();
        if names != ["base_image", "base_text", "shared_image", "shared_text"] {
            return Err(EmbFileError::Header(format!("unexpected index blocks {names:?}")).into());
        }
        let mut meta = header.meta.clone();
        let heads_version = meta
            .remove("heads_version")
            .ok_or_else(|| EmbFileError::Header("index has no heads_version".into()))?;
        let dim = |b: usize| header.blocks[b].dimension;
        let row = |b: usize, i: usize| blocks[b][i * dim(b)..(i + 1) * dim(b)].to_vec();
        let mut entries = Vec::with_capacity(header.count);
        let mut seen = HashMap::new();
        for (i, id) in header.ids.iter().enumerate() {
            if seen.insert(id.clone(), i).is_some() {
                return Err(EmbFileError::DuplicateId(id.clone()).into());
            }
            entries.push(EmbeddingPair {
                object_id: id.clone(),
                base_image: row(0, i),
                base_text: row(1, i),
                shared_image: row(2, i),
                shared_text: row(3, i),
            });
        }
        let mut index = Self::from_entries(entries, heads_version);
        index.meta = meta;
        Ok(index)
    }
}

/// Projects every catalog object through `heads`, in manifest order.
pub fn build_index(
    catalog: &DatasetCatalog,
    bases: &BaseEmbeddings,
    heads: &ProjectionHeads,
) -> Result<SearchIndex, IndexError> {
    let missing: Vec<String> = catalog
        .ids()
        .filter(|id| !bases.images.contains(id) || !bases.texts.contains(id))
        .map(str::to_owned)
        .collect();
    if !missing.is_empty() {
        return Err(IndexError::MissingEmbeddings(missing));
    }
    let project = |w: &ndarray::Array2<f64>, v: &[f32], id: &str| -> Result<Vec<f32>, IndexError> {
        if v.len() != w.nrows() {
            return Err(AssociateError::Shape(format!(
                "{id} has a {}-d base vector, head expects {}",
                v.len(),
                w.nrows()
            ))
            .into());
        }
        let x: ndarray::Array1<f64> = v.iter().map(|&f| f as f64).collect();
        let u = w.t().dot(&x);
        normalize(ArrayView1::from(&u))
            .map(|n| to_f32(&n))
            .ok_or_else(|| IndexError::Degenerate(id.to_owned()))
    };
    let mut entries = Vec::with_capacity(catalog.len());
    for id in catalog.ids() {
        let base_image = bases.images.get(id).expect("checked").to_vec();
        let base_text = bases.texts.get(id).expect("checked").to_vec();
        entries.push(EmbeddingPair {
            object_id: id.to_owned(),
            shared_image: project(&heads.image, &base_image, id)?,
            shared_text: project(&heads.text, &base_text, id)?,
            base_image,
            base_text,
        });
    }
    Ok(SearchIndex::from_entries(entries, heads.version.clone()))
}

/// Stored descriptions of an object with their prompt kinds.
pub fn describe(catalog: &DatasetCatalog, object_id: &str) -> Result<Vec<Description>, IndexError> {
    if catalog.record(object_id).is_none() {
        return Err(IndexError::UnknownId(object_id.to_owned()));
    }
    let all = catalog.descriptions_of(object_id);
    if all.is_empty() {
        return Err(IndexError::Unlabeled(object_id.to_owned()));
    }
    Ok(all.to_vec())
}
