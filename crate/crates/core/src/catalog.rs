//! Dataset manifest: object identities, asset references, descriptions and
//! split assignment.
//!
//! A manifest is line-delimited JSON. The first non-blank line may be a header
//! object of the form `{"dataset_name": ..., "source_note": ...}`; every other
//! line is one [`ObjectRecord`].

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{Description, PromptKind};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate object ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("manifest has no records")]
    Empty,
    #[error("record on line {line}: {message}")]
    InvalidRecord { line: usize, message: String },
    #[error("train fraction {0} is outside (0, 1]")]
    TrainFraction(f64),
    #[error("unknown object id: {0}")]
    UnknownId(String),
    #[error("catalog file: {0}")]
    Json(#[from] serde_json::Error),
}

/// One 3D object and the rendered view that stands in for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object_id: String,
    pub image_ref: String,
    pub model_ref: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub display_name: Option<String>,
}

impl ObjectRecord {
    fn check(&self) -> Result<(), String> {
        if self.object_id.trim().is_empty() {
            return Err("object_id is empty".into());
        }
        if self.image_ref.trim().is_empty() {
            return Err(format!("image_ref is empty for {}", self.object_id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureManifest {
    pub dataset_name: String,
    pub source_note: String,
    pub records: Vec<ObjectRecord>,
}

#[derive(Debug, Default, Deserialize, Serialize)]
struct ManifestHeader {
    dataset_name: String,
    #[serde(default)]
    source_note: String,
}

impl CaptureManifest {
    /// Validates records and builds a manifest.
    pub fn new(
        dataset_name: impl Into<String>,
        source_note: impl Into<String>,
        records: Vec<ObjectRecord>,
    ) -> Result<Self, CatalogError> {
        let manifest = Self {
            dataset_name: dataset_name.into(),
            source_note: source_note.into(),
            records,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        if self.records.is_empty() {
            return Err(CatalogError::Empty);
        }
        for (i, r) in self.records.iter().enumerate() {
            r.check().map_err(|message| CatalogError::InvalidRecord { line: i + 1, message })?;
        }
        let mut seen = HashSet::new();
        let mut dups = Vec::new();
        for r in &self.records {
            if !seen.insert(r.object_id.as_str()) && !dups.contains(&r.object_id) {
                dups.push(r.object_id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(CatalogError::DuplicateIds(dups));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, object_id: &str) -> Option<&ObjectRecord> {
        self.records.iter().find(|r| r.object_id == object_id)
    }

    /// Serializes to the line-delimited manifest format.
    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            dataset_name: self.dataset_name.clone(),
            source_note: self.source_note.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Parses and validates a line-delimited manifest document.
pub fn ingest_manifest(source: &str) -> Result<CaptureManifest, CatalogError> {
    let mut header: Option<ManifestHeader> = None;
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| CatalogError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let is_header = value.get("object_id").is_none() && value.get("dataset_name").is_some();
        if is_header {
            if header.is_some() || !records.is_empty() {
                return Err(CatalogError::Parse {
                    line: idx + 1,
                    message: "header must be the first line".into(),
                });
            }
            header = Some(serde_json::from_value(value).map_err(|e| CatalogError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?);
            continue;
        }
        let record: ObjectRecord = serde_json::from_value(value).map_err(|e| CatalogError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        record
            .check()
            .map_err(|message| CatalogError::InvalidRecord { line: idx + 1, message })?;
        lines.push(idx + 1);
        records.push(record);
    }
    let header = header.unwrap_or_default();
    CaptureManifest::new(header.dataset_name, header.source_note, records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Holdout,
}

/// Manifest plus everything later stages attach to it.
///
/// Catalogs are values: attaching descriptions or splits returns a new
/// catalog and leaves the original untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCatalog {
    pub manifest: CaptureManifest,
    #[serde(default)]
    pub descriptions: BTreeMap<String, Vec<Description>>,
    #[serde(default)]
    pub split_assignment: BTreeMap<String, Split>,
}

impl DatasetCatalog {
    pub fn new(manifest: CaptureManifest) -> Self {
        Self {
            manifest,
            descriptions: BTreeMap::new(),
            split_assignment: BTreeMap::new(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self, CatalogError> {
        let catalog: Self = serde_json::from_str(json)?;
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        self.manifest.validate()?;
        let ids: HashSet<&str> = self.ids().collect();
        for key in self.descriptions.keys().chain(self.split_assignment.keys()) {
            if !ids.contains(key.as_str()) {
                return Err(CatalogError::UnknownId(key.clone()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.records.iter().map(|r| r.object_id.as_str())
    }

    pub fn record(&self, object_id: &str) -> Option<&ObjectRecord> {
        self.manifest.get(object_id)
    }

    pub fn descriptions_of(&self, object_id: &str) -> &[Description] {
        self.descriptions.get(object_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// The description of `kind`, falling back to the first stored one.
    pub fn description_text(&self, object_id: &str, kind: Option<PromptKind>) -> Option<&str> {
        let all = self.descriptions_of(object_id);
        kind.and_then(|k| all.iter().find(|d| d.kind == k))
            .or_else(|| all.first())
            .map(|d| d.text.as_str())
    }

    pub fn has_description(&self, object_id: &str, kind: PromptKind) -> bool {
        self.descriptions_of(object_id).iter().any(|d| d.kind == kind)
    }

    pub fn with_description(&self, description: Description) -> Result<Self, CatalogError> {
        if self.record(&description.object_id).is_none() {
            return Err(CatalogError::UnknownId(description.object_id));
        }
        let mut next = self.clone();
        let list = next.descriptions.entry(description.object_id.clone()).or_default();
        list.retain(|d| d.kind != description.kind);
        list.push(description);
        Ok(next)
    }

    /// Ids assigned to `split`, in manifest order.
    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.ids()
            .filter(|id| self.split_assignment.get(*id) == Some(&split))
            .map(str::to_owned)
            .collect()
    }
}

/// Seeded train/validation split.
///
/// Ids are sorted before shuffling so the assignment depends only on the set
/// of ids, the fraction and the seed.
pub fn assign_splits(
    catalog: &DatasetCatalog,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetCatalog, CatalogError> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(CatalogError::TrainFraction(train_fraction));
    }
    let mut ids: Vec<&str> = catalog.ids().collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let mut next = catalog.clone();
    next.split_assignment = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train { Split::Train } else { Split::Validation };
            (id.to_string(), split)
        })
        .collect();
    Ok(next)
}
