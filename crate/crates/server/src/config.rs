//! Pipeline and service configuration.
//!
//! One TOML file drives every stage. Relative paths resolve against the
//! directory holding the file joined with `paths.workdir`.

use std::fs;
use std::path::{Component, Path, PathBuf};

use objfind_core::associate::TrainConfig;
use objfind_core::digest::json_digest;
use objfind_core::encoder::{BackendKind, EncoderBackendConfig};
use objfind_core::labeler::{PromptKind, VlmBackendConfig, DEFAULT_MAX_TOKENS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub workdir: PathBuf,
    pub manifest: Option<PathBuf>,
    pub catalog: PathBuf,
    pub image_embeddings: PathBuf,
    pub text_embeddings: PathBuf,
    pub heads: PathBuf,
    pub history: PathBuf,
    pub index: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            workdir: ".".into(),
            manifest: None,
            catalog: "catalog.json".into(),
            image_embeddings: "image_embeddings.emb".into(),
            text_embeddings: "text_embeddings.emb".into(),
            heads: "heads.ckpt".into(),
            history: "history.json".into(),
            index: "index.objf".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerConfig {
    #[serde(flatten)]
    pub backend: VlmBackendConfig,
    #[serde(default = "default_kind")]
    pub prompt_kind: PromptKind,
    #[serde(default = "default_max_tokens")]
    pub max_description_tokens: usize,
}

fn default_kind() -> PromptKind {
    PromptKind::Template
}

fn default_max_tokens() -> usize {
    DEFAULT_MAX_TOKENS
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self {
            backend: VlmBackendConfig::mock(0),
            prompt_kind: default_kind(),
            max_description_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub visual_focus: f64,
    pub heatmap_limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            visual_focus: 1.0,
            heatmap_limit: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceSection {
    pub bind: String,
    pub asset_base_url: String,
    pub max_inflight_encodes: usize,
}

impl Default for ServiceSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            asset_base_url: "/assets".into(),
            max_inflight_encodes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub split: SplitConfig,
    pub labeler: LabelerConfig,
    pub encoder: EncoderBackendConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub service: ServiceSection,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            split: SplitConfig::default(),
            labeler: LabelerConfig::default(),
            encoder: EncoderBackendConfig::mock(0),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            service: ServiceSection::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: base_dir.to_owned(),
            message: e.to_string(),
        })?;
        config.base_dir = base_dir.to_owned();
        Ok(config)
    }

    /// Reads `path`, or returns defaults rooted at the current directory.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_owned(),
                message,
            },
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            return p.to_owned();
        }
        let joined = self.base_dir.join(&self.paths.workdir).join(p);
        let clean: PathBuf = joined.components().filter(|c| *c != Component::CurDir).collect();
        if clean.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            clean
        }
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.resolve(&self.paths.catalog)
    }

    pub fn image_embeddings_path(&self) -> PathBuf {
        self.resolve(&self.paths.image_embeddings)
    }

    pub fn text_embeddings_path(&self) -> PathBuf {
        self.resolve(&self.paths.text_embeddings)
    }

    pub fn heads_path(&self) -> PathBuf {
        self.resolve(&self.paths.heads)
    }

    pub fn history_path(&self) -> PathBuf {
        self.resolve(&self.paths.history)
    }

    pub fn index_path(&self) -> PathBuf {
        self.resolve(&self.paths.index)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.resolve(&self.paths.reports)
    }

    /// Encoder settings with file paths resolved.
    pub fn encoder_config(&self) -> EncoderBackendConfig {
        let mut e = self.encoder.clone();
        e.embedding_file = e.embedding_file.map(|p| self.resolve(&p));
        e.text_embedding_file = e.text_embedding_file.map(|p| self.resolve(&p));
        e
    }

    /// Identifies the vector space produced by the encoder. Transport
    /// settings (timeouts, retries) do not take part.
    pub fn encoder_digest(&self) -> String {
        let e = &self.encoder;
        #[derive(Serialize)]
        struct Space<'a> {
            kind: BackendKind,
            endpoint_url: &'a Option<String>,
            image_endpoint_url: &'a Option<String>,
            embedding_file: &'a Option<PathBuf>,
            text_embedding_file: &'a Option<PathBuf>,
            seed: u64,
        }
        json_digest(&Space {
            kind: e.kind,
            endpoint_url: &e.endpoint_url,
            image_endpoint_url: &e.image_endpoint_url,
            embedding_file: &e.embedding_file,
            text_embedding_file: &e.text_embedding_file,
            seed: e.seed,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "split.train_fraction {} must be in (0, 1]",
                self.split.train_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.eval.visual_focus) {
            return Err(ConfigError::Invalid("eval.visual_focus must be in [0, 1]".into()));
        }
        if self.service.max_inflight_encodes == 0 {
            return Err(ConfigError::Invalid("service.max_inflight_encodes must be positive".into()));
        }
        self.encoder_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("encoder: {e}")))?;
        self.labeler
            .backend
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("labeler: {e}")))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))
    }
}

/// What the HTTP service needs at startup.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: String,
    pub index_path: PathBuf,
    pub heads_path: PathBuf,
    pub catalog_path: PathBuf,
    pub encoder: EncoderBackendConfig,
    pub asset_base_url: String,
    pub max_inflight_encodes: usize,
}

pub const ENV_OVERRIDES: [&str; 6] = [
    "OBJFIND_BIND",
    "OBJFIND_INDEX_PATH",
    "OBJFIND_HEADS_PATH",
    "OBJFIND_CATALOG_PATH",
    "OBJFIND_ASSET_BASE_URL",
    "OBJFIND_MAX_INFLIGHT",
];

impl ServiceConfig {
    pub fn from_pipeline(config: &PipelineConfig) -> Self {
        Self {
            bind: config.service.bind.clone(),
            index_path: config.index_path(),
            heads_path: config.heads_path(),
            catalog_path: config.catalog_path(),
            encoder: config.encoder_config(),
            asset_base_url: config.service.asset_base_url.clone(),
            max_inflight_encodes: config.service.max_inflight_encodes,
        }
    }

    /// Applies `OBJFIND_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = var("OBJFIND_BIND") {
            self.bind = v;
        }
        if let Some(v) = var("OBJFIND_INDEX_PATH") {
            self.index_path = v.into();
        }
        if let Some(v) = var("OBJFIND_HEADS_PATH") {
            self.heads_path = v.into();
        }
        if let Some(v) = var("OBJFIND_CATALOG_PATH") {
            self.catalog_path = v.into();
        }
        if let Some(v) = var("OBJFIND_ASSET_BASE_URL") {
            self.asset_base_url = v;
        }
        if let Some(v) = var("OBJFIND_MAX_INFLIGHT") {
            self.max_inflight_encodes = v
                .parse()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| ConfigError::Invalid(format!("OBJFIND_MAX_INFLIGHT={v} is not a positive integer")))?;
        }
        Ok(())
    }

    /// Paths that do not exist.
    pub fn missing_paths(&self) -> Vec<PathBuf> {
        [&self.index_path, &self.heads_path, &self.catalog_path]
            .into_iter()
            .filter(|p| !p.exists())
            .cloned()
            .collect()
    }
}
