//! Base (frozen) text and image embeddings from pluggable backends.
//!
//! Backends return pre-projection tower outputs: [`TEXT_DIM`] components for
//! text and [`IMAGE_DIM`] for images. Projection into the shared space is the
//! job of [`crate::associate`].

mod mock;
mod precomputed;
#[cfg(feature = "remote")]
mod remote;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embfile::EmbFileError;
use crate::{IMAGE_DIM, TEXT_DIM};

pub use mock::MockEncoder;
pub use precomputed::PrecomputedEncoder;
#[cfg(feature = "remote")]
pub use remote::RemoteEncoder;

/// Env var holding the bearer token sent to remote encoders.
pub const ENCODER_TOKEN_ENV: &str = "OBJFIND_ENCODER_TOKEN";

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("input text is empty")]
    EmptyText,
    #[error("{0} is not in the precomputed embedding table")]
    NotFound(String),
    #[error("backend returned {found} components, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("backend returned a non-finite component at position {0}")]
    NonFinite(usize),
    #[error("backend failed after {attempts} attempts: {message}")]
    Backend { attempts: u32, message: String },
    #[error("backend response: {0}")]
    Protocol(String),
    #[error("backend config: {0}")]
    Config(String),
    #[error(transparent)]
    File(#[from] EmbFileError),
    #[error("embedding file {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseTextEmbedding {
    pub id: String,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseImageEmbedding {
    pub id: String,
    pub vector: Vec<f32>,
}

fn checked(vector: Vec<f32>, expected: usize) -> Result<Vec<f32>, EncoderError> {
    if vector.len() != expected {
        return Err(EncoderError::DimensionMismatch {
            expected,
            found: vector.len(),
        });
    }
    if let Some(pos) = vector.iter().position(|v| !v.is_finite()) {
        return Err(EncoderError::NonFinite(pos));
    }
    Ok(vector)
}

impl BaseTextEmbedding {
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Result<Self, EncoderError> {
        Ok(Self {
            id: id.into(),
            vector: checked(vector, TEXT_DIM)?,
        })
    }
}

impl BaseImageEmbedding {
    pub fn new(id: impl Into<String>, vector: Vec<f32>) -> Result<Self, EncoderError> {
        Ok(Self {
            id: id.into(),
            vector: checked(vector, IMAGE_DIM)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    Precomputed,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBackendConfig {
    pub kind: BackendKind,
    /// Text endpoint for `remote`; also used for images unless
    /// `image_endpoint_url` is set.
    #[serde(default)]
    pub endpoint_url: Option<String>,
    #[serde(default)]
    pub image_endpoint_url: Option<String>,
    /// Image table (768-d) for `precomputed`.
    #[serde(default)]
    pub embedding_file: Option<PathBuf>,
    /// Text table (512-d) for `precomputed`.
    #[serde(default)]
    pub text_embedding_file: Option<PathBuf>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// Seed for the `mock` backend.
    #[serde(default)]
    pub seed: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_retries() -> u32 {
    3
}

impl EncoderBackendConfig {
    pub fn mock(seed: u64) -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            image_endpoint_url: None,
            embedding_file: None,
            text_embedding_file: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            seed,
        }
    }

    pub fn precomputed(image_file: Option<PathBuf>, text_file: Option<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Precomputed,
            embedding_file: image_file,
            text_embedding_file: text_file,
            ..Self::mock(0)
        }
    }

    pub fn remote(endpoint_url: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Remote,
            endpoint_url: Some(endpoint_url.into()),
            ..Self::mock(0)
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.timeout_ms == 0 {
            return Err(EncoderError::Config("timeout must be positive".into()));
        }
        match self.kind {
            BackendKind::Remote if self.endpoint_url.is_none() => {
                Err(EncoderError::Config("remote backend needs endpoint_url".into()))
            }
            BackendKind::Precomputed
                if self.embedding_file.is_none() && self.text_embedding_file.is_none() =>
            {
                Err(EncoderError::Config(
                    "precomputed backend needs embedding_file or text_embedding_file".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// A source of base embeddings. Implementations are stateless per call and
/// safe to share between threads.
pub trait Encoder: Send + Sync {
    /// Provenance string recorded next to produced artifacts.
    fn backend_id(&self) -> String;

    /// Embeds `text`. `id` names the object or query; the precomputed backend
    /// looks vectors up by it.
    fn encode_text(&self, id: &str, text: &str) -> Result<BaseTextEmbedding, EncoderError>;

    fn encode_image(&self, object_id: &str, image_ref: &str) -> Result<BaseImageEmbedding, EncoderError>;
}

/// Builds the backend described by `config`.
pub fn encoder_from_config(config: &EncoderBackendConfig) -> Result<Box<dyn Encoder>, EncoderError> {
    config.validate()?;
    match config.kind {
        BackendKind::Mock => Ok(Box::new(MockEncoder::new(config.seed))),
        BackendKind::Precomputed => Ok(Box::new(PrecomputedEncoder::open(
            config.embedding_file.as_deref(),
            config.text_embedding_file.as_deref(),
        )?)),
        #[cfg(feature = "remote")]
        BackendKind::Remote => Ok(Box::new(RemoteEncoder::from_config(config)?)),
        #[cfg(not(feature = "remote"))]
        BackendKind::Remote => Err(EncoderError::Config(
            "remote backends need the `remote` feature".into(),
        )),
    }
}
