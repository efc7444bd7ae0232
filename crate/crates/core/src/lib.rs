//! Cross-modal retrieval engine for 3D object collections.
//!
//! The pipeline has four stages. Rendered views of each object are listed in a
//! capture manifest ([`catalog`]), a vision-language model writes a short
//! description for each view ([`labeler`]), two bias-free projection heads are
//! trained so that image and description embeddings meet in a shared space
//! ([`associate`]), and the shared space is searched by text or by example
//! ([`index`]). [`eval`] measures retrieval quality with MRR and top-k accuracy.
//!
//! Base embeddings come from pluggable backends ([`encoder`]); the engine never
//! runs a neural network itself.

pub mod associate;
pub mod catalog;
pub mod digest;
pub mod embfile;
pub mod encoder;
pub mod eval;
#[cfg(feature = "remote")]
mod http;
pub mod index;
pub mod labeler;
pub mod retry;
pub mod synthetic;

pub use associate::{ProjectionHeads, TrainConfig, TrainingBatch};
pub use catalog::{CaptureManifest, DatasetCatalog, ObjectRecord, Split};
pub use encoder::{BaseImageEmbedding, BaseTextEmbedding, Encoder, EncoderBackendConfig};
pub use eval::{MetricsReport, SimilarityMatrix};
pub use index::{RankedResult, SearchIndex, SearchQuery};
pub use labeler::{Description, PromptKind, PromptTemplate};

/// Width of the frozen text tower output.
pub const TEXT_DIM: usize = 512;
/// Width of the frozen vision tower output.
pub const IMAGE_DIM: usize = 768;
/// Width of the shared embedding space.
pub const SHARED_DIM: usize = 512;
