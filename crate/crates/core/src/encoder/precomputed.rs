use std::fs::File;
use std::path::Path;

use super::{BaseImageEmbedding, BaseTextEmbedding, Encoder, EncoderError};
use crate::embfile::EmbeddingTable;
use crate::{IMAGE_DIM, TEXT_DIM};

/// Serves vectors loaded from embedding tables, byte for byte.
#[derive(Debug, Clone)]
pub struct PrecomputedEncoder {
    images: Option<EmbeddingTable>,
    texts: Option<EmbeddingTable>,
}

fn load(path: &Path, dim: usize) -> Result<EmbeddingTable, EncoderError> {
    let file = File::open(path).map_err(|source| EncoderError::Io {
        path: path.to_owned(),
        source,
    })?;
    let table = EmbeddingTable::read_from(file)?;
    if table.dimension() != dim {
        return Err(EncoderError::DimensionMismatch {
            expected: dim,
            found: table.dimension(),
        });
    }
    Ok(table)
}

impl PrecomputedEncoder {
    pub fn new(images: Option<EmbeddingTable>, texts: Option<EmbeddingTable>) -> Result<Self, EncoderError> {
        for (table, dim) in [(&images, IMAGE_DIM), (&texts, TEXT_DIM)] {
            if let Some(t) = table {
                if t.dimension() != dim {
                    return Err(EncoderError::DimensionMismatch {
                        expected: dim,
                        found: t.dimension(),
                    });
                }
            }
        }
        Ok(Self { images, texts })
    }

    pub fn open(image_file: Option<&Path>, text_file: Option<&Path>) -> Result<Self, EncoderError> {
        let images = image_file.map(|p| load(p, IMAGE_DIM)).transpose()?;
        let texts = text_file.map(|p| load(p, TEXT_DIM)).transpose()?;
        Ok(Self { images, texts })
    }

    fn lookup(table: &Option<EmbeddingTable>, id: &str) -> Result<Vec<f32>, EncoderError> {
        table
            .as_ref()
            .and_then(|t| t.get(id))
            .map(<[f32]>::to_vec)
            .ok_or_else(|| EncoderError::NotFound(id.to_owned()))
    }
}

impl Encoder for PrecomputedEncoder {
    fn backend_id(&self) -> String {
        "precomputed".into()
    }

    fn encode_text(&self, id: &str, text: &str) -> Result<BaseTextEmbedding, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyText);
        }
        BaseTextEmbedding::new(id, Self::lookup(&self.texts, id)?)
    }

    fn encode_image(&self, object_id: &str, _image_ref: &str) -> Result<BaseImageEmbedding, EncoderError> {
        BaseImageEmbedding::new(object_id, Self::lookup(&self.images, object_id)?)
    }
}
