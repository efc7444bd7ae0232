use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::{BaseImageEmbedding, BaseTextEmbedding, Encoder, EncoderError};
use crate::{IMAGE_DIM, TEXT_DIM};

/// Deterministic stand-in for a real encoder.
///
/// The input is hashed together with the seed and a modality tag, the hash
/// seeds a ChaCha20 stream, and the stream is expanded into uniform
/// components that are then scaled to unit length. Output depends only on
/// (seed, modality, input), so fixtures are stable across runs and platforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEncoder {
    seed: u64,
}

impl MockEncoder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn vector(&self, tag: &str, input: &str, dim: usize) -> Vec<f32> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(tag.as_bytes());
        hasher.update([0u8]);
        hasher.update(input.as_bytes());
        let mut rng = ChaCha20Rng::from_seed(hasher.finalize().into());
        let raw: Vec<f64> = (0..dim)
            .map(|_| (rng.next_u32() >> 8) as f64 / (1u32 << 23) as f64 - 1.0)
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| (v / norm) as f32).collect()
    }
}

impl Encoder for MockEncoder {
    fn backend_id(&self) -> String {
        format!("mock:{}", self.seed)
    }

    fn encode_text(&self, id: &str, text: &str) -> Result<BaseTextEmbedding, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyText);
        }
        BaseTextEmbedding::new(id, self.vector("text", text, TEXT_DIM))
    }

    fn encode_image(&self, object_id: &str, image_ref: &str) -> Result<BaseImageEmbedding, EncoderError> {
        BaseImageEmbedding::new(object_id, self.vector("image", image_ref, IMAGE_DIM))
    }
}
