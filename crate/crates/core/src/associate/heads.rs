use std::io::{BufRead, BufReader, Read, Write};

use ndarray::{Array1, Array2, ArrayView1};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AssociateError;
use crate::digest::short_digest;
use crate::{IMAGE_DIM, SHARED_DIM, TEXT_DIM};

pub const HEADS_FORMAT: &str = "objfind-heads";

/// Two bias-free linear maps into the shared space.
///
/// `image` is `image_dim × shared_dim` and `text` is `text_dim × shared_dim`;
/// a base vector `v` projects to `Wᵀ v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
    pub version: String,
}

/// Standard normal sample via Box-Muller; keeps the generator free of
/// platform-dependent float paths.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let scale = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || gaussian(rng) * scale)
}

impl ProjectionHeads {
    pub fn new(image: Array2<f64>, text: Array2<f64>) -> Result<Self, AssociateError> {
        if image.ncols() != text.ncols() {
            return Err(AssociateError::Shape(format!(
                "image head maps to {} dims, text head to {}",
                image.ncols(),
                text.ncols()
            )));
        }
        if image.iter().chain(text.iter()).any(|v| !v.is_finite()) {
            return Err(AssociateError::NonFinite("projection weights".into()));
        }
        let mut heads = Self {
            image,
            text,
            version: String::new(),
        };
        heads.stamp();
        Ok(heads)
    }

    /// Gaussian weights scaled by `1/sqrt(input dim)`; columns are close to
    /// orthogonal at these widths.
    pub fn random(image_dim: usize, text_dim: usize, shared_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_matrix(image_dim, shared_dim, &mut rng);
        let text = random_matrix(text_dim, shared_dim, &mut rng);
        Self::new(image, text).expect("finite by construction")
    }

    pub fn random_standard(seed: u64) -> Self {
        Self::random(IMAGE_DIM, TEXT_DIM, SHARED_DIM, seed)
    }

    /// Identity on the leading coordinates, zero elsewhere.
    pub fn identity(image_dim: usize, text_dim: usize, shared_dim: usize) -> Self {
        let eye = |rows: usize| Array2::from_shape_fn((rows, shared_dim), |(i, j)| if i == j { 1.0 } else { 0.0 });
        Self::new(eye(image_dim), eye(text_dim)).expect("finite")
    }

    pub fn image_dim(&self) -> usize {
        self.image.nrows()
    }

    pub fn text_dim(&self) -> usize {
        self.text.nrows()
    }

    pub fn shared_dim(&self) -> usize {
        self.image.ncols()
    }

    /// Checks the production shapes 768×512 and 512×512.
    pub fn check_standard(&self) -> Result<(), AssociateError> {
        if self.image.dim() != (IMAGE_DIM, SHARED_DIM) || self.text.dim() != (TEXT_DIM, SHARED_DIM) {
            return Err(AssociateError::Shape(format!(
                "heads are {:?} and {:?}, expected ({IMAGE_DIM}, {SHARED_DIM}) and ({TEXT_DIM}, {SHARED_DIM})",
                self.image.dim(),
                self.text.dim()
            )));
        }
        Ok(())
    }

    /// Recomputes `version` from the weights as stored on disk (f32).
    pub fn stamp(&mut self) {
        let mut bytes = Vec::with_capacity((self.image.len() + self.text.len()) * 4);
        for v in self.image.iter().chain(self.text.iter()) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.version = format!("h{}", short_digest(&bytes));
    }

    pub fn project_image(&self, v: &[f32]) -> Result<Vec<f64>, AssociateError> {
        project(&self.image, v, "image")
    }

    pub fn project_text(&self, v: &[f32]) -> Result<Vec<f64>, AssociateError> {
        project(&self.text, v, "text")
    }

    pub fn write_to<W: Write>(&self, mut w: W, config_digest: &str) -> Result<(), AssociateError> {
        let header = CheckpointHeader {
            format: HEADS_FORMAT.into(),
            byte_order: "little".into(),
            heads_version: self.version.clone(),
            config_digest: config_digest.into(),
            image_shape: [self.image.nrows(), self.image.ncols()],
            text_shape: [self.text.nrows(), self.text.ncols()],
        };
        serde_json::to_writer(&mut w, &header).map_err(|e| AssociateError::Checkpoint(e.to_string()))?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity((self.image.len() + self.text.len()) * 4);
        for v in self.image.iter().chain(self.text.iter()) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    /// Reads a checkpoint; returns the heads and the config digest.
    pub fn read_from<R: Read>(r: R) -> Result<(Self, String), AssociateError> {
        let mut reader = BufReader::new(r);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        let h: CheckpointHeader =
            serde_json::from_slice(&line).map_err(|e| AssociateError::Checkpoint(e.to_string()))?;
        if h.format != HEADS_FORMAT || h.byte_order != "little" {
            return Err(AssociateError::Checkpoint(format!("not a heads checkpoint: {:?}", h.format)));
        }
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let n_img = h.image_shape[0] * h.image_shape[1];
        let n_txt = h.text_shape[0] * h.text_shape[1];
        if bytes.len() != (n_img + n_txt) * 4 {
            return Err(AssociateError::Checkpoint(format!(
                "payload is {} bytes, expected {}",
                bytes.len(),
                (n_img + n_txt) * 4
            )));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let image = Array2::from_shape_vec((h.image_shape[0], h.image_shape[1]), floats[..n_img].to_vec())
            .map_err(|e| AssociateError::Checkpoint(e.to_string()))?;
        let text = Array2::from_shape_vec((h.text_shape[0], h.text_shape[1]), floats[n_img..].to_vec())
            .map_err(|e| AssociateError::Checkpoint(e.to_string()))?;
        let heads = Self::new(image, text)?;
        if heads.version != h.heads_version {
            return Err(AssociateError::Checkpoint(format!(
                "weights hash to {}, header says {}",
                heads.version, h.heads_version
            )));
        }
        Ok((heads, h.config_digest))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    byte_order: String,
    heads_version: String,
    config_digest: String,
    image_shape: [usize; 2],
    text_shape: [usize; 2],
}

fn project(w: &Array2<f64>, v: &[f32], which: &str) -> Result<Vec<f64>, AssociateError> {
    if v.len() != w.nrows() {
        return Err(AssociateError::Shape(format!(
            "{which} vector has {} components, head expects {}",
            v.len(),
            w.nrows()
        )));
    }
    let x: Array1<f64> = v.iter().map(|&f| f as f64).collect();
    let u = w.t().dot(&x);
    normalize(u.view()).ok_or_else(|| AssociateError::Degenerate(format!("{which} projection has zero length")))
}

/// Unit vector along `u`, or `None` for a zero or non-finite input.
pub fn normalize(u: ArrayView1<f64>) -> Option<Vec<f64>> {
    let norm = u.dot(&u).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    Some(u.iter().map(|x| x / norm).collect())
}

/// Cosine of two unit vectors: their dot product.
pub fn cosine_sim(x: &[f64], y: &[f64]) -> Result<f64, AssociateError> {
    if x.len() != y.len() {
        return Err(AssociateError::Shape(format!("dimension mismatch {} vs {}", x.len(), y.len())));
    }
    let d: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(d.clamp(-1.0, 1.0))
}
