//! Synthetic paired corpora with a known linear link between modalities.
//!
//! Image bases are standard Gaussian vectors. Each text base is a fixed
//! random linear map of its image base plus independent Gaussian noise, so a
//! pair of linear heads can align the two spaces almost perfectly.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::associate::{gaussian, BaseEmbeddings};
use crate::catalog::{CaptureManifest, DatasetCatalog, ObjectRecord, Split};
use crate::embfile::EmbeddingTable;
use crate::labeler::{Description, PromptKind};

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
    /// The image-to-text map, `text_dim × image_dim`.
    pub link: Array2<f64>,
    pub noise: f64,
}

impl SyntheticCorpus {
    pub fn generate(n: usize, image_dim: usize, text_dim: usize, noise: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (image_dim as f64).sqrt();
        let link = Array2::from_shape_simple_fn((text_dim, image_dim), || gaussian(&mut rng) * scale);
        let images = Array2::from_shape_simple_fn((n, image_dim), || gaussian(&mut rng));
        let mut texts = images.dot(&link.t());
        texts.mapv_inplace(|v| v + noise * gaussian(&mut rng));
        Self {
            images,
            texts,
            link,
            noise,
        }
    }

    /// Corpus at the production widths.
    pub fn standard(n: usize, noise: f64, seed: u64) -> Self {
        Self::generate(n, crate::IMAGE_DIM, crate::TEXT_DIM, noise, seed)
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn id(i: usize) -> String {
        format!("syn{i:05}")
    }

    pub fn ids(&self) -> Vec<String> {
        (0..self.len()).map(Self::id).collect()
    }

    pub fn bases(&self) -> BaseEmbeddings {
        let table = |m: &Array2<f64>| {
            let mut t = EmbeddingTable::new(m.ncols());
            for (i, row) in m.rows().into_iter().enumerate() {
                let v: Vec<f32> = row.iter().map(|&x| x as f32).collect();
                t.push(Self::id(i), &v).expect("fresh ids");
            }
            t
        };
        BaseEmbeddings {
            images: table(&self.images),
            texts: table(&self.texts),
        }
    }

    /// Catalog with one template description per object, all in the train split.
    pub fn catalog(&self) -> DatasetCatalog {
        let records = self
            .ids()
            .into_iter()
            .map(|id| ObjectRecord {
                image_ref: format!("images/{id}.png"),
                model_ref: format!("models/{id}.obj"),
                category: "chair".into(),
                display_name: None,
                object_id: id,
            })
            .collect();
        let manifest = CaptureManifest::new("synthetic", "generated pairs", records).expect("non-empty corpus");
        let mut catalog = DatasetCatalog::new(manifest);
        catalog.descriptions = self
            .ids()
            .into_iter()
            .map(|id| {
                let text = format!("A synthetic chair named {id}.");
                let d = Description {
                    object_id: id.clone(),
                    kind: PromptKind::Template,
                    token_count: text.split_whitespace().count(),
                    text,
                    backend_id: "synthetic".into(),
                    created_at: 0,
                    budget_action: None,
                };
                (id, vec![d])
            })
            .collect();
        catalog.split_assignment = self.ids().into_iter().map(|id| (id, Split::Train)).collect::<BTreeMap<_, _>>();
        catalog
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_linked() {
        let a = SyntheticCorpus::generate(10, 12, 8, 0.05, 4);
        let b = SyntheticCorpus::generate(10, 12, 8, 0.05, 4);
        assert_eq!(a.texts, b.texts);
        let residual = &a.texts - &a.images.dot(&a.link.t());
        let rms = (residual.mapv(|v| v * v).mean().unwrap()).sqrt();
        assert!((rms - 0.05).abs() < 0.015, "{rms}");
    }

    #[test]
    fn catalog_is_complete() {
        let c = SyntheticCorpus::generate(5, 4, 3, 0.05, 1);
        let cat = c.catalog();
        cat.validate().unwrap();
        assert_eq!(cat.ids_in(Split::Train).len(), 5);
        assert!(cat.ids().all(|id| !cat.descriptions_of(id).is_empty()));
        let bases = c.bases();
        assert_eq!(bases.images.dimension(), 4);
        assert_eq!(bases.texts.get("syn00002").unwrap().len(), 3);
    }
}
