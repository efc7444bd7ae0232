//! Browser demo: the schedule curve, training on a tiny synthetic corpus, and
//! fused search over the trained index.
//!
//! The plain Rust API below is what the native tests exercise; the
//! `wasm_bindgen` wrappers at the bottom only convert errors and containers.

use objfind_core::associate::{lr_at_step, train_pairs, PairSet, ProjectionHeads, TrainConfig};
use objfind_core::eval::similarity_matrix;
use objfind_core::index::{build_index, SearchIndex};
use objfind_core::synthetic::SyntheticCorpus;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const IMAGE_DIM: usize = 24;
const TEXT_DIM: usize = 16;
const SHARED_DIM: usize = 16;
pub const MAX_OBJECTS: usize = 64;

/// Learning rate at every step `0..=total_steps`.
pub fn schedule_curve(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Vec<f64>, String> {
    let config = TrainConfig {
        peak_lr,
        warmup_steps,
        ..TrainConfig::default()
    };
    (0..=total_steps)
        .map(|s| lr_at_step(s, &config, total_steps).map_err(|e| e.to_string()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Hit {
    pub object_id: String,
    pub rank: usize,
    pub score: f64,
    pub image_score: f64,
    pub text_score: f64,
}

/// A corpus, the heads trained on it and the resulting index.
pub struct Demo {
    corpus: SyntheticCorpus,
    heads: ProjectionHeads,
    index: SearchIndex,
    epoch_losses: Vec<f64>,
}

impl Demo {
    pub fn train(objects: usize, epochs: usize, seed: u64) -> Result<Self, String> {
        if !(2..=MAX_OBJECTS).contains(&objects) {
            return Err(format!("objects must be between 2 and {MAX_OBJECTS}"));
        }
        let batch_size = 16;
        let total_steps = (objects / batch_size).max(1) * epochs;
        let corpus = SyntheticCorpus::generate(objects, IMAGE_DIM, TEXT_DIM, 0.05, seed);
        let bases = corpus.bases();
        let pairs = PairSet::gather(&bases, &corpus.ids()).map_err(|e| e.to_string())?;
        let config = TrainConfig {
            batch_size,
            epochs,
            warmup_steps: total_steps / 5,
            peak_lr: 1.0,
            temperature: 0.07,
            seed,
            ..TrainConfig::default()
        };
        let init = ProjectionHeads::random(IMAGE_DIM, TEXT_DIM, SHARED_DIM, seed);
        let outcome = train_pairs(&pairs, None, &config, Some(init)).map_err(|e| e.to_string())?;
        let mut epoch_losses = vec![outcome.history.initial_train_loss];
        epoch_losses.extend(outcome.history.epochs.iter().map(|e| e.train_loss));
        let index = build_index(&corpus.catalog(), &bases, &outcome.heads).map_err(|e| e.to_string())?;
        Ok(Self {
            corpus,
            heads: outcome.heads,
            index,
            epoch_losses,
        })
    }

    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    /// Full-pass training loss before training and after each epoch.
    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    /// Description-by-image cosine matrix, row-major.
    pub fn heatmap(&self) -> Vec<f64> {
        let m = similarity_matrix(&self.index, &self.corpus.ids()).expect("all ids indexed");
        m.values.into_iter().flatten().collect()
    }

    pub fn diagonal_margin(&self) -> f64 {
        similarity_matrix(&self.index, &self.corpus.ids())
            .ok()
            .and_then(|m| m.diagonal_margin())
            .unwrap_or(0.0)
    }

    /// Searches with the description of object `query` at the given fusion weight.
    pub fn search(&self, query: usize, k: usize, visual_focus: f64) -> Result<Vec<Hit>, String> {
        if query >= self.len() {
            return Err(format!("query object {query} is out of range"));
        }
        let text = self.corpus.texts.row(query);
        let base: Vec<f32> = text.iter().map(|&x| x as f32).collect();
        let q = self.heads.project_text(&base).map_err(|e| e.to_string())?;
        let results = self
            .index
            .search_vector(&q, k, visual_focus)
            .map_err(|e| e.to_string())?;
        Ok(results
            .into_iter()
            .map(|r| Hit {
                object_id: r.object_id,
                rank: r.rank,
                score: r.score,
                image_score: r.image_score,
                text_score: r.text_score,
            })
            .collect())
    }
}

#[wasm_bindgen(js_name = lrSchedule)]
pub fn lr_schedule(peak_lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Vec<f64>, JsError> {
    schedule_curve(peak_lr, warmup_steps, total_steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = Demo)]
pub struct WebDemo(Demo);

#[wasm_bindgen(js_class = Demo)]
impl WebDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(objects: usize, epochs: usize, seed: u32) -> Result<WebDemo, JsError> {
        Demo::train(objects, epochs, seed.into()).map(WebDemo).map_err(|e| JsError::new(&e))
    }

    pub fn size(&self) -> usize {
        self.0.len()
    }

    #[wasm_bindgen(js_name = epochLosses)]
    pub fn epoch_losses(&self) -> Vec<f64> {
        self.0.epoch_losses().to_vec()
    }

    pub fn heatmap(&self) -> Vec<f64> {
        self.0.heatmap()
    }

    #[wasm_bindgen(js_name = diagonalMargin)]
    pub fn diagonal_margin(&self) -> f64 {
        self.0.diagonal_margin()
    }

    /// Ranked hits as a JSON array.
    pub fn search(&self, query: usize, k: usize, visual_focus: f64) -> Result<String, JsError> {
        let hits = self.0.search(query, k, visual_focus).map_err(|e| JsError::new(&e))?;
        Ok(serde_json::to_string(&hits).expect("hits serialize"))
    }
}
