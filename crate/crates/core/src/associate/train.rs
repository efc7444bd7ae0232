use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at_step, AssociateError, Contrastive, Gradients, ProjectionHeads, TrainingBatch};
use crate::catalog::{DatasetCatalog, Split};
use crate::digest::json_digest;
use crate::embfile::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Gradient descent with decoupled weight decay.
    Sgd,
    /// Adam moments (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Logits are cosine similarity divided by this.
    pub temperature: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 5,
            weight_decay: 0.01,
            warmup_steps: 50,
            peak_lr: 2e-5,
            schedule: Schedule::Cosine,
            seed: 0,
            temperature: 1.0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    /// Settings that train heads from random initialization on a few hundred
    /// objects within seconds. The default settings are sized for fine-tuning
    /// pretrained weights on thousands of pairs.
    pub fn desk_scale() -> Self {
        Self {
            epochs: 20,
            warmup_steps: 20,
            peak_lr: 1.0,
            temperature: 0.07,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AssociateError> {
        let fail = |m: String| Err(AssociateError::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.epochs < 1 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return fail(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        Contrastive::new(self.temperature)?;
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// Base image and text tables keyed by object id.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseEmbeddings {
    pub images: EmbeddingTable,
    pub texts: EmbeddingTable,
}

/// Aligned pairs, ids sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pub ids: Vec<String>,
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
}

impl PairSet {
    /// Gathers `ids` from `bases`, reporting every id missing either vector.
    pub fn gather(bases: &BaseEmbeddings, ids: &[String]) -> Result<Self, AssociateError> {
        let mut ids = ids.to_vec();
        ids.sort();
        let missing: Vec<String> = ids
            .iter()
            .filter(|id| !bases.images.contains(id) || !bases.texts.contains(id))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(AssociateError::MissingEmbeddings(missing));
        }
        let di = bases.images.dimension();
        let dt = bases.texts.dimension();
        let images = Array2::from_shape_fn((ids.len(), di), |(i, j)| bases.images.get(&ids[i]).expect("present")[j] as f64);
        let texts = Array2::from_shape_fn((ids.len(), dt), |(i, j)| bases.texts.get(&ids[i]).expect("present")[j] as f64);
        Ok(Self { ids, images, texts })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn batch(&self, rows: &[usize]) -> TrainingBatch {
        TrainingBatch {
            images: self.images.select(Axis(0), rows),
            texts: self.texts.select(Axis(0), rows),
            object_ids: rows.iter().map(|&r| self.ids[r].clone()).collect(),
        }
    }
}

/// Splits `order` into batches of `size`; a trailing batch of one is merged
/// into its predecessor so every batch has negatives.
fn chunk(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Mean batch loss over `pairs` in fixed order. `None` with fewer than two pairs.
pub fn dataset_loss(
    pairs: &PairSet,
    heads: &ProjectionHeads,
    batch_size: usize,
    temperature: f64,
) -> Result<Option<f64>, AssociateError> {
    if pairs.len() < 2 {
        return Ok(None);
    }
    let objective = Contrastive::new(temperature)?;
    let order: Vec<usize> = (0..pairs.len()).collect();
    let batches = chunk(&order, batch_size.max(2));
    let mut total = 0.0;
    for rows in &batches {
        total += objective.loss(&pairs.batch(rows), heads)?.value;
    }
    Ok(Some(total / batches.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_step_loss: f64,
    /// Full pass over the training pairs at the end of the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub config_digest: String,
    pub total_steps: usize,
    pub initial_train_loss: f64,
    pub initial_val_loss: Option<f64>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(self.initial_train_loss, |e| e.train_loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub heads: ProjectionHeads,
    /// Epoch-end checkpoint with the lowest full-pass training loss.
    pub best_train: ProjectionHeads,
    /// Epoch-end checkpoint with the lowest validation loss, when there is a
    /// validation split.
    pub best_val: Option<ProjectionHeads>,
    pub history: TrainingHistory,
}

enum OptimizerState {
    Sgd,
    AdamW {
        t: i32,
        m: Gradients,
        v: Gradients,
    },
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl OptimizerState {
    fn new(kind: OptimizerKind, heads: &ProjectionHeads) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::AdamW => {
                let zeros = || Gradients {
                    image: Array2::zeros(heads.image.dim()),
                    text: Array2::zeros(heads.text.dim()),
                };
                Self::AdamW { t: 0, m: zeros(), v: zeros() }
            }
        }
    }

    fn step(&mut self, heads: &mut ProjectionHeads, grads: &Gradients, lr: f64, weight_decay: f64) {
        match self {
            Self::Sgd => {
                for (w, g) in [(&mut heads.image, &grads.image), (&mut heads.text, &grads.text)] {
                    w.zip_mut_with(g, |w, g| *w -= lr * (g + weight_decay * *w));
                }
            }
            Self::AdamW { t, m, v } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                let parts = [
                    (&mut heads.image, &grads.image, &mut m.image, &mut v.image),
                    (&mut heads.text, &grads.text, &mut m.text, &mut v.text),
                ];
                for (w, g, m, v) in parts {
                    ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let update = (*m / c1) / ((*v / c2).sqrt() + EPS);
                        *w -= lr * (update + weight_decay * *w);
                    });
                }
            }
        }
    }
}

/// Numeric failures become [`AssociateError::Diverged`] carrying the last
/// weights that produced a finite step.
fn diverged(err: AssociateError, step: usize, last_good: &ProjectionHeads) -> AssociateError {
    match err {
        AssociateError::NonFinite(_) | AssociateError::Degenerate(_) => {
            let mut heads = last_good.clone();
            heads.stamp();
            AssociateError::Diverged {
                step,
                reason: err.to_string(),
                last_good: Box::new(heads),
            }
        }
        other => other,
    }
}

/// Trains on the catalog's train split, tracking validation loss on its
/// validation split.
pub fn train(
    catalog: &DatasetCatalog,
    bases: &BaseEmbeddings,
    config: &TrainConfig,
    init: Option<ProjectionHeads>,
) -> Result<TrainOutcome, AssociateError> {
    if catalog.split_assignment.is_empty() {
        return Err(AssociateError::Catalog("catalog has no split assignment".into()));
    }
    let train_ids = catalog.ids_in(Split::Train);
    let val_ids = catalog.ids_in(Split::Validation);
    let unlabeled: Vec<String> = train_ids
        .iter()
        .filter(|id| catalog.descriptions_of(id).is_empty())
        .cloned()
        .collect();
    if !unlabeled.is_empty() {
        return Err(AssociateError::Catalog(format!(
            "train objects without descriptions: {}",
            unlabeled.join(", ")
        )));
    }
    let train_set = PairSet::gather(bases, &train_ids)?;
    let val_set = if val_ids.len() >= 2 {
        Some(PairSet::gather(bases, &val_ids)?)
    } else {
        None
    };
    train_pairs(&train_set, val_set.as_ref(), config, init)
}

/// The training loop over explicit pair sets.
pub fn train_pairs(
    train_set: &PairSet,
    val_set: Option<&PairSet>,
    config: &TrainConfig,
    init: Option<ProjectionHeads>,
) -> Result<TrainOutcome, AssociateError> {
    config.validate()?;
    if train_set.len() < 2 {
        return Err(AssociateError::BatchTooSmall(train_set.len()));
    }
    let mut heads = match init {
        Some(h) => h,
        None => ProjectionHeads::random(
            train_set.images.ncols(),
            train_set.texts.ncols(),
            crate::SHARED_DIM,
            config.seed,
        ),
    };
    if heads.image_dim() != train_set.images.ncols() || heads.text_dim() != train_set.texts.ncols() {
        return Err(AssociateError::Shape("initial heads do not match embedding widths".into()));
    }
    let objective = Contrastive::new(config.temperature)?;
    let order: Vec<usize> = (0..train_set.len()).collect();
    let per_epoch = chunk(&order, config.batch_size).len();
    let total_steps = per_epoch * config.epochs;
    lr_at_step(0, config, total_steps)?;

    let full_loss = |h: &ProjectionHeads, set: &PairSet| dataset_loss(set, h, config.batch_size, config.temperature);
    let mut history = TrainingHistory {
        config_digest: config.digest(),
        total_steps,
        initial_train_loss: full_loss(&heads, train_set)?.expect("at least two pairs"),
        initial_val_loss: val_set.map(|v| full_loss(&heads, v)).transpose()?.flatten(),
        steps: Vec::with_capacity(total_steps),
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut optimizer = OptimizerState::new(config.optimizer, &heads);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best_train: Option<(f64, ProjectionHeads)> = None;
    let mut best_val: Option<(f64, ProjectionHeads)> = None;
    let mut step = 0;
    let mut last_good = heads.clone();

    for epoch in 0..config.epochs {
        let mut shuffled = order.clone();
        shuffled.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let batches = chunk(&shuffled, config.batch_size);
        for rows in &batches {
            let lr = lr_at_step(step, config, total_steps)?;
            let batch = train_set.batch(rows);
            let (loss, grads) = objective
                .loss_and_gradients(&batch, &heads)
                .map_err(|e| diverged(e, step, &last_good))?;
            optimizer.step(&mut heads, &grads, lr, config.weight_decay);
            if heads.image.iter().chain(heads.text.iter()).any(|w| !w.is_finite()) {
                return Err(diverged(AssociateError::NonFinite("weights".into()), step, &last_good));
            }
            last_good = heads.clone();
            history.steps.push(StepRecord { step, lr, loss: loss.value });
            epoch_loss += loss.value;
            step += 1;
        }
        heads.stamp();
        let train_loss = full_loss(&heads, train_set)
            .map_err(|e| diverged(e, step, &last_good))?
            .expect("at least two pairs");
        let val_loss = val_set
            .map(|v| full_loss(&heads, v))
            .transpose()
            .map_err(|e| diverged(e, step, &last_good))?
            .flatten();
        if best_train.as_ref().is_none_or(|(l, _)| train_loss < *l) {
            best_train = Some((train_loss, heads.clone()));
        }
        if let Some(v) = val_loss {
            if best_val.as_ref().is_none_or(|(l, _)| v < *l) {
                best_val = Some((v, heads.clone()));
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            mean_step_loss: epoch_loss / batches.len() as f64,
            train_loss,
            val_loss,
        });
    }

    Ok(TrainOutcome {
        best_train: best_train.map(|(_, h)| h).unwrap_or_else(|| heads.clone()),
        best_val: best_val.map(|(_, h)| h),
        heads,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticCorpus;

    #[test]
    fn chunking_merges_singletons() {
        let order: Vec<usize> = (0..65).collect();
        let b = chunk(&order, 32);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 33]);
        assert_eq!(chunk(&order[..5], 32).len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { peak_lr: 0.0, ..Default::default() },
            TrainConfig { temperature: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(AssociateError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn default_matches_published_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs, c.warmup_steps), (32, 5, 50));
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!(c.peak_lr, 2e-5);
        assert_eq!(c.schedule, Schedule::Cosine);
    }

    #[test]
    fn missing_embeddings_listed() {
        let corpus = SyntheticCorpus::generate(4, 8, 6, 0.05, 1);
        let mut bases = corpus.bases();
        let mut images = EmbeddingTable::new(8);
        for id in bases.images.ids().iter().skip(1).take(2) {
            images.push(id.clone(), bases.images.get(id).unwrap()).unwrap();
        }
        bases.images = images;
        let ids = corpus.ids();
        match PairSet::gather(&bases, &ids) {
            Err(AssociateError::MissingEmbeddings(m)) => assert_eq!(m, vec![ids[0].clone(), ids[3].clone()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn infeasible_schedule_is_reported() {
        let corpus = SyntheticCorpus::generate(20, 8, 6, 0.05, 1);
        let set = PairSet::gather(&corpus.bases(), &corpus.ids()).unwrap();
        // 1 step per epoch x 5 epochs does not clear 50 warmup steps.
        let err = train_pairs(&set, None, &TrainConfig::default(), None).unwrap_err();
        assert!(matches!(err, AssociateError::Schedule(_)), "{err}");
    }

    fn small_run(seed: u64) -> TrainOutcome {
        let corpus = SyntheticCorpus::generate(40, 16, 12, 0.05, 3);
        let set = PairSet::gather(&corpus.bases(), &corpus.ids()).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            epochs: 30,
            warmup_steps: 10,
            seed,
            ..TrainConfig::desk_scale()
        };
        let init = ProjectionHeads::random(16, 12, 8, seed);
        train_pairs(&set, None, &config, Some(init)).unwrap()
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let a = small_run(5);
        let b = small_run(5);
        assert_eq!(a.history, b.history);
        assert_eq!(a.heads, b.heads);
        assert!(a.history.final_train_loss() < a.history.initial_train_loss);
        assert!(a.history.steps.windows(2).all(|w| w[1].step == w[0].step + 1));
        assert_eq!(a.history.steps.len(), a.history.total_steps);
        let c = small_run(6);
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn divergence_returns_last_good_heads() {
        let corpus = SyntheticCorpus::generate(16, 8, 6, 0.05, 4);
        let set = PairSet::gather(&corpus.bases(), &corpus.ids()).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            epochs: 10,
            warmup_steps: 1,
            peak_lr: 1e306,
            ..TrainConfig::default()
        };
        match train_pairs(&set, None, &config, Some(ProjectionHeads::random(8, 6, 4, 0))) {
            Err(AssociateError::Diverged { last_good, .. }) => {
                assert!(last_good.image.iter().chain(last_good.text.iter()).all(|w| w.is_finite()));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn adamw_option_trains() {
        let corpus = SyntheticCorpus::generate(24, 10, 8, 0.05, 4);
        let set = PairSet::gather(&corpus.bases(), &corpus.ids()).unwrap();
        let config = TrainConfig {
            batch_size: 8,
            epochs: 20,
            warmup_steps: 5,
            peak_lr: 5e-3,
            optimizer: OptimizerKind::AdamW,
            ..TrainConfig::desk_scale()
        };
        let out = train_pairs(&set, None, &config, None).unwrap();
        assert!(out.history.final_train_loss() < 0.5 * out.history.initial_train_loss);
        assert_eq!(out.heads.shared_dim(), crate::SHARED_DIM);
    }

    #[test]
    fn sgd_small_step_does_not_increase_loss() {
        let corpus = SyntheticCorpus::generate(8, 10, 7, 0.05, 9);
        let set = PairSet::gather(&corpus.bases(), &corpus.ids()).unwrap();
        let rows: Vec<usize> = (0..8).collect();
        let batch = set.batch(&rows);
        for seed in 0..10 {
            let heads = ProjectionHeads::random(10, 7, 5, seed);
            let obj = Contrastive::default();
            let (l0, g) = obj.loss_and_gradients(&batch, &heads).unwrap();
            let mut next = heads.clone();
            OptimizerState::Sgd.step(&mut next, &g, 1e-6, 0.0);
            let l1 = obj.loss(&batch, &next).unwrap();
            assert!(l1.value <= l0.value, "seed {seed}: {} > {}", l1.value, l0.value);
        }
    }

    #[test]
    fn catalog_train_requires_splits_and_labels() {
        let corpus = SyntheticCorpus::generate(6, 8, 6, 0.05, 2);
        let catalog = corpus.catalog();
        let unsplit = DatasetCatalog {
            split_assignment: Default::default(),
            ..catalog.clone()
        };
        assert!(matches!(
            train(&unsplit, &corpus.bases(), &TrainConfig::desk_scale(), None),
            Err(AssociateError::Catalog(_))
        ));
        let mut unlabeled = catalog.clone();
        unlabeled.descriptions.clear();
        assert!(matches!(
            train(&unlabeled, &corpus.bases(), &TrainConfig::desk_scale(), None),
            Err(AssociateError::Catalog(_))
        ));
    }
}
