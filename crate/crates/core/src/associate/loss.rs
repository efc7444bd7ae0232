//! Symmetric contrastive loss over a batch of positive pairs, with analytic
//! gradients.
//!
//! For projected unit vectors `a_i` (images) and `b_j` (texts) the logits are
//! `S_ij = a_i·b_j / τ`. The loss is the mean over `i` of the negative log
//! softmax of row `i` at `i` plus the negative log softmax of column `i` at
//! `i`. With `τ = 1` the logits are plain cosine similarities.

use ndarray::{Array1, Array2, Axis};

use super::{AssociateError, ProjectionHeads};

/// Aligned image and text base vectors; row `i` of each is one object.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
    pub object_ids: Vec<String>,
}

impl TrainingBatch {
    pub fn new(images: Array2<f64>, texts: Array2<f64>, object_ids: Vec<String>) -> Result<Self, AssociateError> {
        if images.nrows() != texts.nrows() || images.nrows() != object_ids.len() {
            return Err(AssociateError::Shape(format!(
                "batch has {} images, {} texts, {} ids",
                images.nrows(),
                texts.nrows(),
                object_ids.len()
            )));
        }
        if images.nrows() < 2 {
            return Err(AssociateError::BatchTooSmall(images.nrows()));
        }
        Ok(Self {
            images,
            texts,
            object_ids,
        })
    }

    /// Builds a batch from `f32` rows.
    pub fn from_rows(images: &[&[f32]], texts: &[&[f32]], object_ids: Vec<String>) -> Result<Self, AssociateError> {
        let to_matrix = |rows: &[&[f32]]| -> Result<Array2<f64>, AssociateError> {
            let width = rows.first().map_or(0, |r| r.len());
            if rows.iter().any(|r| r.len() != width) {
                return Err(AssociateError::Shape("ragged batch rows".into()));
            }
            Ok(Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j] as f64))
        };
        Self::new(to_matrix(images)?, to_matrix(texts)?, object_ids)
    }

    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
}

/// Forward quantities kept for the backward pass.
struct Forward {
    a: Array2<f64>,
    b: Array2<f64>,
    u_norm: Array1<f64>,
    v_norm: Array1<f64>,
    /// Row softmax of the logits.
    p: Array2<f64>,
    /// Column softmax of the logits.
    q: Array2<f64>,
    loss: f64,
}

fn normalize_rows(u: &Array2<f64>, which: &str) -> Result<(Array2<f64>, Array1<f64>), AssociateError> {
    let norms: Array1<f64> = u.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|n| !(*n > 0.0) || !n.is_finite()) {
        return Err(AssociateError::Degenerate(format!("{which} row {i} projects to zero or non-finite length")));
    }
    let a = u / &norms.view().insert_axis(Axis(1));
    Ok((a, norms))
}

fn forward(batch: &TrainingBatch, heads: &ProjectionHeads, temperature: f64) -> Result<Forward, AssociateError> {
    if batch.len() < 2 {
        return Err(AssociateError::BatchTooSmall(batch.len()));
    }
    if batch.images.ncols() != heads.image_dim() || batch.texts.ncols() != heads.text_dim() {
        return Err(AssociateError::Shape(format!(
            "batch widths ({}, {}) do not match heads ({}, {})",
            batch.images.ncols(),
            batch.texts.ncols(),
            heads.image_dim(),
            heads.text_dim()
        )));
    }
    let n = batch.len();
    let (a, u_norm) = normalize_rows(&batch.images.dot(&heads.image), "image")?;
    let (b, v_norm) = normalize_rows(&batch.texts.dot(&heads.text), "text")?;
    // One similarity matrix serves both directions.
    let s = a.dot(&b.t()) / temperature;
    if let Some(((i, j), _)) = s.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(AssociateError::NonFinite(format!("similarity of pair ({i}, {j})")));
    }

    let mut p = s.clone();
    let mut row_lse = Array1::zeros(n);
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        row.mapv_inplace(|x| (x - m).exp());
        let z = row.sum();
        row /= z;
        row_lse[i] = m + z.ln();
    }
    let mut q = s.clone();
    let mut col_lse = Array1::zeros(n);
    for (j, mut col) in q.columns_mut().into_iter().enumerate() {
        let m = col.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
        col.mapv_inplace(|x| (x - m).exp());
        let z = col.sum();
        col /= z;
        col_lse[j] = m + z.ln();
    }

    let mut total = 0.0;
    for i in 0..n {
        total += (row_lse[i] - s[[i, i]]) + (col_lse[i] - s[[i, i]]);
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        let i = (0..n)
            .find(|&i| !(row_lse[i] - s[[i, i]] + col_lse[i] - s[[i, i]]).is_finite())
            .unwrap_or(0);
        return Err(AssociateError::NonFinite(format!("loss term of pair ({i}, {i})")));
    }
    Ok(Forward {
        a,
        b,
        u_norm,
        v_norm,
        p,
        q,
        loss,
    })
}

/// The contrastive objective at a fixed temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contrastive {
    pub temperature: f64,
}

impl Default for Contrastive {
    fn default() -> Self {
        Self { temperature: 1.0 }
    }
}

impl Contrastive {
    pub fn new(temperature: f64) -> Result<Self, AssociateError> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(AssociateError::Config(format!("temperature {temperature} must be positive")));
        }
        Ok(Self { temperature })
    }

    pub fn loss(&self, batch: &TrainingBatch, heads: &ProjectionHeads) -> Result<LossValue, AssociateError> {
        let f = forward(batch, heads, self.temperature)?;
        Ok(LossValue {
            value: f.loss,
            n: batch.len(),
        })
    }

    pub fn loss_and_gradients(
        &self,
        batch: &TrainingBatch,
        heads: &ProjectionHeads,
    ) -> Result<(LossValue, Gradients), AssociateError> {
        let f = forward(batch, heads, self.temperature)?;
        let n = batch.len();
        // dL/dS = ((P - I) + (Q - I)) / N
        let mut g = &f.p + &f.q;
        for i in 0..n {
            g[[i, i]] -= 2.0;
        }
        g /= n as f64;
        let scale = 1.0 / self.temperature;
        let d_a = g.dot(&f.b) * scale;
        let d_b = g.t().dot(&f.a) * scale;
        let d_u = through_normalization(&f.a, &d_a, &f.u_norm);
        let d_v = through_normalization(&f.b, &d_b, &f.v_norm);
        let grads = Gradients {
            image: batch.images.t().dot(&d_u),
            text: batch.texts.t().dot(&d_v),
        };
        Ok((LossValue { value: f.loss, n }, grads))
    }
}

/// Backpropagates through `a = u / |u|`: `du = (da - a (a·da)) / |u|`.
fn through_normalization(a: &Array2<f64>, d_a: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = d_a.clone();
    for ((mut row, a_row), n) in out.rows_mut().into_iter().zip(a.rows()).zip(norms.iter()) {
        let proj = a_row.dot(&row);
        row.scaled_add(-proj, &a_row);
        row /= *n;
    }
    out
}

/// Loss at temperature 1.
pub fn contrastive_loss(batch: &TrainingBatch, heads: &ProjectionHeads) -> Result<LossValue, AssociateError> {
    Contrastive::default().loss(batch, heads)
}

/// Gradients of [`contrastive_loss`] with respect to both heads.
pub fn loss_gradients(batch: &TrainingBatch, heads: &ProjectionHeads) -> Result<Gradients, AssociateError> {
    Contrastive::default().loss_and_gradients(batch, heads).map(|(_, g)| g)
}
