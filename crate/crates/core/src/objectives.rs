//! Training objectives and the cosine classifier head.

use std::collections::VecDeque;

use facedyn_autograd::{concat, Float, Var};
use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit norm expected by [`supcon_loss`].
pub const UNIT_NORM_TOL: f64 = 1e-4;
const EXCLUDED_LOGIT: f64 = -1e9;
const MIN_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupConConfig {
    pub temperature: f64,
    pub queue_capacity: usize,
}

impl Default for SupConConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            queue_capacity: 4096,
        }
    }
}

impl SupConConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// FIFO of detached unit embeddings and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryQueue {
    capacity: usize,
    items: VecDeque<(Vec<f64>, usize)>,
}

impl MemoryQueue {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// Appends rows in order, evicting the oldest entries beyond capacity.
    pub fn push(&mut self, embeddings: &Array2<f64>, labels: &[usize]) {
        assert_eq!(embeddings.nrows(), labels.len());
        if self.capacity == 0 {
            return;
        }
        for (row, &y) in embeddings.rows().into_iter().zip(labels) {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back((row.to_vec(), y));
        }
    }

    /// Stored embeddings, oldest first.
    pub fn embeddings(&self) -> Option<Array2<f64>> {
        let dim = self.items.front()?.0.len();
        Some(Array2::from_shape_fn((self.len(), dim), |(i, j)| {
            self.items[i].0[j]
        }))
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|(_, y)| *y).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SupConOutput<'g, T: Float> {
    pub loss: Var<'g, T>,
    /// Anchors with at least one positive; the loss averages over these.
    pub valid_anchors: usize,
    /// Set when no anchor had a positive and the loss is zero.
    pub no_positives: bool,
}

/// Supervised contrastive loss over unit embeddings `[B, E]`.
///
/// Candidates for anchor `i` are the batch plus the queue without `i`;
/// positives are the candidates sharing its label. Anchors without positives
/// are skipped. The batch is enqueued afterwards.
pub fn supcon_loss<'g, T: Float>(
    embeddings: Var<'g, T>,
    labels: &[usize],
    queue: &mut MemoryQueue,
    cfg: &SupConConfig,
) -> Result<SupConOutput<'g, T>> {
    cfg.validate()?;
    let g = embeddings.graph();
    let z_val = embeddings.value().mapv(|v| v.to_f64());
    let shape = z_val.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::Contract(format!(
            "embeddings {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    let (b, e) = (shape[0], shape[1]);
    let z2 = z_val.into_shape_with_order((b, e)).unwrap();
    for (i, row) in z2.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "embedding {i} has norm {n}, expected 1"
            )));
        }
    }
    let queued = queue.embeddings();
    if let Some(q) = &queued {
        if q.ncols() != e {
            return Err(Error::Contract(format!(
                "queue holds {}-dim embeddings, batch {e}",
                q.ncols()
            )));
        }
    }
    let mut all_labels = labels.to_vec();
    all_labels.extend(queue.labels());
    let n = all_labels.len();

    let candidates = match &queued {
        Some(q) => concat(&[embeddings, g.constant(q.mapv(T::cst).into_dyn())], 0),
        None => embeddings,
    };
    let self_bias = ArrayD::from_shape_fn(IxDyn(&[b, n]), |i| {
        if i[0] == i[1] {
            T::cst(EXCLUDED_LOGIT)
        } else {
            T::zero()
        }
    });
    let logits = embeddings
        .matmul(candidates.permute(&[1, 0]))
        .mul_scalar(1.0 / cfg.temperature);
    let log_prob = (logits + g.constant(self_bias)).log_softmax();

    let mut weights = ArrayD::<T>::zeros(IxDyn(&[b, n]));
    let mut valid = 0;
    for i in 0..b {
        let pos: Vec<usize> = (0..n)
            .filter(|&a| a != i && all_labels[a] == labels[i])
            .collect();
        if pos.is_empty() {
            continue;
        }
        valid += 1;
        let w = T::cst(1.0 / pos.len() as f64);
        for a in pos {
            weights[[i, a]] = w;
        }
    }

    queue.push(&z2, labels);
    if valid == 0 {
        log::warn!("supcon: no anchor in the batch has a positive; loss is zero");
        return Ok(SupConOutput {
            loss: embeddings.sum_all().mul_scalar(0.0),
            valid_anchors: 0,
            no_positives: true,
        });
    }
    let loss = (log_prob * g.constant(weights))
        .sum_all()
        .mul_scalar(-1.0 / valid as f64);
    Ok(SupConOutput {
        loss,
        valid_anchors: valid,
        no_positives: false,
    })
}

fn one_hot<T: Float>(labels: &[usize], classes: usize) -> Result<ArrayD<T>> {
    let mut m = ArrayD::zeros(IxDyn(&[labels.len(), classes]));
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        m[[i, y]] = T::one();
    }
    Ok(m)
}

fn check_logits<T: Float>(logits: &Var<'_, T>, labels: &[usize]) -> Result<usize> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!(
            "logits {shape:?} do not match {} labels",
            labels.len()
        )));
    }
    if logits.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericGuard("non-finite logits".into()));
    }
    Ok(shape[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Per-class weights; the loss becomes the weighted mean over the batch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            class_weights: None,
        }
    }
}

/// Mean of `-(1 - p_t)^gamma * log p_t`.
pub fn focal_loss<'g, T: Float>(
    logits: Var<'g, T>,
    labels: &[usize],
    cfg: &FocalConfig,
) -> Result<Var<'g, T>> {
    if !(cfg.gamma.is_finite() && cfg.gamma >= 0.0) {
        return Err(Error::Config(format!(
            "focal gamma must be nonnegative, got {}",
            cfg.gamma
        )));
    }
    let c = check_logits(&logits, labels)?;
    let g = logits.graph();
    let log_pt = (logits.log_softmax() * g.constant(one_hot(labels, c)?)).sum_axis(1, false);
    let per_item = if cfg.gamma == 0.0 {
        log_pt
    } else {
        let modulator = log_pt
            .exp()
            .mul_scalar(-1.0)
            .add_scalar(1.0)
            .powf(cfg.gamma);
        modulator * log_pt
    };
    match &cfg.class_weights {
        None => Ok(per_item.mean_all().mul_scalar(-1.0)),
        Some(w) => {
            if w.len() != c {
                return Err(Error::Config(format!(
                    "{} class weights for {c} classes",
                    w.len()
                )));
            }
            let wy: Vec<f64> = labels.iter().map(|&y| w[y]).collect();
            let total: f64 = wy.iter().sum();
            if total <= 0.0 {
                return Err(Error::Config(
                    "class weights of the batch sum to zero".into(),
                ));
            }
            let wv = ArrayD::from_shape_vec(
                IxDyn(&[labels.len()]),
                wy.into_iter().map(T::cst).collect(),
            )
            .unwrap();
            Ok((per_item * g.constant(wv))
                .sum_all()
                .mul_scalar(-1.0 / total))
        }
    }
}

/// Cross-entropy against `(1 - alpha) * onehot + alpha / C`.
pub fn smoothed_ce<'g, T: Float>(
    logits: Var<'g, T>,
    labels: &[usize],
    alpha: f64,
) -> Result<Var<'g, T>> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Config(format!(
            "label smoothing must lie in [0, 1), got {alpha}"
        )));
    }
    let c = check_logits(&logits, labels)?;
    let uniform = T::cst(alpha / c as f64);
    let target = one_hot::<T>(labels, c)?.mapv(|v| v * T::cst(1.0 - alpha) + uniform);
    let g = logits.graph();
    Ok((logits.log_softmax() * g.constant(target))
        .sum_all()
        .mul_scalar(-1.0 / labels.len() as f64))
}

pub fn cross_entropy<'g, T: Float>(logits: Var<'g, T>, labels: &[usize]) -> Result<Var<'g, T>> {
    smoothed_ce(logits, labels, 0.0)
}

fn check_row_norms<T: Float>(v: &ArrayD<T>, what: &str) -> Result<()> {
    let axis = ndarray::Axis(v.ndim().saturating_sub(1));
    for (i, row) in v.lanes(axis).into_iter().enumerate() {
        let norm = row
            .iter()
            .map(|&x| <T as Float>::to_f64(x).powi(2))
            .sum::<f64>()
            .sqrt();
        if !(norm > MIN_NORM) || !norm.is_finite() {
            return Err(Error::NumericGuard(format!(
                "{what} row {i} has norm {norm}"
            )));
        }
    }
    Ok(())
}

/// `s * <w_c / |w_c|, z_b / |z_b|>` for embeddings `[B, E]` and weights `[C, E]`.
pub fn cosine_logits<'g, T: Float>(
    embeddings: Var<'g, T>,
    weight: Var<'g, T>,
    scale: f64,
) -> Result<Var<'g, T>> {
    check_row_norms(&embeddings.value(), "embedding")?;
    check_row_norms(&weight.value(), "classifier weight")?;
    let z = embeddings.l2_normalize(MIN_NORM);
    let w = weight.l2_normalize(MIN_NORM);
    Ok(z.matmul(w.permute(&[1, 0])).mul_scalar(scale))
}

/// Cosine-normalized linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// `[C, E]`
    pub weight: Array2<f32>,
    pub scale: f64,
    pub label_smoothing: f64,
}

pub const DEFAULT_COSINE_SCALE: f64 = 16.0;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

impl ClassifierHead {
    pub fn new(num_classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((num_classes, dim), || {
            rng.random_range(-bound..bound) as f32
        });
        Self {
            weight,
            scale: DEFAULT_COSINE_SCALE,
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.nrows()
    }

    /// Logits `[B, C]` for embeddings `[B, E]`, outside any graph.
    pub fn logits(&self, embeddings: &Array2<f32>) -> Result<Array2<f32>> {
        if embeddings.ncols() != self.weight.ncols() {
            return Err(Error::Dimension {
                expected: self.weight.ncols(),
                found: embeddings.ncols(),
            });
        }
        let z = unit_rows(embeddings.mapv(f64::from), "embedding")?;
        let w = unit_rows(self.weight.mapv(f64::from), "classifier weight")?;
        Ok((z.dot(&w.t()) * self.scale).mapv(|v| v as f32))
    }

    pub fn predict(&self, embeddings: &Array2<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(embeddings)?))
    }
}

fn unit_rows(mut a: Array2<f64>, what: &str) -> Result<Array2<f64>> {
    for (i, mut row) in a.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > MIN_NORM) || !n.is_finite() {
            return Err(Error::NumericGuard(format!("{what} row {i} has norm {n}")));
        }
        row /= n;
    }
    Ok(a)
}

/// Index of the first maximum of each row.
pub fn argmax_rows(a: &Array2<f32>) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

/// Rows scaled to unit length.
pub fn l2_normalize_rows(a: &Array2<f32>) -> Array2<f32> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(MIN_NORM as f32);
        row /= n;
    }
    out
}
