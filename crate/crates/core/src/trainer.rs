//! Surrogate relation classifier and the local SGD procedure.
//!
//! The model is a linear softmax head over the concatenated one-hot subject
//! and object super-classes, predicting the predicate super-class. Parameters
//! are stored flat: the `[num_classes x feature_dim]` weight matrix in row-major
//! order followed by the `num_classes` biases.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::semantics::Triplet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{axis} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        axis: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("empty batch or dataset")]
    Empty,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite parameters")]
    NonFiniteParams,
    #[error("invalid training config: {0}")]
    Config(String),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl ModelLayout {
    /// Layout for relation data with super-class dims `[subjects, objects, predicates]`.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        Self {
            num_classes: dims[2],
            feature_dim: dims[0] + dims[1],
        }
    }

    pub fn param_count(&self) -> usize {
        self.num_classes * (self.feature_dim + 1)
    }
}

/// Flat parameter vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: ModelLayout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: ModelLayout) -> Self {
        Self {
            layout,
            values: vec![0.0; layout.param_count()],
        }
    }

    pub fn from_vec(layout: ModelLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(TrainError::DimensionMismatch {
                expected: layout.param_count(),
                found: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteParams);
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> ModelLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn split(&self) -> (&[f64], &[f64]) {
        self.values
            .split_at(self.layout.num_classes * self.layout.feature_dim)
    }

    pub fn logits(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let d = self.layout.feature_dim;
        if feature.len() != d {
            return Err(TrainError::DimensionMismatch {
                expected: d,
                found: feature.len(),
            });
        }
        let (w, b) = self.split();
        Ok(w.chunks_exact(d)
            .zip(b)
            .map(|(row, bias)| bias + row.iter().zip(feature).map(|(a, x)| a * x).sum::<f64>())
            .collect())
    }

    pub fn predict_proba(&self, feature: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(feature)?))
    }

    /// Most probable class, lowest index on ties.
    pub fn predict(&self, feature: &[f64]) -> Result<usize> {
        let logits = self.logits(feature)?;
        Ok(argmax(&logits))
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Local optimizer settings. The default is the PSG benchmark recipe:
/// one epoch, batch 16, lr 0.02, momentum 0.9, weight decay 1e-4 and
/// gradient clipping at L2 norm 35.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// Add weight decay before clipping instead of after.
    pub decay_before_clip: bool,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip_norm: 35.0,
            decay_before_clip: false,
        }
    }
}

impl LocalTrainConfig {
    /// Returns the name of the first invalid field with the reason.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.batch_size == 0 {
            return Err(("batch_size", "must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(("learning_rate", "must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(("momentum", "must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(("weight_decay", "must be >= 0".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(("grad_clip_norm", "must be positive".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, reason)| TrainError::Config(format!("{field}: {reason}")))
    }
}

/// One training example: one-hot subject ⊕ one-hot object, predicate label.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationExample {
    pub feature: Vec<f64>,
    pub label: usize,
}

pub fn featurize(relation: Triplet, dims: [usize; 3]) -> Result<RelationExample> {
    let checks = [
        ("subject", relation.subject, dims[0]),
        ("object", relation.object, dims[1]),
        ("predicate", relation.predicate, dims[2]),
    ];
    if let Some(&(axis, index, bound)) = checks.iter().find(|(_, i, b)| i >= b) {
        return Err(TrainError::IndexOutOfRange { axis, index, bound });
    }
    let mut feature = vec![0.0; dims[0] + dims[1]];
    feature[relation.subject] = 1.0;
    feature[dims[0] + relation.object] = 1.0;
    Ok(RelationExample {
        feature,
        label: relation.predicate,
    })
}

fn loss_and_grad_iter<'a>(
    params: &ModelParams,
    batch: impl ExactSizeIterator<Item = &'a RelationExample>,
) -> Result<(f64, Vec<f64>)> {
    let count = batch.len();
    if count == 0 {
        return Err(TrainError::Empty);
    }
    let ModelLayout {
        num_classes: c,
        feature_dim: d,
    } = params.layout;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for ex in batch {
        if ex.label >= c {
            return Err(TrainError::LabelOutOfRange {
                label: ex.label,
                num_classes: c,
            });
        }
        let logits = params.logits(&ex.feature)?;
        loss += log_sum_exp(&logits) - logits[ex.label];
        let mut residual = softmax(&logits);
        residual[ex.label] -= 1.0;
        let (gw, gb) = grad.split_at_mut(c * d);
        for ((row, r), bias) in gw.chunks_exact_mut(d).zip(&residual).zip(gb) {
            *bias += r;
            for (g, x) in row.iter_mut().zip(&ex.feature) {
                *g += r * x;
            }
        }
    }
    let scale = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Mean softmax cross-entropy over `batch` and its analytic gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &[RelationExample]) -> Result<(f64, Vec<f64>)> {
    loss_and_grad_iter(params, batch.iter())
}

fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn clip(g: &mut [f64], max_norm: f64) {
    let norm = l2_norm(g);
    if norm > max_norm {
        let scale = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= scale);
    }
}

/// One SGD step with gradient clipping, weight decay and heavy-ball momentum:
/// `v <- momentum * v + g`, `w <- w - lr * v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grad: &[f64],
    velocity: &mut [f64],
    cfg: &LocalTrainConfig,
) -> Result<()> {
    if grad.len() != params.len() || velocity.len() != params.len() {
        return Err(TrainError::DimensionMismatch {
            expected: params.len(),
            found: if grad.len() != params.len() {
                grad.len()
            } else {
                velocity.len()
            },
        });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    let mut g = grad.to_vec();
    let decay = |g: &mut [f64]| {
        for (gi, w) in g.iter_mut().zip(&params.values) {
            *gi += cfg.weight_decay * w;
        }
    };
    if cfg.decay_before_clip {
        decay(&mut g);
        clip(&mut g, cfg.grad_clip_norm);
    } else {
        clip(&mut g, cfg.grad_clip_norm);
        decay(&mut g);
    }
    for ((w, v), gi) in params.values.iter_mut().zip(velocity.iter_mut()).zip(&g) {
        *v = cfg.momentum * *v + gi;
        *w -= cfg.learning_rate * *v;
    }
    if params.values.iter().any(|w| !w.is_finite()) {
        return Err(TrainError::NonFiniteParams);
    }
    Ok(())
}

/// Runs `cfg.epochs` passes of mini-batch SGD over `data`, reshuffled every
/// epoch from `seed`, starting from `params` with zero velocity.
pub fn local_train(
    params: &ModelParams,
    data: &[RelationExample],
    cfg: &LocalTrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(TrainError::Empty);
    }
    cfg.validate()?;
    let mut out = params.clone();
    let mut velocity = vec![0.0; out.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = seed::rng(seed, &[]);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = loss_and_grad_iter(&out, batch.iter().map(|&i| &data[i]))?;
            sgd_step(&mut out, &grad, &mut velocity, cfg)?;
        }
    }
    Ok(out)
}
