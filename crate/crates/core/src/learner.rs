//! Softmax classifiers over flat parameter vectors, minibatch SGD and
//! accuracy evaluation.
//!
//! Parameter layout (biases folded in as the last column of each row):
//! - logistic: `C` rows of `d + 1` weights;
//! - mlp(h): `h` rows of `d + 1` (tanh hidden layer), then `C` rows of `h + 1`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::rng::{self, SimRng};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LearnError {
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("local epochs and batch size must be positive")]
    InvalidSchedule,
    #[error("non-finite gradient (training diverged)")]
    NonFinite,
    #[error("model expects {expected} features, dataset has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("architecture mismatch between models")]
    ArchitectureMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase", deny_unknown_fields)]
pub enum Arch {
    Logistic,
    Mlp { hidden: usize },
}

impl Arch {
    pub fn param_count(self, dim: usize, classes: usize) -> usize {
        match self {
            Arch::Logistic => (dim + 1) * classes,
            Arch::Mlp { hidden } => (dim + 1) * hidden + (hidden + 1) * classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub dim: usize,
    pub classes: usize,
    pub w: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Arch, dim: usize, classes: usize) -> Self {
        Self { arch, dim, classes, w: vec![0.0; arch.param_count(dim, classes)] }
    }

    /// Same architecture and dimensions.
    pub fn compatible(&self, other: &ModelParams) -> bool {
        self.arch == other.arch && self.dim == other.dim && self.classes == other.classes && self.w.len() == other.w.len()
    }

    pub fn with_weights(&self, w: Vec<f64>) -> Self {
        debug_assert_eq!(w.len(), self.w.len());
        Self { arch: self.arch, dim: self.dim, classes: self.classes, w }
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Uniform weights in `[-0.1, 0.1]`; the same seed gives the same model.
pub fn init_model(arch: Arch, dim: usize, classes: usize, seed: u64) -> ModelParams {
    let mut rng = rng::stream(seed, "model/init", &[]);
    let mut m = ModelParams::zeros(arch, dim, classes);
    for v in &mut m.w {
        *v = rng.random_range(-0.1..=0.1);
    }
    m
}

struct Scratch {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    delta_hidden: Vec<f64>,
}

impl Scratch {
    fn for_model(m: &ModelParams) -> Self {
        let h = match m.arch {
            Arch::Logistic => 0,
            Arch::Mlp { hidden } => hidden,
        };
        Self { hidden: vec![0.0; h], logits: vec![0.0; m.classes], delta_hidden: vec![0.0; h] }
    }
}

fn affine(w: &[f64], x: &[f64], out: &mut [f64]) {
    let stride = x.len() + 1;
    for (o, row) in out.iter_mut().zip(w.chunks_exact(stride)) {
        *o = row[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + row[x.len()];
    }
}

// In-place softmax; returns log of the normalizer relative to the max logit.
fn softmax(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    sum.ln()
}

fn forward(m: &ModelParams, x: &[f64], s: &mut Scratch) {
    match m.arch {
        Arch::Logistic => affine(&m.w, x, &mut s.logits),
        Arch::Mlp { hidden } => {
            let split = hidden * (m.dim + 1);
            affine(&m.w[..split], x, &mut s.hidden);
            for a in &mut s.hidden {
                *a = a.tanh();
            }
            affine(&m.w[split..], &s.hidden, &mut s.logits);
        }
    }
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of one sample; accumulates `scale * ∇` into `grad` when given.
fn sample_loss(m: &ModelParams, x: &[f64], y: usize, s: &mut Scratch, grad: Option<(&mut [f64], f64)>) -> f64 {
    forward(m, x, s);
    let zy = s.logits[y];
    let max = s.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_norm = softmax(&mut s.logits);
    let loss = log_norm - (zy - max);
    let Some((grad, scale)) = grad else { return loss };
    // s.logits now holds probabilities; turn it into dL/dlogits
    s.logits[y] -= 1.0;
    match m.arch {
        Arch::Logistic => {
            let stride = m.dim + 1;
            for (c, &dz) in s.logits.iter().enumerate() {
                let row = &mut grad[c * stride..(c + 1) * stride];
                for (g, xi) in row[..m.dim].iter_mut().zip(x) {
                    *g += scale * dz * xi;
                }
                row[m.dim] += scale * dz;
            }
        }
        Arch::Mlp { hidden } => {
            let split = hidden * (m.dim + 1);
            let stride2 = hidden + 1;
            s.delta_hidden.iter_mut().for_each(|v| *v = 0.0);
            for (c, &dz) in s.logits.iter().enumerate() {
                let w_row = &m.w[split + c * stride2..split + (c + 1) * stride2];
                let g_row = &mut grad[split + c * stride2..split + (c + 1) * stride2];
                for i in 0..hidden {
                    g_row[i] += scale * dz * s.hidden[i];
                    s.delta_hidden[i] += w_row[i] * dz;
                }
                g_row[hidden] += scale * dz;
            }
            let stride1 = m.dim + 1;
            for i in 0..hidden {
                let dpre = s.delta_hidden[i] * (1.0 - s.hidden[i] * s.hidden[i]);
                let row = &mut grad[i * stride1..(i + 1) * stride1];
                for (g, xi) in row[..m.dim].iter_mut().zip(x) {
                    *g += scale * dpre * xi;
                }
                row[m.dim] += scale * dpre;
            }
        }
    }
    loss
}

fn check_dims(m: &ModelParams, ds: &Dataset) -> Result<(), LearnError> {
    if m.dim != ds.dim() {
        return Err(LearnError::DimensionMismatch { expected: m.dim, found: ds.dim() });
    }
    Ok(())
}

/// Mean cross-entropy over `indices` and its gradient.
pub fn loss_and_gradient(m: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<(f64, Vec<f64>), LearnError> {
    if indices.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    check_dims(m, ds)?;
    let mut grad = vec![0.0; m.w.len()];
    let mut s = Scratch::for_model(m);
    let scale = 1.0 / indices.len() as f64;
    let mut loss = 0.0;
    for &i in indices {
        loss += sample_loss(m, ds.features(i), ds.label(i), &mut s, Some((&mut grad, scale)));
    }
    loss *= scale;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(LearnError::NonFinite);
    }
    Ok((loss, grad))
}

pub fn loss(m: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<f64, LearnError> {
    if indices.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    check_dims(m, ds)?;
    let mut s = Scratch::for_model(m);
    let total: f64 = indices.iter().map(|&i| sample_loss(m, ds.features(i), ds.label(i), &mut s, None)).sum();
    Ok(total / indices.len() as f64)
}

/// Mean gradient over all of `indices`.
pub fn full_gradient(m: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<Vec<f64>, LearnError> {
    loss_and_gradient(m, ds, indices).map(|(_, g)| g)
}

/// One SGD step `w - lr * ∇F(w; batch)`.
pub fn local_update(m: &ModelParams, ds: &Dataset, batch: &[usize], lr: f64) -> Result<ModelParams, LearnError> {
    check_lr(lr)?;
    let grad = full_gradient(m, ds, batch)?;
    let w: Vec<f64> = m.w.iter().zip(&grad).map(|(w, g)| w - lr * g).collect();
    if w.iter().any(|v| !v.is_finite()) {
        return Err(LearnError::NonFinite);
    }
    Ok(m.with_weights(w))
}

fn check_lr(lr: f64) -> Result<(), LearnError> {
    if lr > 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(LearnError::InvalidLearningRate(lr))
    }
}

/// Number of SGD steps `local_epochs` performs on `n` samples.
pub fn updates_per_round(n: usize, epochs: usize, batch: usize) -> usize {
    epochs * n.div_ceil(batch)
}

/// `epochs` shuffled passes over `indices` in minibatches of `batch`
/// (last partial batch included).
pub fn local_epochs(
    m: &ModelParams,
    ds: &Dataset,
    indices: &[usize],
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut SimRng,
) -> Result<ModelParams, LearnError> {
    local_epochs_counted(m, ds, indices, epochs, batch, lr, rng).map(|(m, _)| m)
}

pub(crate) fn local_epochs_counted(
    m: &ModelParams,
    ds: &Dataset,
    indices: &[usize],
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut SimRng,
) -> Result<(ModelParams, usize), LearnError> {
    if epochs == 0 || batch == 0 {
        return Err(LearnError::InvalidSchedule);
    }
    check_lr(lr)?;
    if indices.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    let mut order = indices.to_vec();
    let mut model = m.clone();
    let mut steps = 0;
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            model = local_update(&model, ds, chunk, lr)?;
            steps += 1;
        }
    }
    Ok((model, steps))
}

pub fn evaluate(m: &ModelParams, test: &Dataset) -> Result<LossReport, LearnError> {
    if test.is_empty() {
        return Err(LearnError::EmptyBatch);
    }
    check_dims(m, test)?;
    let mut s = Scratch::for_model(m);
    let mut correct = 0;
    let mut total_loss = 0.0;
    for i in 0..test.len() {
        let y = test.label(i);
        forward(m, test.features(i), &mut s);
        if argmax(&s.logits) == y {
            correct += 1;
        }
        let zy = s.logits[y];
        let max = s.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total_loss += softmax(&mut s.logits) - (zy - max);
    }
    Ok(LossReport {
        loss: total_loss / test.len() as f64,
        accuracy: correct as f64 / test.len() as f64,
        correct,
        total: test.len(),
    })
}
