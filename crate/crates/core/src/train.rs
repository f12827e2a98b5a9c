//! Minibatch SGD with momentum and weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{Gradients, LearnerParams};
use crate::rng::RngStream;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fractions of `epochs` after which the learning rate is multiplied by `lr_factor`.
    pub lr_drops: Vec<f64>,
    pub lr_factor: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self::recipe()
    }
}

impl SgdConfig {
    /// lr 0.1, momentum 0.9, weight decay 5e-4, 200 epochs, ×0.2 at 30/60/90%.
    pub fn recipe() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 128,
            lr_drops: vec![0.3, 0.6, 0.9],
            lr_factor: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr_drops.iter().any(|d| !(*d > 0.0 && *d < 1.0)) {
            return Err(Error::Config(format!(
                "lr_drops must lie in (0, 1), got {:?}",
                self.lr_drops
            )));
        }
        if !(self.lr_factor > 0.0) {
            return Err(Error::Config("lr_factor must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .lr_drops
            .iter()
            .filter(|&&d| epoch as f64 >= d * self.epochs as f64)
            .count();
        self.lr * self.lr_factor.powi(drops as i32)
    }
}

/// A loss over a subset of training rows, given the logits of those rows.
pub trait Objective {
    /// Mean loss over `rows` and its gradient with respect to `logits`.
    fn evaluate(&self, rows: &[usize], logits: &Mat) -> Result<(f64, Mat)>;
}

/// Inputs of one learner over the full training set.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub x: &'a Mat,
    /// Tapped activation rows aligned with `x`, when the learner has a connection.
    pub tap: Option<&'a Mat>,
}

impl<'a> TrainData<'a> {
    pub fn new(x: &'a Mat, tap: Option<&'a Mat>) -> Self {
        Self { x, tap }
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }
}

/// Momentum buffers carried across epochs.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Gradients,
}

impl SgdState {
    pub fn new(params: &LearnerParams) -> Self {
        Self {
            velocity: Gradients::zeros_like(params),
        }
    }
}

/// One gradient step on a batch. Returns the batch loss.
pub fn sgd_step(
    params: &mut LearnerParams,
    data: TrainData<'_>,
    rows: &[usize],
    objective: &dyn Objective,
    lr: f64,
    cfg: &SgdConfig,
    state: &mut SgdState,
) -> Result<f64> {
    let x = data.x.select_rows(rows);
    let tap = data.tap.map(|t| t.select_rows(rows));
    let trace = params.forward_with_tap(&x, tap.as_ref())?;
    let (loss, d_logits) = objective.evaluate(rows, trace.logits())?;
    let grads = params.backprop(&trace, &d_logits)?;
    apply(params, &grads, lr, cfg, state);
    Ok(loss)
}

fn apply(params: &mut LearnerParams, grads: &Gradients, lr: f64, cfg: &SgdConfig, state: &mut SgdState) {
    let (mu, wd) = (cfg.momentum, cfg.weight_decay);
    let v = &mut state.velocity;
    for k in 0..params.weights.len() {
        let w = params.weights[k].as_mut_slice();
        let vw = v.weights[k].as_mut_slice();
        for ((p, vel), g) in w.iter_mut().zip(vw.iter_mut()).zip(grads.weights[k].as_slice()) {
            *vel = mu * *vel + g + wd * *p;
            *p -= lr * *vel;
        }
        for ((p, vel), g) in params.biases[k]
            .iter_mut()
            .zip(v.biases[k].iter_mut())
            .zip(&grads.biases[k])
        {
            *vel = mu * *vel + g + wd * *p;
            *p -= lr * *vel;
        }
    }
}

/// One shuffled pass over the data. Returns the mean batch loss.
pub fn sgd_epoch(
    params: &mut LearnerParams,
    data: TrainData<'_>,
    objective: &dyn Objective,
    cfg: &SgdConfig,
    epoch: usize,
    state: &mut SgdState,
    rng: &mut RngStream,
) -> Result<f64> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::Data("no training rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let lr = cfg.lr_at(epoch);
    let mut total = 0.0;
    let mut batches = 0;
    for rows in order.chunks(cfg.batch_size) {
        total += sgd_step(params, data, rows, objective, lr, cfg, state)?;
        batches += 1;
    }
    Ok(total / batches as f64)
}

/// Run `cfg.epochs` epochs; epoch `e` shuffles with `rng.split(e)`.
/// Returns the per-epoch mean batch loss.
pub fn fit(
    params: &mut LearnerParams,
    data: TrainData<'_>,
    objective: &dyn Objective,
    cfg: &SgdConfig,
    rng: &RngStream,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut state = SgdState::new(params);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = rng.split(epoch as u64);
        losses.push(sgd_epoch(
            params,
            data,
            objective,
            cfg,
            epoch,
            &mut state,
            &mut epoch_rng,
        )?);
    }
    if params.validate().is_err() {
        return Err(Error::NonFinite {
            what: "parameters after training (lower the learning rate)".into(),
        });
    }
    Ok(losses)
}

/// Loss of `objective` over all rows, evaluated in one batch.
pub fn full_loss(params: &LearnerParams, data: TrainData<'_>, objective: &dyn Objective) -> Result<(f64, Mat)> {
    let rows: Vec<usize> = (0..data.rows()).collect();
    let logits = params.forward_with_tap(data.x, data.tap)?.into_logits();
    let (loss, _) = objective.evaluate(&rows, &logits)?;
    Ok((loss, logits))
}

/// Numerically stable softmax of each row of `logits / temperature`.
pub fn softmax_rows(logits: &Mat, temperature: f64) -> Mat {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v / temperature - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Row-wise `log softmax(logits / temperature)`.
pub fn log_softmax_rows(logits: &Mat, temperature: f64) -> Mat {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
        let lse = m + row.iter().map(|&v| (v / temperature - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v = *v / temperature - lse;
        }
    }
    out
}

/// Cross-entropy against hard class labels.
#[derive(Debug, Clone, Copy)]
pub struct HardLabelCe<'a> {
    pub labels: &'a [usize],
}

impl Objective for HardLabelCe<'_> {
    fn evaluate(&self, rows: &[usize], logits: &Mat) -> Result<(f64, Mat)> {
        if rows.len() != logits.rows() {
            return Err(Error::Shape {
                op: "hard-label loss",
                left: (rows.len(), 1),
                right: logits.shape(),
            });
        }
        let b = rows.len() as f64;
        let logp = log_softmax_rows(logits, 1.0);
        let mut grad = softmax_rows(logits, 1.0);
        let mut loss = 0.0;
        for (r, &i) in rows.iter().enumerate() {
            let y = self.labels[i];
            loss -= logp.get(r, y);
            grad.set(r, y, grad.get(r, y) - 1.0);
        }
        Ok((loss / b, grad.scale(1.0 / b)))
    }
}
