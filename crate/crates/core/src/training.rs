//! Minibatch SGD with momentum, weight decay and a linearly decaying
//! learning rate.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{LabelSet, LabeledDataset};
use crate::error::{invalid, Error, Result};
use crate::models::{Model, ParamSet};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    CrossEntropy,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch")]
    pub batch: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::loss")]
    pub loss: Loss,
    #[serde(default)]
    pub seed: u64,
    /// Smoothed-loss thresholds tracked in the report.
    #[serde(default = "defaults::thresholds")]
    pub thresholds: Vec<f64>,
    /// Evaluate train/test accuracy after every epoch instead of only the last.
    #[serde(default)]
    pub eval_every_epoch: bool,
}

mod defaults {
    use super::Loss;
    pub fn epochs() -> usize {
        20
    }
    pub fn batch() -> usize {
        128
    }
    pub fn lr() -> f64 {
        0.5
    }
    pub fn loss() -> Loss {
        Loss::CrossEntropy
    }
    pub fn thresholds() -> Vec<f64> {
        vec![super::DEFAULT_THRESHOLD]
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.01;
pub const SMOOTHING_WINDOW: usize = 50;

impl Default for TrainConfig {
    /// Synthetic-data protocol: 20 epochs, batch 128, peak lr 0.5, plain SGD.
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch: defaults::batch(),
            lr: defaults::lr(),
            momentum: 0.0,
            weight_decay: 0.0,
            loss: Loss::CrossEntropy,
            seed: 0,
            thresholds: defaults::thresholds(),
            eval_every_epoch: false,
        }
    }
}

impl TrainConfig {
    /// Image-classification protocol: momentum 0.9, weight decay 5e-4, peak lr 0.21.
    pub fn image_default() -> Self {
        Self {
            epochs: 50,
            lr: 0.21,
            momentum: 0.9,
            weight_decay: 5e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(invalid("epochs and batch size must be >= 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(invalid("momentum must be in [0, 1) and weight decay >= 0"));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0)) {
            return Err(invalid("loss thresholds must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdHit {
    pub tau: f64,
    pub iteration: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: Vec<f64>,
    pub epochs: Vec<EpochStats>,
    pub thresholds: Vec<ThresholdHit>,
    pub final_params_hash: String,
    /// Not serialized, so reports stay byte-stable across runs.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn final_train_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_accuracy)
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_accuracy)
    }

    /// `iteration,loss` lines with a header.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("iteration,loss\n");
        for (i, l) in self.loss.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Setup(#[from] Error),
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize, report: Box<TrainReport> },
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Setup(e) => e,
            TrainError::Diverged { iteration, .. } => Error::Diverged { iteration },
        }
    }
}

/// Per-sample loss and its derivative with respect to the network outputs.
fn loss_and_seed(loss: Loss, labels: LabelSet, out: &[f64], y: i32) -> (f64, Vec<f64>) {
    match (loss, labels) {
        (Loss::CrossEntropy, LabelSet::Binary) => {
            let m = y as f64 * out[0];
            // log(1 + e^{−m}) and its derivative, stable for both signs
            let l = if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
            let s = 1.0 / (1.0 + m.exp());
            (l, vec![-(y as f64) * s])
        }
        (Loss::CrossEntropy, LabelSet::Multiclass { .. }) => {
            let mx = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = out.iter().map(|o| (o - mx).exp()).sum();
            let lse = mx + z.ln();
            let g = out
                .iter()
                .enumerate()
                .map(|(k, o)| (o - lse).exp() - if k as i32 == y { 1.0 } else { 0.0 })
                .collect();
            (lse - out[y as usize], g)
        }
        (Loss::Quadratic, _) => {
            let r = y as f64 - out[0];
            (r * r, vec![-2.0 * r])
        }
    }
}

fn check_setup(model: &Model, ds: &LabeledDataset, loss: Loss) -> Result<()> {
    if ds.is_empty() {
        return Err(invalid("dataset is empty"));
    }
    if ds.dim() != model.net().input_len() {
        return Err(Error::Shape {
            context: format!("dataset samples vs {} input", model.spec().name()),
            expected: model.spec().input_shape.clone(),
            actual: ds.sample_shape.clone(),
        });
    }
    let want = match ds.labels {
        LabelSet::Binary => 1,
        LabelSet::Multiclass { classes } => classes,
    };
    if model.net().output_len() != want {
        return Err(invalid(format!(
            "model has {} outputs but the labels need {want}",
            model.net().output_len()
        )));
    }
    if loss == Loss::Quadratic && ds.labels != LabelSet::Binary {
        return Err(invalid("quadratic loss is only defined for binary ±1 labels"));
    }
    Ok(())
}

const SUB_BATCH: usize = 8;

/// Mean loss and summed gradient over `idx`, combined in a fixed order.
fn batch_gradient(model: &Model, params: &[f64], ds: &LabeledDataset, idx: &[usize], loss: Loss) -> (f64, Vec<f64>) {
    let net = model.net();
    let n = net.n_params();
    let parts: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(SUB_BATCH)
        .map(|chunk| {
            let mut g = vec![0.0; n];
            let mut l = 0.0;
            for &i in chunk {
                let acts = net.forward_cached(params, ds.sample(i));
                let (li, seed) = loss_and_seed(loss, ds.labels, acts.last().expect("output"), ds.y[i]);
                l += li;
                net.backward(params, &acts, &seed, Some(&mut g), false);
            }
            (l, g)
        })
        .collect();
    let mut total = vec![0.0; n];
    let mut l = 0.0;
    for (pl, pg) in parts {
        l += pl;
        for (t, v) in total.iter_mut().zip(pg) {
            *t += v;
        }
    }
    let inv = 1.0 / idx.len() as f64;
    total.iter_mut().for_each(|v| *v *= inv);
    (l * inv, total)
}

/// Trains `params0` on `train`; `test` (if given) is evaluated with the
/// train set at the end of the run or after every epoch.
pub fn sgd_train(
    model: &Model,
    params0: &ParamSet,
    train: &LabeledDataset,
    test: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> std::result::Result<(ParamSet, TrainReport), TrainError> {
    cfg.validate()?;
    check_setup(model, train, cfg.loss)?;
    if let Some(t) = test {
        check_setup(model, t, cfg.loss)?;
    }
    model.net().check(params0.values().len(), train.dim())?;
    let start = Instant::now();
    let mut params = params0.clone();
    let mut velocity = vec![0.0; params.values().len()];
    let steps_per_epoch = train.len().div_ceil(cfg.batch);
    let total = (cfg.epochs * steps_per_epoch) as f64;
    let mut rng = Rng::new(cfg.seed, 0x5ed);
    let mut report = TrainReport {
        loss: Vec::with_capacity(cfg.epochs * steps_per_epoch),
        epochs: Vec::new(),
        thresholds: Vec::new(),
        final_params_hash: String::new(),
        wall_time_s: 0.0,
    };
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(train.len());
        for idx in order.chunks(cfg.batch) {
            let (l, g) = batch_gradient(model, params.values(), train, idx, cfg.loss);
            report.loss.push(l);
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                report.thresholds = threshold_hits(&report, &cfg.thresholds);
                report.final_params_hash = params.hash();
                report.wall_time_s = start.elapsed().as_secs_f64();
                return Err(TrainError::Diverged {
                    iteration: step,
                    report: Box::new(report),
                });
            }
            let lr = cfg.lr * (1.0 - step as f64 / total);
            for ((p, v), gi) in params.values_mut().iter_mut().zip(velocity.iter_mut()).zip(&g) {
                *v = cfg.momentum * *v + gi + cfg.weight_decay * *p;
                *p -= lr * *v;
            }
            step += 1;
        }
        if cfg.eval_every_epoch || epoch + 1 == cfg.epochs {
            report.epochs.push(EpochStats {
                epoch,
                train_accuracy: evaluate(model, &params, train)?,
                test_accuracy: test.map(|t| evaluate(model, &params, t)).transpose()?,
            });
        }
    }
    report.thresholds = threshold_hits(&report, &cfg.thresholds);
    report.final_params_hash = params.hash();
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((params, report))
}

fn threshold_hits(report: &TrainReport, taus: &[f64]) -> Vec<ThresholdHit> {
    taus.iter()
        .map(|&tau| ThresholdHit {
            tau,
            iteration: iterations_to_threshold(report, tau).ok().flatten(),
        })
        .collect()
}

/// Fraction of correctly classified samples: sign of the scalar output for
/// binary labels (0 counts as −1), argmax for multiclass.
pub fn evaluate(model: &Model, params: &ParamSet, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    model.net().check(params.values().len(), ds.dim())?;
    let net = model.net();
    let p = params.values();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let correct: usize = idx
        .par_chunks(64)
        .map(|chunk| {
            chunk
                .iter()
                .filter(|&&i| {
                    let out = net.forward(p, ds.sample(i));
                    predict(ds.labels, &out) == ds.y[i]
                })
                .count()
        })
        .sum();
    Ok(correct as f64 / ds.len() as f64)
}

pub fn predict(labels: LabelSet, out: &[f64]) -> i32 {
    match labels {
        LabelSet::Binary => {
            if out[0] > 0.0 {
                1
            } else {
                -1
            }
        }
        LabelSet::Multiclass { .. } => {
            let mut best = 0;
            for (k, &o) in out.iter().enumerate() {
                if o > out[best] {
                    best = k;
                }
            }
            best as i32
        }
    }
}

/// Trailing moving average over up to `window` iterations.
pub fn smoothed_loss(loss: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(loss.len());
    let mut acc = 0.0;
    for i in 0..loss.len() {
        acc += loss[i];
        if i >= window {
            acc -= loss[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// First iteration whose smoothed loss (window 50) is `≤ τ`, or `None`.
pub fn iterations_to_threshold(report: &TrainReport, tau: f64) -> Result<Option<usize>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("threshold must be > 0, got {tau}")));
    }
    Ok(smoothed_loss(&report.loss, SMOOTHING_WINDOW).iter().position(|&l| l <= tau))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_ce_derivative() {
        for &f in &[-30.0, -1.2, 0.0, 0.7, 40.0] {
            for y in [-1, 1] {
                let (l, g) = loss_and_seed(Loss::CrossEntropy, LabelSet::Binary, &[f], y);
                let h = 1e-6;
                let lp = loss_and_seed(Loss::CrossEntropy, LabelSet::Binary, &[f + h], y).0;
                let lm = loss_and_seed(Loss::CrossEntropy, LabelSet::Binary, &[f - h], y).0;
                assert!(l.is_finite());
                assert!((g[0] - (lp - lm) / (2.0 * h)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_ce_gradient_sums_to_zero() {
        let (l, g) = loss_and_seed(Loss::CrossEntropy, LabelSet::Multiclass { classes: 3 }, &[1.0, 2.0, -0.5], 2);
        assert!(l > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        assert!(g[2] < 0.0);
    }

    #[test]
    fn smoothing_window() {
        let s = smoothed_loss(&[4.0, 2.0, 0.0, 0.0], 2);
        assert_eq!(s, vec![4.0, 3.0, 1.0, 0.0]);
    }
}
