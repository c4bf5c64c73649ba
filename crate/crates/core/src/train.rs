//! AdamW training with polynomial learning-rate decay, and evaluation.
//!
//! One optimizer step averages the gradients of a mini-batch accumulated in
//! a fixed sample order, clips their global norm, then applies decoupled
//! weight decay followed by the Adam update. Gains and biases are not decayed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Example};
use crate::error::{AmaaError, Result};
use crate::metrics::{ConfusionCounts, MetricsReport};
use crate::model::Model;
use crate::objective::{record_loss_total, ClassProbVolume, LossBreakdown, LossConfig};
use crate::param::ParamStore;
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
    /// Random horizontal flips, applied only when the camera setup is mirror symmetric.
    pub augment_flip: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 15,
            batch_size: 2,
            poly_power: 0.9,
            clip_norm: 5.0,
            augment_flip: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings used for the desk-scale experiments: the same recipe with a
    /// learning rate large enough to move in a few hundred steps.
    pub fn desk() -> Self {
        Self {
            lr: 3e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AmaaError::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be > 0");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0");
        }
        Ok(())
    }
}

/// `lr0 · (1 - t/T)^power`
pub fn poly_lr(lr0: f64, step: usize, total: usize, power: f64) -> f64 {
    lr0 * (1.0 - step as f64 / total as f64).max(0.0).powf(power)
}

#[derive(Debug, Clone, Default)]
pub struct AdamW {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update with the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut ParamStore, tc: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t);
        let bc2 = 1.0 - tc.beta2.powi(self.t);
        for (name, p) in params.iter_mut() {
            let n = p.value.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if p.kind.decays() { lr * tc.weight_decay } else { 0.0 };
            let g = p.grad.data();
            let theta = p.value.data_mut();
            for i in 0..n {
                theta[i] *= 1.0 - decay;
                m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
                v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                theta[i] -= lr * mh / (vh.sqrt() + tc.eps);
            }
        }
    }
}

pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

fn scale_grads(params: &mut ParamStore, f: f64) {
    for (_, p) in params.iter_mut() {
        for g in p.grad.data_mut() {
            *g *= f;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
    /// Mean loss terms over the epoch's training samples.
    pub train: LossBreakdown,
    pub val: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
}

fn check_finite(b: &LossBreakdown) -> Result<()> {
    for (term, v) in [
        ("ce", b.ce),
        ("affinity", b.affinity),
        ("consistency", b.consistency),
        ("total", b.total),
    ] {
        if !v.is_finite() {
            return Err(AmaaError::NonFinite { term: term.into() });
        }
    }
    Ok(())
}

/// Forward, loss and backward for one example; gradients are added to `params`.
pub fn accumulate_example(model: &Model, params: &mut ParamStore, ex: &Example, flip: bool, loss: &LossConfig) -> Result<LossBreakdown> {
    let (rgb, labels) = if flip {
        (ex.rgb.flip_horizontal(), ex.labels.flip_width())
    } else {
        (ex.rgb.clone(), ex.labels.clone())
    };
    let mut tape = Tape::new();
    let f = model.record_forward(&mut tape, params, &rgb)?;
    let lv = record_loss_total(&mut tape, f.probs, &labels, loss)?;
    let b = lv.breakdown(&tape);
    check_finite(&b)?;
    let grads = tape.backward(lv.total)?;
    tape.accumulate_grads(&grads, params)?;
    Ok(b)
}

/// Trains from `init`; deterministic given the configs and dataset.
pub fn train(model: &Model, init: ParamStore, data: &Dataset, tc: &TrainConfig) -> Result<TrainResult> {
    tc.validate()?;
    if data.train.is_empty() {
        return Err(AmaaError::Config("training split is empty".into()));
    }
    let loss = model.cfg.loss.resolve(model.cfg.classes, &data.train_histogram(model.cfg.classes))?;
    let mut params = init;
    let mut opt = AdamW::new();
    let mut rng = SplitMix64::for_stream(tc.seed, "train");
    let flip_ok = tc.augment_flip && model.grid.is_mirror_symmetric();
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size);
    let total = steps_per_epoch * tc.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        rng.shuffle(&mut order);
        let mut sum = LossBreakdown::default();
        let mut epoch_lr = None;
        for batch in order.chunks(tc.batch_size) {
            params.zero_grad();
            for &i in batch {
                let flip = flip_ok && rng.next_bool();
                let b = accumulate_example(model, &mut params, &data.train[i], flip, &loss)?;
                sum.ce += b.ce;
                sum.affinity += b.affinity;
                sum.consistency += b.consistency;
                sum.total += b.total;
            }
            scale_grads(&mut params, 1.0 / batch.len() as f64);
            if tc.clip_norm > 0.0 {
                let norm = grad_norm(&params);
                if !norm.is_finite() {
                    return Err(AmaaError::NonFinite { term: "gradient".into() });
                }
                if norm > tc.clip_norm {
                    scale_grads(&mut params, tc.clip_norm / norm);
                }
            }
            let lr = poly_lr(tc.lr, opt.steps() as usize, total, tc.poly_power);
            epoch_lr.get_or_insert(lr);
            opt.step(&mut params, tc, lr);
        }
        let k = n as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            lr: epoch_lr.unwrap_or(0.0),
            train: LossBreakdown {
                ce: sum.ce / k,
                affinity: sum.affinity / k,
                consistency: sum.consistency / k,
                total: sum.total / k,
            },
            val: evaluate(model, &params, &data.val)?,
        });
    }
    Ok(TrainResult { params, log })
}

/// Global counts over `split`; samples run in parallel, counts merge in order.
pub fn evaluate(model: &Model, params: &ParamStore, split: &[Example]) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(AmaaError::Config("evaluation split is empty".into()));
    }
    let per: Vec<ConfusionCounts> = split
        .par_iter()
        .map(|ex| {
            let pred = model.predict(params, &ex.rgb)?;
            let mut c = ConfusionCounts::new(model.cfg.classes);
            c.accumulate(&pred, &ex.labels)?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut total = ConfusionCounts::new(model.cfg.classes);
    for c in &per {
        total.merge(c);
    }
    Ok(total.report())
}

/// Per-sample predictions as probability volumes (used by tooling and tests).
pub fn predict_split(model: &Model, params: &ParamStore, split: &[Example]) -> Result<Vec<ClassProbVolume>> {
    split.par_iter().map(|ex| model.forward(params, &ex.rgb)).collect()
}

/// Replaces every parameter gradient with `f(name, value)`; used by optimizer tests.
pub fn set_grads(params: &mut ParamStore, f: impl Fn(&str, &Tensor) -> Tensor) {
    for (name, p) in params.iter_mut() {
        p.grad = f(name, &p.value);
    }
}
