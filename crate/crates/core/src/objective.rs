//! Training objective and label prediction.
//!
//! `total = ce + affinity + lambda_c * consistency`, where
//!
//! * `ce` is class-weighted cross-entropy averaged over valid voxels,
//! * `affinity` is a scene-wise soft precision / recall / specificity loss
//!   over the classes present in the ground truth (switchable off),
//! * `consistency` is the mean absolute deviation of the occupancy
//!   probability `1 - p_empty` from its clipped-window mean.
//!
//! Every logarithm is taken of `max(x, 1e-12)`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AmaaError, Result};
use crate::ops;
use crate::tape::{softmax_channels, CustomOp, Tape, Var};
use crate::tensor::{Tensor, VoxelVolume};

pub const LOG_EPS: f64 = 1e-12;

#[inline]
fn safe_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

#[inline]
fn d_safe_ln(x: f64) -> f64 {
    if x > LOG_EPS {
        1.0 / x
    } else {
        0.0
    }
}

/// Integer class per voxel, `(D, H, W)`, with an optional validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<usize>,
    mask: Option<Vec<bool>>,
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], data: Vec<usize>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return shape_err(format!("label dims {dims:?} vs {} entries", data.len()));
        }
        Ok(Self {
            dims,
            data,
            mask: None,
        })
    }

    pub fn filled(dims: [usize; 3], class: usize) -> Self {
        Self {
            dims,
            data: vec![class; dims.iter().product()],
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return shape_err("mask length differs from label count");
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> usize {
        self.data[self.index(d, h, w)]
    }

    pub fn set(&mut self, d: usize, h: usize, w: usize, class: usize) {
        let i = self.index(d, h, w);
        self.data[i] = class;
    }

    #[inline]
    pub fn is_valid(&self, i: usize) -> bool {
        self.mask.as_ref().map_or(true, |m| m[i])
    }

    pub fn max_class(&self) -> usize {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        if let Some(bad) = self.data.iter().find(|&&c| c >= classes) {
            return Err(AmaaError::Config(format!("label {bad} outside [0, {classes})")));
        }
        Ok(())
    }

    /// Mirror along the width axis.
    pub fn flip_width(&self) -> LabelVolume {
        let [d, h, w] = self.dims;
        let mut out = self.clone();
        for a in 0..d {
            for b in 0..h {
                for c in 0..w {
                    let src = self.index(a, b, w - 1 - c);
                    let dst = self.index(a, b, c);
                    out.data[dst] = self.data[src];
                    if let (Some(m), Some(sm)) = (out.mask.as_mut(), self.mask.as_ref()) {
                        m[dst] = sm[src];
                    }
                }
            }
        }
        out
    }

    /// Voxel count per class over valid voxels.
    pub fn histogram(&self, classes: usize) -> Vec<u64> {
        let mut h = vec![0u64; classes];
        for (i, &c) in self.data.iter().enumerate() {
            if self.is_valid(i) && c < classes {
                h[c] += 1;
            }
        }
        h
    }
}

/// Per-voxel class distribution `(C, D, H, W)`; class 0 is empty space.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbVolume(VoxelVolume);

impl ClassProbVolume {
    /// Validates non-negativity and unit per-voxel sums (within 1e-9).
    pub fn new(v: VoxelVolume) -> Result<Self> {
        let [c, ..] = v.dims();
        let n = v.voxels();
        if c == 0 {
            return shape_err("probability volume needs at least one class");
        }
        for i in 0..n {
            let mut s = 0.0;
            for k in 0..c {
                let p = v.data()[k * n + i];
                if !(p >= 0.0) {
                    return Err(AmaaError::Contract(format!("negative or NaN probability {p}")));
                }
                s += p;
            }
            if (s - 1.0).abs() > 1e-9 {
                return Err(AmaaError::Contract(format!("probabilities sum to {s} at voxel {i}")));
            }
        }
        Ok(Self(v))
    }

    pub fn from_logits(logits: &VoxelVolume) -> Self {
        let data = softmax_channels(logits.data(), logits.dims());
        Self(VoxelVolume::new(logits.dims(), data).expect("softmax preserves shape"))
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.0.spatial()
    }

    pub fn volume(&self) -> &VoxelVolume {
        &self.0
    }

    pub fn into_volume(self) -> VoxelVolume {
        self.0
    }
}

/// Per voxel, the lowest class index attaining the maximum probability.
pub fn predict_labels(probs: &ClassProbVolume) -> LabelVolume {
    let v = probs.volume();
    let (c, n) = (v.channels(), v.voxels());
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if v.data()[k * n + i] > v.data()[best * n + i] {
                    best = k;
                }
            }
            best
        })
        .collect();
    LabelVolume::new(v.spatial(), data).expect("dims match")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// One positive weight per class.
    pub class_weights: Vec<f64>,
    pub lambda_c: f64,
    pub window: usize,
    pub use_affinity: bool,
}

impl LossConfig {
    pub fn uniform(classes: usize) -> Self {
        Self {
            class_weights: vec![1.0; classes],
            lambda_c: 0.1,
            window: 3,
            use_affinity: true,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.class_weights.len() != classes {
            return Err(AmaaError::Config(format!(
                "class_weights has {} entries, expected {classes}",
                self.class_weights.len()
            )));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0)) {
            return Err(AmaaError::Config("class weights must be > 0".into()));
        }
        if !(self.lambda_c >= 0.0) {
            return Err(AmaaError::Config("lambda_c must be >= 0".into()));
        }
        ops::check_window(self.window)
    }
}

/// Inverse-frequency weights clamped to `[0.2, 5]` and rescaled to mean 1.
pub fn class_weights_from_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let raw: Vec<f64> = counts
        .iter()
        .map(|&n| {
            if n == 0 || total == 0 {
                5.0
            } else {
                (total as f64 / n as f64).clamp(0.2, 5.0)
            }
        })
        .collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    raw.iter().map(|w| w / mean).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub affinity: f64,
    pub consistency: f64,
    pub total: f64,
}

fn check_pair(dims: [usize; 4], truth: &LabelVolume) -> Result<()> {
    if [dims[1], dims[2], dims[3]] != truth.dims() {
        return shape_err(format!(
            "prediction spatial dims {:?} != label dims {:?}",
            &dims[1..],
            truth.dims()
        ));
    }
    truth.check_classes(dims[0])
}

// ── cross-entropy ───────────────────────────────────────────────────────

fn ce_raw(p: &[f64], dims: [usize; 4], truth: &LabelVolume, w: &[f64]) -> Result<f64> {
    let n = dims[1] * dims[2] * dims[3];
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &y) in truth.data().iter().enumerate() {
        if truth.is_valid(i) {
            sum += -w[y] * safe_ln(p[y * n + i]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(AmaaError::UndefinedLoss("every voxel is masked".into()));
    }
    Ok(sum / count as f64)
}

fn ce_grad(p: &[f64], dims: [usize; 4], truth: &LabelVolume, w: &[f64], g: f64) -> Vec<f64> {
    let n = dims[1] * dims[2] * dims[3];
    let count = (0..truth.len()).filter(|&i| truth.is_valid(i)).count() as f64;
    let mut out = vec![0.0; p.len()];
    for (i, &y) in truth.data().iter().enumerate() {
        if truth.is_valid(i) {
            out[y * n + i] = -g * w[y] * d_safe_ln(p[y * n + i]) / count;
        }
    }
    out
}

pub fn loss_weighted_ce(probs: &ClassProbVolume, truth: &LabelVolume, cfg: &LossConfig) -> Result<f64> {
    let v = probs.volume();
    check_pair(v.dims(), truth)?;
    cfg.validate(v.channels())?;
    ce_raw(v.data(), v.dims(), truth, &cfg.class_weights)
}

// ── scene-class affinity ────────────────────────────────────────────────

struct AffinityStats {
    inter: f64,
    pred_sum: f64,
    pos: f64,
    neg: f64,
    neg_hit: f64,
}

impl AffinityStats {
    fn precision(&self) -> f64 {
        if self.pred_sum > 0.0 {
            self.inter / self.pred_sum
        } else {
            0.0
        }
    }

    fn recall(&self) -> f64 {
        self.inter / self.pos
    }

    /// Vacuously 1 when every valid voxel belongs to the class.
    fn specificity(&self) -> f64 {
        if self.neg > 0.0 {
            self.neg_hit / self.neg
        } else {
            1.0
        }
    }
}

fn affinity_stats(p: &[f64], n: usize, truth: &LabelVolume, class: usize) -> AffinityStats {
    let mut s = AffinityStats {
        inter: 0.0,
        pred_sum: 0.0,
        pos: 0.0,
        neg: 0.0,
        neg_hit: 0.0,
    };
    for (i, &y) in truth.data().iter().enumerate() {
        if !truth.is_valid(i) {
            continue;
        }
        let pc = p[class * n + i];
        s.pred_sum += pc;
        if y == class {
            s.inter += pc;
            s.pos += 1.0;
        } else {
            s.neg += 1.0;
            s.neg_hit += 1.0 - pc;
        }
    }
    s
}

fn affinity_raw(p: &[f64], dims: [usize; 4], truth: &LabelVolume) -> f64 {
    let n = dims[1] * dims[2] * dims[3];
    let present: Vec<usize> = truth
        .histogram(dims[0])
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, _)| k)
        .collect();
    if present.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &c in &present {
        let s = affinity_stats(p, n, truth, c);
        sum += -(safe_ln(s.precision()) + safe_ln(s.recall()) + safe_ln(s.specificity())) / 3.0;
    }
    sum / present.len() as f64
}

fn affinity_grad(p: &[f64], dims: [usize; 4], truth: &LabelVolume, g: f64) -> Vec<f64> {
    let n = dims[1] * dims[2] * dims[3];
    let present: Vec<usize> = truth
        .histogram(dims[0])
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, _)| k)
        .collect();
    let mut out = vec![0.0; p.len()];
    if present.is_empty() {
        return out;
    }
    let scale = -g / (3.0 * present.len() as f64);
    for &c in &present {
        let s = affinity_stats(p, n, truth, c);
        let (pr, re, sp) = (s.precision(), s.recall(), s.specificity());
        let (kp, kr, ks) = (d_safe_ln(pr), d_safe_ln(re), d_safe_ln(sp));
        for (i, &y) in truth.data().iter().enumerate() {
            if !truth.is_valid(i) {
                continue;
            }
            let is_c = if y == c { 1.0 } else { 0.0 };
            let dp = if s.pred_sum > 0.0 {
                (is_c * s.pred_sum - s.inter) / (s.pred_sum * s.pred_sum)
            } else {
                0.0
            };
            let dr = is_c / s.pos;
            let ds = if s.neg > 0.0 { -(1.0 - is_c) / s.neg } else { 0.0 };
            out[c * n + i] += scale * (kp * dp + kr * dr + ks * ds);
        }
    }
    out
}

pub fn loss_affinity(probs: &ClassProbVolume, truth: &LabelVolume) -> Result<f64> {
    let v = probs.volume();
    check_pair(v.dims(), truth)?;
    Ok(affinity_raw(v.data(), v.dims(), truth))
}

// ── neighborhood consistency ────────────────────────────────────────────

/// Deviation of each occupancy value from its clipped-window mean, summed as
/// `Σ_j (o_j - o_i) / n_i` so locally constant regions give exactly 0.
fn window_deviation(o: &[f64], spatial: [usize; 3], size: usize) -> Vec<f64> {
    let [d, h, w] = spatial;
    let r = size / 2;
    let mut out = vec![0.0; o.len()];
    for a in 0..d {
        let (a0, a1) = (a.saturating_sub(r), (a + r).min(d - 1));
        for b in 0..h {
            let (b0, b1) = (b.saturating_sub(r), (b + r).min(h - 1));
            for c in 0..w {
                let (c0, c1) = (c.saturating_sub(r), (c + r).min(w - 1));
                let i = (a * h + b) * w + c;
                let oi = o[i];
                let mut acc = 0.0;
                for x in a0..=a1 {
                    for y in b0..=b1 {
                        for z in c0..=c1 {
                            acc += o[(x * h + y) * w + z] - oi;
                        }
                    }
                }
                let cnt = (a1 - a0 + 1) * (b1 - b0 + 1) * (c1 - c0 + 1);
                out[i] = acc / cnt as f64;
            }
        }
    }
    out
}

fn occupancy(p: &[f64], n: usize) -> Vec<f64> {
    p[..n].iter().map(|p0| 1.0 - p0).collect()
}

fn consistency_dev(p: &[f64], dims: [usize; 4], size: usize) -> Vec<f64> {
    let spatial = [dims[1], dims[2], dims[3]];
    let n = spatial.iter().product::<usize>();
    window_deviation(&occupancy(p, n), spatial, size)
}

fn consistency_raw(p: &[f64], dims: [usize; 4], size: usize) -> f64 {
    let dev = consistency_dev(p, dims, size);
    dev.iter().map(|x| x.abs()).sum::<f64>() / dev.len() as f64
}

fn consistency_grad(p: &[f64], dims: [usize; 4], size: usize, g: f64) -> Vec<f64> {
    let spatial = [dims[1], dims[2], dims[3]];
    let n = spatial.iter().product::<usize>();
    let o = occupancy(p, n);
    let dev = window_deviation(&o, spatial, size);
    // L = (1/n) Σ |m_i - o_i|; dL/do = W^T s - s with s_i = sign(m_i - o_i) / n
    let s: Vec<f64> = dev.iter().map(|x| g * sign(*x) / n as f64).collect();
    let wt = ops::window_mean_backward_raw(&s, [1, dims[1], dims[2], dims[3]], size);
    let mut out = vec![0.0; p.len()];
    for i in 0..n {
        // o = 1 - p_empty
        out[i] = -(wt[i] - s[i]);
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn loss_consistency(probs: &ClassProbVolume, cfg: &LossConfig) -> Result<f64> {
    ops::check_window(cfg.window)?;
    let v = probs.volume();
    Ok(consistency_raw(v.data(), v.dims(), cfg.window))
}

pub fn loss_total(probs: &ClassProbVolume, truth: &LabelVolume, cfg: &LossConfig) -> Result<LossBreakdown> {
    let ce = loss_weighted_ce(probs, truth, cfg)?;
    let affinity = if cfg.use_affinity {
        loss_affinity(probs, truth)?
    } else {
        0.0
    };
    let consistency = loss_consistency(probs, cfg)?;
    Ok(LossBreakdown {
        ce,
        affinity,
        consistency,
        total: combine(ce, affinity, consistency, cfg),
    })
}

/// Same association order as the tape recording in [`record_loss_total`].
fn combine(ce: f64, affinity: f64, consistency: f64, cfg: &LossConfig) -> f64 {
    let sem = if cfg.use_affinity { ce + affinity } else { ce };
    sem + consistency * cfg.lambda_c
}

// ── tape ops ────────────────────────────────────────────────────────────

#[derive(Debug)]
struct WeightedCeOp {
    truth: Arc<LabelVolume>,
    weights: Vec<f64>,
}

impl CustomOp for WeightedCeOp {
    fn name(&self) -> &'static str {
        "weighted_ce"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let dims = inputs[0].dims4()?;
        check_pair(dims, &self.truth)?;
        Ok(Tensor::scalar(ce_raw(inputs[0].data(), dims, &self.truth, &self.weights)?))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let dims = inputs[0].dims4().expect("checked in forward");
        let g = ce_grad(inputs[0].data(), dims, &self.truth, &self.weights, grad.data()[0]);
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g).expect("same shape"))]
    }
}

#[derive(Debug)]
struct AffinityOp {
    truth: Arc<LabelVolume>,
}

impl CustomOp for AffinityOp {
    fn name(&self) -> &'static str {
        "affinity"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let dims = inputs[0].dims4()?;
        check_pair(dims, &self.truth)?;
        Ok(Tensor::scalar(affinity_raw(inputs[0].data(), dims, &self.truth)))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let dims = inputs[0].dims4().expect("checked in forward");
        let g = affinity_grad(inputs[0].data(), dims, &self.truth, grad.data()[0]);
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g).expect("same shape"))]
    }
}

#[derive(Debug)]
struct ConsistencyOp {
    window: usize,
}

impl CustomOp for ConsistencyOp {
    fn name(&self) -> &'static str {
        "consistency"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let dims = inputs[0].dims4()?;
        Ok(Tensor::scalar(consistency_raw(inputs[0].data(), dims, self.window)))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let dims = inputs[0].dims4().expect("checked in forward");
        let g = consistency_grad(inputs[0].data(), dims, self.window, grad.data()[0]);
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g).expect("same shape"))]
    }

    fn kinks(&self, inputs: &[&Tensor]) -> Vec<bool> {
        let dims = inputs[0].dims4().expect("checked in forward");
        consistency_dev(inputs[0].data(), dims, self.window).iter().map(|&x| x > 0.0).collect()
    }

    /// `|x|` replaced by `±x` on the recorded sign.
    fn forward_frozen(&self, inputs: &[&Tensor], pattern: &[bool]) -> Result<Tensor> {
        let dims = inputs[0].dims4()?;
        let dev = consistency_dev(inputs[0].data(), dims, self.window);
        let s: f64 = dev.iter().zip(pattern).map(|(&x, &pos)| if pos { x } else { -x }).sum();
        Ok(Tensor::scalar(s / dev.len() as f64))
    }
}

/// Tape handles of the individual loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    pub affinity: Option<Var>,
    pub consistency: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let s = |v: Var| tape.value(v).data()[0];
        LossBreakdown {
            ce: s(self.ce),
            affinity: self.affinity.map_or(0.0, s),
            consistency: s(self.consistency),
            total: s(self.total),
        }
    }
}

/// Records the full objective on `probs` (a softmax output node).
pub fn record_loss_total(tape: &mut Tape, probs: Var, truth: &LabelVolume, cfg: &LossConfig) -> Result<LossVars> {
    let dims = tape.value(probs).dims4()?;
    check_pair(dims, truth)?;
    cfg.validate(dims[0])?;
    let truth = Arc::new(truth.clone());
    let ce = tape.custom(
        &[probs],
        Arc::new(WeightedCeOp {
            truth: truth.clone(),
            weights: cfg.class_weights.clone(),
        }),
    )?;
    let consistency = tape.custom(&[probs], Arc::new(ConsistencyOp { window: cfg.window }))?;
    let (sem, affinity) = if cfg.use_affinity {
        let a = tape.custom(&[probs], Arc::new(AffinityOp { truth }))?;
        (tape.add(ce, a)?, Some(a))
    } else {
        (ce, None)
    };
    let reg = tape.scale(consistency, cfg.lambda_c);
    let total = tape.add(sem, reg)?;
    Ok(LossVars {
        ce,
        affinity,
        consistency,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_probs(dims: [usize; 4], seed: u64) -> ClassProbVolume {
        let mut rng = SplitMix64::new(seed);
        let logits = VoxelVolume::from_fn(dims, |_, _, _, _| rng.uniform(-2.0, 2.0));
        ClassProbVolume::from_logits(&logits)
    }

    fn random_labels(dims: [usize; 3], classes: usize, seed: u64) -> LabelVolume {
        let mut rng = SplitMix64::new(seed);
        let n = dims.iter().product();
        LabelVolume::new(dims, (0..n).map(|_| rng.range_inclusive(0, classes - 1)).collect()).unwrap()
    }

    fn one_hot(labels: &LabelVolume, classes: usize) -> ClassProbVolume {
        let [d, h, w] = labels.dims();
        let v = VoxelVolume::from_fn([classes, d, h, w], |c, a, b, cc| {
            if labels.get(a, b, cc) == c {
                1.0
            } else {
                0.0
            }
        });
        ClassProbVolume::new(v).unwrap()
    }

    #[test]
    fn predict_labels_cases() {
        let v = VoxelVolume::new([3, 1, 1, 2], vec![0.0, 0.5, 1.0, 0.5, 0.0, 0.0]).unwrap();
        let p = ClassProbVolume::new(v).unwrap();
        assert_eq!(predict_labels(&p).data(), &[1, 0]);
    }

    #[test]
    fn prob_volume_validation() {
        let v = VoxelVolume::new([2, 1, 1, 1], vec![0.7, 0.7]).unwrap();
        assert!(ClassProbVolume::new(v).is_err());
    }

    #[test]
    fn ce_closed_forms() {
        let labels = random_labels([2, 2, 2], 4, 1);
        let cfg = LossConfig::uniform(4);
        let perfect = one_hot(&labels, 4);
        assert!(loss_weighted_ce(&perfect, &labels, &cfg).unwrap() <= 1e-10);
        let uniform = ClassProbVolume::new(VoxelVolume::full([4, 2, 2, 2], 0.25)).unwrap();
        let l = loss_weighted_ce(&uniform, &labels, &cfg).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_random_vs_scalar_oracle() {
        let probs = random_probs([3, 2, 2, 2], 5);
        let labels = random_labels([2, 2, 2], 3, 6);
        let mut cfg = LossConfig::uniform(3);
        cfg.class_weights = vec![1.0, 2.0, 0.5];
        let mut s = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                for c in 0..2 {
                    let y = labels.get(a, b, c);
                    s -= cfg.class_weights[y] * probs.volume().get(y, a, b, c).ln();
                }
            }
        }
        let l = loss_weighted_ce(&probs, &labels, &cfg).unwrap();
        assert!((l - s / 8.0).abs() <= 1e-12);
    }

    #[test]
    fn ce_fully_masked_is_undefined() {
        let labels = LabelVolume::filled([1, 1, 2], 0).with_mask(vec![false, false]).unwrap();
        let probs = random_probs([2, 1, 1, 2], 1);
        assert!(matches!(
            loss_weighted_ce(&probs, &labels, &LossConfig::uniform(2)),
            Err(AmaaError::UndefinedLoss(_))
        ));
    }

    #[test]
    fn affinity_cases() {
        let labels = random_labels([2, 2, 2], 3, 2);
        assert!(loss_affinity(&one_hot(&labels, 3), &labels).unwrap() <= 1e-10);

        // truth all class 1, uniform over 2 classes: P_1 = 1, R_1 = 0.5, S_1
        // vacuous; class 0 absent and skipped.
        let labels = LabelVolume::filled([2, 1, 2], 1);
        let probs = ClassProbVolume::new(VoxelVolume::full([2, 2, 1, 2], 0.5)).unwrap();
        let l = loss_affinity(&probs, &labels).unwrap();
        assert!((l - 2f64.ln() / 3.0).abs() < 1e-15);

        let single = LabelVolume::filled([1, 1, 1], 1);
        let p = ClassProbVolume::new(VoxelVolume::new([2, 1, 1, 1], vec![0.0, 1.0]).unwrap()).unwrap();
        assert!(loss_affinity(&p, &single).unwrap() <= 1e-12);
    }

    #[test]
    fn consistency_cases() {
        let cfg = LossConfig::uniform(2);
        let constant = ClassProbVolume::new(VoxelVolume::from_fn([2, 2, 3, 2], |c, _, _, _| {
            if c == 0 {
                0.3
            } else {
                0.7
            }
        }))
        .unwrap();
        assert_eq!(loss_consistency(&constant, &cfg).unwrap(), 0.0);

        // occupancy [1, 0]: both windows cover both cells
        let v = VoxelVolume::new([2, 1, 1, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = ClassProbVolume::new(v).unwrap();
        assert!((loss_consistency(&p, &cfg).unwrap() - 0.5).abs() < 1e-15);

        let single = ClassProbVolume::new(VoxelVolume::new([2, 1, 1, 1], vec![0.2, 0.8]).unwrap()).unwrap();
        assert_eq!(loss_consistency(&single, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn total_combines_terms() {
        let probs = random_probs([3, 2, 3, 2], 9);
        let labels = random_labels([2, 3, 2], 3, 10);
        let mut cfg = LossConfig::uniform(3);
        cfg.lambda_c = 0.0;
        let b = loss_total(&probs, &labels, &cfg).unwrap();
        assert_eq!(b.total, b.ce + b.affinity);
        cfg.lambda_c = 0.3;
        let b = loss_total(&probs, &labels, &cfg).unwrap();
        let ce = loss_weighted_ce(&probs, &labels, &cfg).unwrap();
        let aff = loss_affinity(&probs, &labels).unwrap();
        let cons = loss_consistency(&probs, &cfg).unwrap();
        assert!((b.total - (ce + aff + 0.3 * cons)).abs() <= 1e-12);
    }

    #[test]
    fn class_weights_are_mean_one_and_clamped() {
        let w = class_weights_from_counts(&[900, 50, 40, 10, 0]);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w[0] < w[1] && w[3] == w[4]);
    }

    #[test]
    fn tape_loss_matches_eager_bitwise() {
        let probs = random_probs([3, 2, 2, 3], 11);
        let labels = random_labels([2, 2, 3], 3, 12);
        let cfg = LossConfig::uniform(3);
        let eager = loss_total(&probs, &labels, &cfg).unwrap();
        let mut t = Tape::new();
        let pv = t.input(probs.volume().clone().into_tensor());
        let vars = record_loss_total(&mut t, pv, &labels, &cfg).unwrap();
        assert_eq!(vars.breakdown(&t), eager);
    }

    #[test]
    fn loss_gradients_vs_finite_differences() {
        for seed in 0..3 {
            let dims = [3, 2, 3, 2];
            let logits0 = {
                let mut rng = SplitMix64::new(100 + seed);
                Tensor::new(dims.to_vec(), (0..36).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
            };
            let labels = random_labels([2, 3, 2], 3, 200 + seed);
            let mut cfg = LossConfig::uniform(3);
            cfg.class_weights = vec![0.5, 1.5, 1.0];
            cfg.lambda_c = 0.7;
            let f = |x: &Tensor| -> (Tape, Var, Var) {
                let mut t = Tape::new();
                let lv = t.input(x.clone());
                let p = t.softmax(lv).unwrap();
                let l = record_loss_total(&mut t, p, &labels, &cfg).unwrap();
                (t, lv, l.total)
            };
            let (t, lv, out) = f(&logits0);
            let g = t.backward(out).unwrap();
            let ga = g.wrt(lv).unwrap();
            let h = 1e-5;
            for i in 0..logits0.numel() {
                let mut p = logits0.clone();
                p.data_mut()[i] += h;
                let mut m = logits0.clone();
                m.data_mut()[i] -= h;
                let (tp, _, op) = f(&p);
                let (tm, _, om) = f(&m);
                let num = (tp.value(op).data()[0] - tm.value(om).data()[0]) / (2.0 * h);
                let a = ga.data()[i];
                assert!((a - num).abs() <= 1e-6 * a.abs().max(1.0), "seed {seed} entry {i}: {a} vs {num}");
            }
        }
    }

    #[test]
    fn argmax_shift_invariance() {
        let mut rng = SplitMix64::new(4);
        let logits = VoxelVolume::from_fn([4, 2, 2, 2], |_, _, _, _| rng.uniform(-3.0, 3.0));
        let shifted = VoxelVolume::from_fn([4, 2, 2, 2], |c, a, b, d| logits.get(c, a, b, d) + (a * 4 + b * 2 + d) as f64 * 1.3);
        assert_eq!(
            predict_labels(&ClassProbVolume::from_logits(&logits)),
            predict_labels(&ClassProbVolume::from_logits(&shifted))
        );
    }
}
