//! Central-difference verification of tape gradients.

use serde::Serialize;

use crate::attention::{record_attention, record_se, record_simam, AttentionConfig};
use crate::error::{AmaaError, Result};
use crate::fusion::{record_afg_fuse, AfgParams, DEFAULT_ALPHA};
use crate::model::{build_model, micro_config, ModelConfig};
use crate::objective::{record_loss_total, LabelVolume, LossConfig};
use crate::param::{ParamKind, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{Tape, Var};
use crate::tensor::{Image2D, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Entries whose `±h` probe crossed a ReLU/clamp kink and were re-probed
    /// on the recorded branch.
    pub kink_entries: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `out` against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` for every parameter leaf bound on `tape`.
///
/// When a probe flips the branch of any kink op the entry is re-probed with
/// the kink pattern of the evaluation point frozen, which is the smooth piece
/// the tape differentiates. The tape is restored to `store` values on return.
pub fn grad_check(tape: &mut Tape, out: Var, store: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport> {
    if tape.value(out).numel() != 1 {
        return Err(AmaaError::Contract(format!(
            "grad_check needs a scalar output, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    tape.load_params(store)?;
    tape.replay()?;
    let grads = tape.backward(out)?;
    let base_pattern = tape.kink_pattern();

    let mut bound: Vec<(String, Var)> = tape.param_vars().map(|(k, v)| (k.clone(), *v)).collect();
    bound.sort_by(|a, b| a.0.cmp(&b.0));

    let mut params = Vec::with_capacity(bound.len());
    for (name, var) in bound {
        let theta = store.value(&name)?.clone();
        let analytic = grads
            .wrt(var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; theta.numel()]);
        let mut check = ParamCheck {
            name: name.clone(),
            numel: theta.numel(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            kink_entries: 0,
        };
        for i in 0..theta.numel() {
            let mut probe = |delta: f64, frozen: bool| -> Result<(f64, bool)> {
                let mut t = theta.clone();
                t.data_mut()[i] += delta;
                tape.set_leaf(var, t)?;
                if frozen {
                    tape.replay_frozen(&base_pattern)?;
                    Ok((tape.value(out).data()[0], true))
                } else {
                    tape.replay()?;
                    Ok((tape.value(out).data()[0], tape.kink_pattern() == base_pattern))
                }
            };
            let (mut fp, okp) = probe(h, false)?;
            let (mut fm, okm) = probe(-h, false)?;
            if !(okp && okm) {
                check.kink_entries += 1;
                fp = probe(h, true)?.0;
                fm = probe(-h, true)?.0;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(relative_error(a, numeric));
        }
        tape.set_leaf(var, theta)?;
        params.push(check);
    }
    tape.replay()?;
    Ok(GradCheckReport { h, tol, params })
}

/// One entry of [`module_suite`].
#[derive(Debug, Clone, Serialize)]
pub struct ModuleCheck {
    pub module: String,
    pub report: GradCheckReport,
}

impl ModuleCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.report.max_rel_error()
    }

    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("shape matches")
}

/// Overwrites every parameter with uniform values in [-1, 1].
fn randomize(store: &mut ParamStore, rng: &mut SplitMix64) -> Result<()> {
    for name in store.names() {
        let shape = store.value(&name)?.shape().to_vec();
        store.set_value(&name, random_tensor(rng, &shape))?;
    }
    Ok(())
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output entry matters.
fn project(tape: &mut Tape, y: Var, rng: &mut SplitMix64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let r = tape.input(random_tensor(rng, &shape));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn check_conv(seed: u64, k: usize, stride: usize, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::for_stream(seed, &format!("gradcheck.conv{k}.{stride}"));
    let mut store = ParamStore::new();
    store.insert("x", ParamKind::Weight, random_tensor(&mut rng, &[2, 3, 4, 5]))?;
    store.insert("w", ParamKind::Weight, random_tensor(&mut rng, &[3, 2, k, k, k]))?;
    store.insert("b", ParamKind::Bias, random_tensor(&mut rng, &[3]))?;
    let mut tape = Tape::new();
    let x = tape.param(&store, "x")?;
    let w = tape.param(&store, "w")?;
    let b = tape.param(&store, "b")?;
    let y = tape.conv3d(x, w, Some(b), stride)?;
    let out = project(&mut tape, y, &mut rng)?;
    grad_check(&mut tape, out, &store, h, tol)
}

fn check_attention(seed: u64, module: &str, cfg: AttentionConfig, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::for_stream(seed, &format!("gradcheck.{module}"));
    let mut store = ParamStore::new();
    cfg.register(&mut store, "m", 4, seed)?;
    store.insert("x", ParamKind::Weight, Tensor::zeros(&[4, 3, 4, 5]))?;
    randomize(&mut store, &mut rng)?;
    let mut tape = Tape::new();
    let x = tape.param(&store, "x")?;
    let y = match module {
        "se" => record_se(&mut tape, &store, "m", x)?,
        "simam" => record_simam(&mut tape, x, &cfg.simam)?.1,
        _ => record_attention(&mut tape, &store, "m", x, &cfg)?,
    };
    let out = project(&mut tape, y, &mut rng)?;
    grad_check(&mut tape, out, &store, h, tol)
}

fn check_afg(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::for_stream(seed, "gradcheck.afg");
    let mut store = ParamStore::new();
    AfgParams::register(&mut store, "m", 3, 2, seed)?;
    store.insert("f_dec", ParamKind::Weight, Tensor::zeros(&[3, 3, 4, 5]))?;
    store.insert("v", ParamKind::Weight, Tensor::zeros(&[2, 3, 4, 5]))?;
    randomize(&mut store, &mut rng)?;
    let mut tape = Tape::new();
    let f = tape.param(&store, "f_dec")?;
    let v = tape.param(&store, "v")?;
    let y = record_afg_fuse(&mut tape, &store, "m", f, v, DEFAULT_ALPHA)?;
    let out = project(&mut tape, y, &mut rng)?;
    grad_check(&mut tape, out, &store, h, tol)
}

fn random_labels(rng: &mut SplitMix64, dims: [usize; 3], classes: usize) -> Result<LabelVolume> {
    let n = dims.iter().product();
    LabelVolume::new(dims, (0..n).map(|_| rng.range_inclusive(0, classes - 1)).collect())
}

fn micro_loss_config(classes: usize) -> LossConfig {
    LossConfig {
        class_weights: (0..classes).map(|c| 0.5 + c as f64).collect(),
        use_affinity: true,
        ..LossConfig::uniform(classes)
    }
}

/// `loss_total` with respect to logits upstream of the softmax.
fn check_loss_logits(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::for_stream(seed, "gradcheck.loss");
    let classes = 3;
    let mut store = ParamStore::new();
    store.insert("logits", ParamKind::Weight, random_tensor(&mut rng, &[classes, 4, 4, 4]))?;
    let truth = random_labels(&mut rng, [4, 4, 4], classes)?;
    let mut tape = Tape::new();
    let z = tape.param(&store, "logits")?;
    let p = tape.softmax(z)?;
    let loss = record_loss_total(&mut tape, p, &truth, &micro_loss_config(classes))?;
    grad_check(&mut tape, loss.total, &store, h, tol)
}

/// `loss_total` through the whole 4³, 2-class micro-model.
fn check_micro_model(seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut rng = SplitMix64::for_stream(seed, "gradcheck.model");
    let (cfg, grid) = micro_config(2);
    let (model, mut store) = build_model(ModelConfig { seed, ..cfg }, grid.clone())?;
    // fan-in weights as initialized; zero-initialized gains and biases are
    // drawn so that no parameter has an identically vanishing gradient
    for name in store.names() {
        let p = store.get(&name)?;
        let shape = p.value.shape().to_vec();
        let n = p.value.numel();
        let value = match p.kind {
            ParamKind::Gain => Tensor::new(shape, (0..n).map(|_| rng.uniform(0.5, 1.0)).collect())?,
            ParamKind::Bias => Tensor::new(shape, (0..n).map(|_| rng.uniform(-0.1, 0.1)).collect())?,
            ParamKind::Weight => continue,
        };
        store.set_value(&name, value)?;
    }
    let n = 3 * grid.image_rows * grid.image_cols;
    let image = Image2D::new(3, grid.image_rows, grid.image_cols, (0..n).map(|_| rng.next_f64()).collect())?;
    let truth = random_labels(&mut rng, grid.dims, 2)?;
    let mut tape = Tape::new();
    let fwd = model.record_forward(&mut tape, &store, &image)?;
    let loss = record_loss_total(&mut tape, fwd.probs, &truth, &micro_loss_config(2))?;
    grad_check(&mut tape, loss.total, &store, h, tol)
}

pub const SUITE_MODULES: [&str; 9] = [
    "conv3d_k3",
    "conv3d_k3_stride2",
    "conv3d_k1",
    "se",
    "simam",
    "aggregation",
    "afg",
    "loss_total_logits",
    "loss_total_micro_model",
];

/// Gradient checks of every differentiable building block at one seed.
pub fn module_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<ModuleCheck>> {
    let att = AttentionConfig {
        reduction: 2,
        ..AttentionConfig::default()
    };
    SUITE_MODULES
        .iter()
        .map(|&module| {
            let report = match module {
                "conv3d_k3" => check_conv(seed, 3, 1, h, tol)?,
                "conv3d_k3_stride2" => check_conv(seed, 3, 2, h, tol)?,
                "conv3d_k1" => check_conv(seed, 1, 1, h, tol)?,
                "se" | "simam" | "aggregation" => check_attention(seed, module, att, h, tol)?,
                "afg" => check_afg(seed, h, tol)?,
                "loss_total_logits" => check_loss_logits(seed, h, tol)?,
                _ => check_micro_model(seed, h, tol)?,
            };
            Ok(ModuleCheck {
                module: module.to_string(),
                report,
            })
        })
        .collect()
}
