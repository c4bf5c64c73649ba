//! Variant ablation and injection-coefficient sweep runners.

use serde::{Deserialize, Serialize};

use crate::camera::CameraGrid;
use crate::dataset::Dataset;
use crate::error::{AmaaError, Result};
use crate::fusion::DEFAULT_ALPHA;
use crate::metrics::{fmt_f64, MetricsReport};
use crate::model::{build_model, ModelConfig, Variant};
use crate::train::{train, EpochLog, TrainConfig, TrainResult};

pub const DEFAULT_ALPHAS: [f64; 6] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.25];

/// Trains `cfg` with `seed` driving both initialization and data order.
pub fn train_once(cfg: &ModelConfig, grid: &CameraGrid, data: &Dataset, tc: &TrainConfig, seed: u64) -> Result<TrainResult> {
    let cfg = ModelConfig { seed, ..cfg.clone() };
    let tc = TrainConfig { seed, ..tc.clone() };
    let (model, init) = build_model(cfg, grid.clone())?;
    train(&model, init, data, &tc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub report: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Trains variants A–D for every seed, seed-major.
pub fn run_ablation(
    base: &ModelConfig,
    grid: &CameraGrid,
    data: &Dataset,
    tc: &TrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(AmaaError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(4 * seeds.len());
    for &seed in seeds {
        for v in Variant::ALL {
            let r = train_once(&base.clone().with_variant(v), grid, data, tc, seed)?;
            let row = AblationRow {
                variant: v,
                seed,
                report: r.log.last().expect("epochs >= 1").val.clone(),
                log: r.log,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,seed,sc_iou,miou\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.variant,
            r.seed,
            fmt_f64(r.report.sc_iou),
            fmt_f64(r.report.miou)
        ));
    }
    s
}

/// Median of `values` (mean of the middle pair for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Median validation mIoU per variant, in A–D order.
pub fn median_miou(rows: &[AblationRow]) -> Vec<(Variant, f64)> {
    Variant::ALL
        .iter()
        .map(|&v| {
            let m: Vec<f64> = rows.iter().filter(|r| r.variant == v).map(|r| r.report.miou).collect();
            (v, median(&m))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub report: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// One gated-fusion run per `alpha`, all else fixed.
pub fn sweep_alpha(
    base: &ModelConfig,
    grid: &CameraGrid,
    data: &Dataset,
    tc: &TrainConfig,
    alphas: &[f64],
    seed: u64,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if !base.use_afg {
        return Err(AmaaError::Config("the alpha sweep needs use_afg = true".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let cfg = ModelConfig { alpha, ..base.clone() };
        let r = train_once(&cfg, grid, data, tc, seed)?;
        let row = SweepRow {
            alpha,
            report: r.log.last().expect("epochs >= 1").val.clone(),
            log: r.log,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha,miou,sc_iou,precision,recall\n");
    for r in rows {
        s.push_str(&format!(
            "{:.2},{},{},{},{}\n",
            r.alpha,
            fmt_f64(r.report.miou),
            fmt_f64(r.report.sc_iou),
            fmt_f64(r.report.precision),
            fmt_f64(r.report.recall)
        ));
    }
    s
}

/// Sidecar metadata for a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub alphas: Vec<f64>,
    /// The coefficient the model uses unless configured otherwise.
    pub default_alpha: f64,
    pub seed: u64,
}

impl SweepMeta {
    pub fn new(alphas: &[f64], seed: u64) -> Self {
        Self {
            alphas: alphas.to_vec(),
            default_alpha: DEFAULT_ALPHA,
            seed,
        }
    }
}
