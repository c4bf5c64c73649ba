//! End-to-end network: strided 2D encoder → multi-scale lifting → attention
//! aggregation → per-scale 3D encoder → skip-fusion decoder → softmax head.
//!
//! Parameter names:
//!
//! | prefix        | block                                             |
//! |---------------|---------------------------------------------------|
//! | `enc2d.{i}`   | 3×3 stride-2 image conv, stage `i`                |
//! | `att.{l}`     | attention aggregation on lifted scale `l`         |
//! | `enc3d.{l}`   | 3×3×3 conv on scale `l`                           |
//! | `bottleneck`  | 3×3×3 stride-2 conv below the coarsest scale      |
//! | `dec.{l}`     | decoder stage producing scale `l` (+ its gate)    |
//! | `head`        | 1×1×1 conv to class logits                        |
//!
//! Each name draws its initial values from its own PRNG stream, so variants
//! that share a block also share its initialization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_stage, record_attention, AttentionConfig, SimamConfig};
use crate::camera::{record_lift, CameraGrid, LiftPlan, Sampling, ScaleMap};
use crate::error::{AmaaError, Result};
use crate::fusion::{DecoderStage, FusionMode, DEFAULT_ALPHA};
use crate::objective::{class_weights_from_counts, predict_labels, ClassProbVolume, LabelVolume, LossConfig};
use crate::ops::UpsampleMode;
use crate::param::{ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Image2D, VoxelVolume};

/// Ablation variants: A baseline, B +SE, C +SE+SimAM, D +SE+SimAM+gated fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::A, Variant::B, Variant::C, Variant::D];

    /// `(use_se, use_simam, use_afg)`
    pub fn toggles(self) -> (bool, bool, bool) {
        match self {
            Variant::A => (false, false, false),
            Variant::B => (true, false, false),
            Variant::C => (true, true, false),
            Variant::D => (true, true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Loss options; weights default to clamped inverse training frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    pub lambda_c: f64,
    pub window: usize,
    pub use_affinity: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<Vec<f64>>,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            lambda_c: 0.1,
            window: 3,
            use_affinity: true,
            class_weights: None,
        }
    }
}

impl LossSettings {
    pub fn resolve(&self, classes: usize, train_histogram: &[u64]) -> Result<LossConfig> {
        let cfg = LossConfig {
            class_weights: match &self.class_weights {
                Some(w) => w.clone(),
                None => class_weights_from_counts(train_histogram),
            },
            lambda_c: self.lambda_c,
            window: self.window,
            use_affinity: self.use_affinity,
        };
        cfg.validate(classes)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub classes: usize,
    pub use_se: bool,
    pub use_simam: bool,
    pub use_afg: bool,
    /// Injection coefficient; only read when `use_afg`.
    pub alpha: f64,
    /// When false, decoder stages drop their encoder skip entirely.
    #[serde(default = "yes")]
    pub inject_skips: bool,
    /// Output widths of the stride-2 image convs.
    pub widths_2d: Vec<usize>,
    pub width_3d: usize,
    pub scales: ScaleMap,
    pub reduction: usize,
    pub simam: SimamConfig,
    pub sampling: Sampling,
    pub upsample: UpsampleMode,
    pub loss: LossSettings,
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            use_se: true,
            use_simam: true,
            use_afg: true,
            alpha: DEFAULT_ALPHA,
            inject_skips: true,
            widths_2d: vec![8, 16, 32],
            width_3d: 8,
            scales: ScaleMap::default(),
            reduction: 4,
            simam: SimamConfig::default(),
            sampling: Sampling::Bilinear,
            upsample: UpsampleMode::Trilinear,
            loss: LossSettings::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        (self.use_se, self.use_simam, self.use_afg) = v.toggles();
        self
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.toggles() == (self.use_se, self.use_simam, self.use_afg))
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            use_se: self.use_se,
            use_simam: self.use_simam,
            reduction: self.reduction,
            simam: self.simam,
        }
    }

    pub fn fusion(&self) -> FusionMode {
        match (self.inject_skips, self.use_afg) {
            (false, _) => FusionMode::None,
            (true, true) => FusionMode::Gated { alpha: self.alpha },
            (true, false) => FusionMode::Additive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmaaError::Config(m));
        if self.classes < 2 {
            return bad(format!("classes must be >= 2, got {}", self.classes));
        }
        if self.widths_2d.is_empty() || self.widths_2d.contains(&0) || self.width_3d == 0 {
            return bad("channel widths must be non-empty and >= 1".into());
        }
        if self.use_afg && !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        let levels = self.scales.levels();
        if levels.is_empty() {
            return bad("scale map is empty".into());
        }
        if levels[0].power != 0 {
            return bad("the finest scale must be the full grid (power 0)".into());
        }
        for (i, l) in levels.iter().enumerate() {
            if l.power as usize != i {
                return bad("scale powers must be 0, 1, 2, ... in order".into());
            }
            if l.feature_level >= self.widths_2d.len() {
                return bad(format!(
                    "scale {i} uses feature level {} but the 2D encoder has {} stages",
                    l.feature_level,
                    self.widths_2d.len()
                ));
            }
        }
        self.attention().validate()
    }
}

/// Feature-map size after `n` stride-2 stages.
fn halve(rows: usize, cols: usize, n: usize) -> (usize, usize) {
    (0..n).fold((rows, cols), |(r, c), _| (r.div_ceil(2), c.div_ceil(2)))
}

/// A configured network; parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub grid: CameraGrid,
    plans: Vec<Arc<LiftPlan>>,
    stages: Vec<DecoderStage>,
}

/// Tape handles of intermediate volumes, finest scale first.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub lifted: Vec<Var>,
    pub aggregated: Vec<Var>,
    pub logits: Var,
    pub probs: Var,
}

impl Model {
    pub fn new(cfg: ModelConfig, grid: CameraGrid) -> Result<Self> {
        cfg.validate()?;
        grid.validate()?;
        let mut plans = Vec::new();
        for (i, l) in cfg.scales.levels().iter().enumerate() {
            let (r, c) = halve(grid.image_rows, grid.image_cols, l.feature_level + 1);
            plans.push(Arc::new(LiftPlan::new(
                &grid,
                cfg.scales.resolution(&grid, i),
                r,
                c,
                cfg.sampling,
            )?));
        }
        let stages = (0..cfg.scales.len())
            .rev()
            .map(|l| DecoderStage {
                name: format!("dec.{l}"),
                target: cfg.scales.resolution(&grid, l),
                upsample: cfg.upsample,
                fusion: cfg.fusion(),
            })
            .collect();
        Ok(Self {
            cfg,
            grid,
            plans,
            stages,
        })
    }

    pub fn stages(&self) -> &[DecoderStage] {
        &self.stages
    }

    fn lifted_channels(&self, l: usize) -> usize {
        self.cfg.widths_2d[self.cfg.scales.levels()[l].feature_level]
    }

    /// Fresh parameters for this configuration.
    pub fn init_params(&self) -> Result<ParamStore> {
        let cfg = &self.cfg;
        let seed = cfg.seed;
        let mut s = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in cfg.widths_2d.iter().enumerate() {
            s.insert_uniform(&format!("enc2d.{i}.w"), &[c, cin, 1, 3, 3], cin * 9, seed)?;
            s.insert_zeros(&format!("enc2d.{i}.b"), ParamKind::Bias, &[c])?;
            cin = c;
        }
        let w3 = cfg.width_3d;
        let att = cfg.attention();
        for l in 0..cfg.scales.len() {
            let c = self.lifted_channels(l);
            att.register(&mut s, &format!("att.{l}"), c, seed)?;
            s.insert_uniform(&format!("enc3d.{l}.w"), &[w3, c, 3, 3, 3], c * 27, seed)?;
            s.insert_zeros(&format!("enc3d.{l}.b"), ParamKind::Bias, &[w3])?;
        }
        s.insert_uniform("bottleneck.w", &[w3, w3, 3, 3, 3], w3 * 27, seed)?;
        s.insert_zeros("bottleneck.b", ParamKind::Bias, &[w3])?;
        for st in &self.stages {
            st.register(&mut s, w3, w3, w3, seed)?;
        }
        s.insert_uniform("head.w", &[cfg.classes, w3, 1, 1, 1], w3, seed)?;
        s.insert_zeros("head.b", ParamKind::Bias, &[cfg.classes])?;
        Ok(s)
    }

    fn check_image(&self, image: &Image2D) -> Result<()> {
        if image.channels() != 3 || image.rows() != self.grid.image_rows || image.cols() != self.grid.image_cols {
            return Err(AmaaError::Shape(format!(
                "expected a 3x{}x{} image, got {}x{}x{}",
                self.grid.image_rows,
                self.grid.image_cols,
                image.channels(),
                image.rows(),
                image.cols()
            )));
        }
        Ok(())
    }

    /// Checks that `store` holds exactly this model's parameters, shape for shape.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let expected = self.init_params()?;
        for (name, p) in expected.iter() {
            let got = store
                .get(name)
                .map_err(|_| AmaaError::Config(format!("parameter `{name}` is missing")))?;
            if got.value.shape() != p.value.shape() || got.kind != p.kind {
                return Err(AmaaError::Config(format!(
                    "parameter `{name}` has shape {:?}, the model expects {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = store.names().into_iter().find(|n| !expected.contains(n)) {
            return Err(AmaaError::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    fn conv_relu(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = tape.param(store, &format!("{name}.w"))?;
        let b = tape.param(store, &format!("{name}.b"))?;
        let y = tape.conv3d(x, w, Some(b), stride)?;
        Ok(tape.relu(y))
    }

    pub fn record_forward(&self, tape: &mut Tape, store: &ParamStore, image: &Image2D) -> Result<ForwardVars> {
        self.check_image(image)?;
        let mut x = tape.input(image.to_volume().into_tensor());
        let mut pyramid = Vec::new();
        for i in 0..self.cfg.widths_2d.len() {
            x = Self::conv_relu(tape, store, &format!("enc2d.{i}"), x, 2)?;
            pyramid.push(x);
        }
        let att = self.cfg.attention();
        let (mut lifted, mut aggregated, mut encoded) = (Vec::new(), Vec::new(), Vec::new());
        for (l, level) in self.cfg.scales.levels().iter().enumerate() {
            let v = record_lift(tape, pyramid[level.feature_level], self.plans[l].clone())?;
            let a = record_attention(tape, store, &format!("att.{l}"), v, &att)?;
            encoded.push(Self::conv_relu(tape, store, &format!("enc3d.{l}"), a, 1)?);
            lifted.push(v);
            aggregated.push(a);
        }
        let coarsest = *encoded.last().expect("at least one scale");
        let bottleneck = Self::conv_relu(tape, store, "bottleneck", coarsest, 2)?;
        let skips: Vec<Var> = encoded.iter().rev().copied().collect();
        let dec = crate::fusion::record_decode_hierarchy(tape, store, bottleneck, &skips, &self.stages)?;
        let w = tape.param(store, "head.w")?;
        let b = tape.param(store, "head.b")?;
        let logits = tape.conv3d(dec, w, Some(b), 1)?;
        let probs = tape.softmax(logits)?;
        Ok(ForwardVars {
            lifted,
            aggregated,
            logits,
            probs,
        })
    }

    pub fn forward(&self, store: &ParamStore, image: &Image2D) -> Result<ClassProbVolume> {
        let mut tape = Tape::new();
        let f = self.record_forward(&mut tape, store, image)?;
        ClassProbVolume::new(tape.volume(f.probs)?)
    }

    pub fn predict(&self, store: &ParamStore, image: &Image2D) -> Result<LabelVolume> {
        Ok(predict_labels(&self.forward(store, image)?))
    }

    /// Lifted and aggregated volumes per scale, computed eagerly.
    pub fn attention_features(&self, store: &ParamStore, image: &Image2D) -> Result<Vec<(VoxelVolume, VoxelVolume)>> {
        let mut tape = Tape::new();
        let f = self.record_forward(&mut tape, store, image)?;
        let att = self.cfg.attention();
        f.lifted
            .iter()
            .enumerate()
            .map(|(l, &v)| {
                let lifted = tape.volume(v)?;
                let agg = attention_stage(&lifted, store, &format!("att.{l}"), &att)?;
                Ok((lifted, agg))
            })
            .collect()
    }
}

/// Builds the network and its initial parameters.
pub fn build_model(cfg: ModelConfig, grid: CameraGrid) -> Result<(Model, ParamStore)> {
    let m = Model::new(cfg, grid)?;
    let p = m.init_params()?;
    Ok((m, p))
}

/// A 4×4×4-grid, 16×16-image network small enough for exhaustive gradient checks.
pub fn micro_config(classes: usize) -> (ModelConfig, CameraGrid) {
    let grid = CameraGrid {
        fx: 12.0,
        fy: 12.0,
        cx: 8.0,
        cy: 8.0,
        image_rows: 16,
        image_cols: 16,
        origin: [-0.4, -0.4, 1.0],
        voxel_size: 0.2,
        dims: [4, 4, 4],
        pose: None,
    };
    let cfg = ModelConfig {
        classes,
        widths_2d: vec![2, 3, 4],
        width_3d: 2,
        reduction: 2,
        ..ModelConfig::default()
    };
    (cfg, grid)
}
