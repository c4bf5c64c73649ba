//! Channel (squeeze-excitation) and parameter-free spatial (energy) attention
//! on lifted voxel features, merged back through a zero-initialized residual.
//!
//! Every block exists twice: an eager function on [`VoxelVolume`]s and a
//! recorder that emits the same computation onto a [`Tape`] with parameters
//! bound from a [`ParamStore`]. Both follow the same operation order, so they
//! agree bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AmaaError, Result};
use crate::ops::{self, check_window};
use crate::param::{ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, VoxelVolume};

/// Width of the SE bottleneck: `max(1, C / r)`.
pub fn se_bottleneck(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

/// Two bias-free 1×1×1 layers of the excitation MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct SEParams {
    /// `(C / r, C, 1, 1, 1)`
    pub w1: Tensor,
    /// `(C, C / r, 1, 1, 1)`
    pub w2: Tensor,
}

impl SEParams {
    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let b = se_bottleneck(channels, reduction);
        Self {
            w1: Tensor::zeros(&[b, channels, 1, 1, 1]),
            w2: Tensor::zeros(&[channels, b, 1, 1, 1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, reduction: usize, seed: u64) -> Result<()> {
        let b = se_bottleneck(channels, reduction);
        store.insert_uniform(&format!("{prefix}.se.w1"), &[b, channels, 1, 1, 1], channels, seed)?;
        store.insert_uniform(&format!("{prefix}.se.w2"), &[channels, b, 1, 1, 1], b, seed)
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.value(&format!("{prefix}.se.w1"))?.clone(),
            w2: store.value(&format!("{prefix}.se.w2"))?.clone(),
        })
    }

    /// Excitation weights `s = sigmoid(W2 relu(W1 z))`.
    pub fn excitation(&self, z: &[f64]) -> Vec<f64> {
        let (b, c) = (self.w1.shape()[0], self.w1.shape()[1]);
        let hidden: Vec<f64> = (0..b)
            .map(|j| {
                let mut acc = 0.0;
                for (i, zi) in z.iter().enumerate() {
                    acc += self.w1.data()[j * c + i] * zi;
                }
                ops::relu(acc)
            })
            .collect();
        (0..c)
            .map(|i| {
                let mut acc = 0.0;
                for (j, hj) in hidden.iter().enumerate() {
                    acc += self.w2.data()[i * b + j] * hj;
                }
                ops::sigmoid(acc)
            })
            .collect()
    }
}

pub fn se_block_3d(v: &VoxelVolume, params: &SEParams) -> Result<VoxelVolume> {
    if v.channels() != params.channels() {
        return shape_err(format!(
            "SE block expects {} channels, got {}",
            params.channels(),
            v.channels()
        ));
    }
    let z = ops::global_avg_pool3d(v)?;
    ops::mul_channels(v, &params.excitation(&z))
}

pub fn record_se(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w1 = tape.param(store, &format!("{prefix}.se.w1"))?;
    let w2 = tape.param(store, &format!("{prefix}.se.w2"))?;
    let z = tape.global_avg_pool(x)?;
    let h = tape.conv3d(z, w1, None, 1)?;
    let h = tape.relu(h);
    let s = tape.conv3d(h, w2, None, 1)?;
    let s = tape.sigmoid(s);
    tape.mul(x, s)
}

/// Which volume the energy statistics are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelMode {
    /// Energies of the channel-mean volume; one channel directly.
    #[default]
    ChannelMean,
    /// Energies per channel, averaged across channels before the sigmoid.
    PerChannelThenAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimamConfig {
    pub lambda: f64,
    pub window: usize,
    #[serde(default)]
    pub channel_mode: ChannelMode,
}

impl Default for SimamConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            window: 3,
            channel_mode: ChannelMode::ChannelMean,
        }
    }
}

impl SimamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(AmaaError::Config(format!("simam lambda must be > 0, got {}", self.lambda)));
        }
        check_window(self.window)
    }
}

/// `e = (x - μ)² / (4(σ² + λ)) + 0.5` per voxel and channel.
pub fn simam_energy(v: &VoxelVolume, cfg: &SimamConfig) -> Result<VoxelVolume> {
    cfg.validate()?;
    let (mu, var) = ops::neighborhood_stats(v, cfg.window)?;
    let floor = 4.0 * cfg.lambda;
    let data = v
        .data()
        .iter()
        .zip(mu.data())
        .zip(var.data())
        .map(|((&x, &m), &s)| {
            let d = x - m;
            d * d * ops::recip_floor(4.0 * s + floor, floor) + 0.5
        })
        .collect();
    VoxelVolume::new(v.dims(), data)
}

fn channel_mean(v: &VoxelVolume) -> Result<VoxelVolume> {
    let [_, d, h, w] = v.dims();
    VoxelVolume::new([1, d, h, w], ops::channel_mean_raw(v.data(), v.dims()))
}

/// Returns the one-channel attention map `A = sigmoid(1/e)` and `V ⊙ A`.
pub fn simam_3d(v: &VoxelVolume, cfg: &SimamConfig) -> Result<(VoxelVolume, VoxelVolume)> {
    let e = match cfg.channel_mode {
        ChannelMode::ChannelMean => simam_energy(&channel_mean(v)?, cfg)?,
        ChannelMode::PerChannelThenAverage => channel_mean(&simam_energy(v, cfg)?)?,
    };
    let a = ops::map(&e, |e| ops::sigmoid(ops::recip_floor(e, 0.5)));
    let out = ops::mul(v, &a)?;
    Ok((a, out))
}

fn record_energy(tape: &mut Tape, m: Var, cfg: &SimamConfig) -> Result<Var> {
    let mu = tape.window_mean(m, cfg.window)?;
    let sq = tape.mul(m, m)?;
    let m2 = tape.window_mean(sq, cfg.window)?;
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.sub(m2, mu2)?;
    let var = tape.clamp_min0(var);
    let floor = 4.0 * cfg.lambda;
    let den = tape.scale(var, 4.0);
    let den = tape.add_scalar(den, floor);
    let inv = tape.recip_floor(den, floor);
    let d = tape.sub(m, mu)?;
    let d2 = tape.mul(d, d)?;
    let e = tape.mul(d2, inv)?;
    Ok(tape.add_scalar(e, 0.5))
}

/// Records SimAM; returns `(A, V ⊙ A)`.
pub fn record_simam(tape: &mut Tape, x: Var, cfg: &SimamConfig) -> Result<(Var, Var)> {
    cfg.validate()?;
    let e = match cfg.channel_mode {
        ChannelMode::ChannelMean => {
            let m = tape.channel_mean(x)?;
            record_energy(tape, m, cfg)?
        }
        ChannelMode::PerChannelThenAverage => {
            let e = record_energy(tape, x, cfg)?;
            tape.channel_mean(e)?
        }
    };
    let r = tape.recip_floor(e, 0.5);
    let a = tape.sigmoid(r);
    let out = tape.mul(x, a)?;
    Ok((a, out))
}

/// Residual merge `V' = V + γ · Conv1×1×1([branches])`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggParams {
    pub gamma: f64,
    /// `(C, k·C, 1, 1, 1)` for `k` concatenated branches.
    pub mix_w: Tensor,
    pub mix_b: Vec<f64>,
}

impl AggParams {
    /// Fresh parameters: γ = 0, zero bias, fan-in uniform mixing kernel.
    pub fn register(store: &mut ParamStore, prefix: &str, channels: usize, branches: usize, seed: u64) -> Result<()> {
        let cin = channels * branches;
        store.insert_zeros(&format!("{prefix}.agg.gamma"), ParamKind::Gain, &[1])?;
        store.insert_uniform(&format!("{prefix}.agg.mix.w"), &[channels, cin, 1, 1, 1], cin, seed)?;
        store.insert_zeros(&format!("{prefix}.agg.mix.b"), ParamKind::Bias, &[channels])
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            gamma: store.value(&format!("{prefix}.agg.gamma"))?.data()[0],
            mix_w: store.value(&format!("{prefix}.agg.mix.w"))?.clone(),
            mix_b: store.value(&format!("{prefix}.agg.mix.b"))?.data().to_vec(),
        })
    }
}

pub fn aggregate_residual(v: &VoxelVolume, v_se: &VoxelVolume, v_sim: &VoxelVolume, params: &AggParams) -> Result<VoxelVolume> {
    if v.dims() != v_se.dims() || v.dims() != v_sim.dims() {
        return shape_err(format!(
            "aggregation inputs differ: {:?}, {:?}, {:?}",
            v.dims(),
            v_se.dims(),
            v_sim.dims()
        ));
    }
    aggregate_branches(v, &[v_se, v_sim], params)
}

/// Residual merge over any number of same-shape branches.
pub fn aggregate_branches(v: &VoxelVolume, branches: &[&VoxelVolume], params: &AggParams) -> Result<VoxelVolume> {
    let mut cat = (*branches.first().ok_or_else(|| AmaaError::Config("no attention branch".into()))?).clone();
    for b in &branches[1..] {
        cat = ops::concat_channels(&cat, b)?;
    }
    let mixed = ops::conv3d(&cat, &params.mix_w, Some(&params.mix_b), 1)?;
    if mixed.dims() != v.dims() {
        return shape_err(format!("mix output {:?} != input {:?}", mixed.dims(), v.dims()));
    }
    ops::add(v, &ops::scale(&mixed, params.gamma))
}

/// Which attention branches an aggregation stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub use_se: bool,
    pub use_simam: bool,
    pub reduction: usize,
    pub simam: SimamConfig,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            use_se: true,
            use_simam: true,
            reduction: 4,
            simam: SimamConfig::default(),
        }
    }
}

impl AttentionConfig {
    pub fn is_active(&self) -> bool {
        self.use_se || self.use_simam
    }

    pub fn branches(&self) -> usize {
        self.use_se as usize + self.use_simam as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 {
            return Err(AmaaError::Config("SE reduction ratio must be >= 1".into()));
        }
        self.simam.validate()
    }

    /// Registers the parameters of one aggregation stage (none when inactive).
    pub fn register(&self, store: &mut ParamStore, prefix: &str, channels: usize, seed: u64) -> Result<()> {
        if self.use_se {
            SEParams::register(store, prefix, channels, self.reduction, seed)?;
        }
        if self.is_active() {
            AggParams::register(store, prefix, channels, self.branches(), seed)?;
        }
        Ok(())
    }
}

/// Records the whole aggregation stage; identity (no nodes) when inactive.
pub fn record_attention(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var, cfg: &AttentionConfig) -> Result<Var> {
    if !cfg.is_active() {
        return Ok(x);
    }
    let mut branches = Vec::new();
    if cfg.use_se {
        branches.push(record_se(tape, store, prefix, x)?);
    }
    if cfg.use_simam {
        branches.push(record_simam(tape, x, &cfg.simam)?.1);
    }
    let mut cat = branches[0];
    for &b in &branches[1..] {
        cat = tape.concat(cat, b)?;
    }
    let w = tape.param(store, &format!("{prefix}.agg.mix.w"))?;
    let b = tape.param(store, &format!("{prefix}.agg.mix.b"))?;
    let gamma = tape.param(store, &format!("{prefix}.agg.gamma"))?;
    let mixed = tape.conv3d(cat, w, Some(b), 1)?;
    let scaled = tape.mul(mixed, gamma)?;
    tape.add(x, scaled)
}

/// Eager form of [`record_attention`].
pub fn attention_stage(v: &VoxelVolume, store: &ParamStore, prefix: &str, cfg: &AttentionConfig) -> Result<VoxelVolume> {
    if !cfg.is_active() {
        return Ok(v.clone());
    }
    let se;
    let sim;
    let mut branches: Vec<&VoxelVolume> = Vec::new();
    if cfg.use_se {
        se = se_block_3d(v, &SEParams::from_store(store, prefix)?)?;
        branches.push(&se);
    }
    if cfg.use_simam {
        sim = simam_3d(v, &cfg.simam)?.1;
        branches.push(&sim);
    }
    aggregate_branches(v, &branches, &AggParams::from_store(store, prefix)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_vol(dims: [usize; 4], seed: u64) -> VoxelVolume {
        let mut rng = SplitMix64::new(seed);
        VoxelVolume::from_fn(dims, |_, _, _, _| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn zero_mlp_halves_input() {
        let v = rand_vol([4, 2, 3, 2], 1);
        let out = se_block_3d(&v, &SEParams::zeros(4, 4)).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn se_channel_mismatch() {
        let v = rand_vol([3, 2, 2, 2], 1);
        assert!(matches!(se_block_3d(&v, &SEParams::zeros(4, 4)), Err(AmaaError::Shape(_))));
    }

    #[test]
    fn constant_volume_energy_and_attention() {
        let v = VoxelVolume::full([2, 3, 3, 3], 1.7);
        let cfg = SimamConfig::default();
        assert!(simam_energy(&v, &cfg).unwrap().data().iter().all(|&e| e == 0.5));
        let (a, out) = simam_3d(&v, &cfg).unwrap();
        let s2 = ops::sigmoid(2.0);
        assert!((s2 - 0.8807970779778823).abs() < 1e-15);
        assert!(a.data().iter().all(|&x| (x - s2).abs() <= 1e-12));
        assert!(out.data().iter().all(|&x| (x - s2 * 1.7).abs() <= 1e-12));
    }

    #[test]
    fn unit_ratio_energy() {
        // [0, 1, 0] window 3 on the middle voxel: μ = 1/3, σ² = 2/9
        let v = VoxelVolume::new([1, 1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let cfg = SimamConfig::default();
        let e = simam_energy(&v, &cfg).unwrap();
        let (mu, var) = (1.0 / 3.0, 2.0 / 9.0);
        let expect = (1.0f64 - mu).powi(2) / (4.0 * (var + 1e-4)) + 0.5;
        assert!((e.data()[1] - expect).abs() < 1e-12);
        // edges see the clipped pair window {0, 1}
        let expect_edge = (0.0f64 - 0.5).powi(2) / (4.0 * (0.25 + 1e-4)) + 0.5;
        assert!((e.data()[0] - expect_edge).abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_is_identity() {
        let v = rand_vol([3, 3, 2, 4], 9);
        let mut store = ParamStore::new();
        let cfg = AttentionConfig::default();
        cfg.register(&mut store, "s0", 3, 11).unwrap();
        let out = attention_stage(&v, &store, "s0", &cfg).unwrap();
        assert_eq!(out, v);
        let mut tape = Tape::new();
        let x = tape.input(v.as_tensor().clone());
        let y = record_attention(&mut tape, &store, "s0", x, &cfg).unwrap();
        assert_eq!(tape.value(y), v.as_tensor());
    }

    #[test]
    fn tape_and_eager_agree() {
        for mode in [ChannelMode::ChannelMean, ChannelMode::PerChannelThenAverage] {
            let v = rand_vol([4, 3, 4, 3], 5);
            let mut store = ParamStore::new();
            let cfg = AttentionConfig {
                simam: SimamConfig {
                    channel_mode: mode,
                    ..Default::default()
                },
                ..Default::default()
            };
            cfg.register(&mut store, "p", 4, 2).unwrap();
            store.set_value("p.agg.gamma", Tensor::scalar(0.7).reshaped(vec![1]).unwrap()).unwrap();
            let eager = attention_stage(&v, &store, "p", &cfg).unwrap();
            let mut tape = Tape::new();
            let x = tape.input(v.as_tensor().clone());
            let y = record_attention(&mut tape, &store, "p", x, &cfg).unwrap();
            assert_eq!(tape.value(y), eager.as_tensor(), "{mode:?}");
        }
    }

    #[test]
    fn inactive_stage_records_nothing() {
        let cfg = AttentionConfig {
            use_se: false,
            use_simam: false,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        cfg.register(&mut store, "p", 4, 1).unwrap();
        assert!(store.is_empty());
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[4, 2, 2, 2]));
        assert_eq!(record_attention(&mut tape, &store, "p", x, &cfg).unwrap(), x);
        assert_eq!(tape.len(), 1);
    }
}
