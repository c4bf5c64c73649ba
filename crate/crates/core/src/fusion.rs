//! Gated skip fusion between decoder and encoder volumes, and the
//! coarse-to-fine decoder built from it.
//!
//! A gate `M = sigmoid(Conv1×1×1([F_dec; V']))` decides per voxel how much of
//! the encoder feature `V'` is injected: `F_fused = F_dec + α (M ⊙ P(V'))`,
//! where `P` is an optional 1×1×1 channel projection.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AmaaError, Result};
use crate::ops::{self, UpsampleMode};
use crate::param::{ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, VoxelVolume};

pub const DEFAULT_ALPHA: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
pub struct AfgParams {
    /// `(1, C_d + C_e, 1, 1, 1)`
    pub gate_w: Tensor,
    pub gate_b: f64,
    /// `(C_d, C_e, 1, 1, 1)`, required when `C_e != C_d`.
    pub proj_w: Option<Tensor>,
    pub alpha: f64,
}

impl AfgParams {
    pub fn register(store: &mut ParamStore, prefix: &str, dec_ch: usize, enc_ch: usize, seed: u64) -> Result<()> {
        let cin = dec_ch + enc_ch;
        store.insert_uniform(&format!("{prefix}.afg.gate.w"), &[1, cin, 1, 1, 1], cin, seed)?;
        store.insert_zeros(&format!("{prefix}.afg.gate.b"), ParamKind::Bias, &[1])?;
        if enc_ch != dec_ch {
            store.insert_uniform(&format!("{prefix}.afg.proj.w"), &[dec_ch, enc_ch, 1, 1, 1], enc_ch, seed)?;
        }
        Ok(())
    }

    pub fn from_store(store: &ParamStore, prefix: &str, alpha: f64) -> Result<Self> {
        let proj = format!("{prefix}.afg.proj.w");
        Ok(Self {
            gate_w: store.value(&format!("{prefix}.afg.gate.w"))?.clone(),
            gate_b: store.value(&format!("{prefix}.afg.gate.b"))?.data()[0],
            proj_w: if store.contains(&proj) {
                Some(store.value(&proj)?.clone())
            } else {
                None
            },
            alpha,
        })
    }

    fn check(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(AmaaError::Config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

fn check_spatial(f_dec: &VoxelVolume, v: &VoxelVolume) -> Result<()> {
    if f_dec.spatial() != v.spatial() {
        return shape_err(format!(
            "decoder volume {:?} and encoder volume {:?} differ spatially",
            f_dec.spatial(),
            v.spatial()
        ));
    }
    Ok(())
}

pub fn afg_gate(f_dec: &VoxelVolume, v: &VoxelVolume, params: &AfgParams) -> Result<VoxelVolume> {
    check_spatial(f_dec, v)?;
    let logits = ops::conv3d(&ops::concat_channels(f_dec, v)?, &params.gate_w, Some(&[params.gate_b]), 1)?;
    Ok(ops::map(&logits, ops::sigmoid))
}

pub fn afg_fuse(f_dec: &VoxelVolume, v: &VoxelVolume, params: &AfgParams) -> Result<VoxelVolume> {
    params.check()?;
    let m = afg_gate(f_dec, v, params)?;
    let p = match (&params.proj_w, v.channels() == f_dec.channels()) {
        (Some(w), _) => ops::conv3d(v, w, None, 1)?,
        (None, true) => v.clone(),
        (None, false) => {
            return Err(AmaaError::Config(format!(
                "encoder has {} channels, decoder {}: a projection kernel is required",
                v.channels(),
                f_dec.channels()
            )))
        }
    };
    ops::add(f_dec, &ops::scale(&ops::mul(&p, &m)?, params.alpha))
}

/// How a decoder stage merges its encoder skip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FusionMode {
    /// Skip dropped; the stage uses only the upsampled decoder path.
    None,
    /// Plain residual skip `F_dec + V'`.
    Additive,
    /// Gated injection with coefficient `alpha`.
    Gated { alpha: f64 },
}

pub fn record_afg_gate(tape: &mut Tape, store: &ParamStore, prefix: &str, f_dec: Var, v: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.afg.gate.w"))?;
    let b = tape.param(store, &format!("{prefix}.afg.gate.b"))?;
    let cat = tape.concat(f_dec, v)?;
    let logits = tape.conv3d(cat, w, Some(b), 1)?;
    Ok(tape.sigmoid(logits))
}

pub fn record_afg_fuse(tape: &mut Tape, store: &ParamStore, prefix: &str, f_dec: Var, v: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(AmaaError::Config(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let fs = tape.value(f_dec).shape().to_vec();
    let vs = tape.value(v).shape().to_vec();
    if fs.len() != 4 || vs.len() != 4 || fs[1..] != vs[1..] {
        return shape_err(format!("decoder volume {fs:?} and encoder volume {vs:?} differ spatially"));
    }
    let m = record_afg_gate(tape, store, prefix, f_dec, v)?;
    let proj = format!("{prefix}.afg.proj.w");
    let p = if store.contains(&proj) {
        let w = tape.param(store, &proj)?;
        tape.conv3d(v, w, None, 1)?
    } else if fs[0] == vs[0] {
        v
    } else {
        return Err(AmaaError::Config(format!(
            "encoder has {} channels, decoder {}: a projection kernel is required",
            vs[0], fs[0]
        )));
    };
    let injected = tape.mul(p, m)?;
    let injected = tape.scale(injected, alpha);
    tape.add(f_dec, injected)
}

/// Upsample → 3×3×3 conv + ReLU → skip fusion, at one decoder scale.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    /// Parameter-name prefix.
    pub name: String,
    /// Output resolution `(D, H, W)`.
    pub target: [usize; 3],
    pub upsample: UpsampleMode,
    pub fusion: FusionMode,
}

impl DecoderStage {
    pub fn register(&self, store: &mut ParamStore, in_ch: usize, out_ch: usize, enc_ch: usize, seed: u64) -> Result<()> {
        let n = &self.name;
        store.insert_uniform(&format!("{n}.conv.w"), &[out_ch, in_ch, 3, 3, 3], in_ch * 27, seed)?;
        store.insert_zeros(&format!("{n}.conv.b"), ParamKind::Bias, &[out_ch])?;
        if matches!(self.fusion, FusionMode::Gated { .. }) {
            AfgParams::register(store, n, out_ch, enc_ch, seed)?;
        }
        Ok(())
    }

    /// Stage body without the fusion step.
    pub fn pre_fusion(&self, x: &VoxelVolume, store: &ParamStore) -> Result<VoxelVolume> {
        let n = &self.name;
        let up = ops::upsample_to(x, self.target, self.upsample)?;
        let conv = ops::conv3d(
            &up,
            store.value(&format!("{n}.conv.w"))?,
            Some(store.value(&format!("{n}.conv.b"))?.data()),
            1,
        )?;
        Ok(ops::map(&conv, ops::relu))
    }

    pub fn forward(&self, x: &VoxelVolume, skip: &VoxelVolume, store: &ParamStore) -> Result<VoxelVolume> {
        let f = self.pre_fusion(x, store)?;
        match self.fusion {
            FusionMode::None => Ok(f),
            FusionMode::Additive => {
                check_spatial(&f, skip)?;
                ops::add(&f, skip)
            }
            FusionMode::Gated { alpha } => afg_fuse(&f, skip, &AfgParams::from_store(store, &self.name, alpha)?),
        }
    }

    pub fn record(&self, tape: &mut Tape, store: &ParamStore, x: Var, skip: Var) -> Result<Var> {
        let n = &self.name;
        let up = tape.upsample(x, self.target, self.upsample)?;
        let w = tape.param(store, &format!("{n}.conv.w"))?;
        let b = tape.param(store, &format!("{n}.conv.b"))?;
        let conv = tape.conv3d(up, w, Some(b), 1)?;
        let f = tape.relu(conv);
        match self.fusion {
            FusionMode::None => Ok(f),
            FusionMode::Additive => tape.add(f, skip),
            FusionMode::Gated { alpha } => record_afg_fuse(tape, store, n, f, skip, alpha),
        }
    }
}

fn check_aligned(stages: usize, skips: usize) -> Result<()> {
    if stages != skips {
        return Err(AmaaError::Config(format!(
            "{stages} decoder stages but {skips} encoder volumes"
        )));
    }
    Ok(())
}

/// Runs `stages` (coarse → fine) from `bottleneck`, fusing `skips[i]` at stage `i`.
pub fn decode_hierarchy(
    bottleneck: &VoxelVolume,
    skips: &[VoxelVolume],
    stages: &[DecoderStage],
    store: &ParamStore,
) -> Result<VoxelVolume> {
    check_aligned(stages.len(), skips.len())?;
    let mut x = bottleneck.clone();
    for (stage, skip) in stages.iter().zip(skips) {
        x = stage.forward(&x, skip, store)?;
    }
    Ok(x)
}

pub fn record_decode_hierarchy(
    tape: &mut Tape,
    store: &ParamStore,
    bottleneck: Var,
    skips: &[Var],
    stages: &[DecoderStage],
) -> Result<Var> {
    check_aligned(stages.len(), skips.len())?;
    let mut x = bottleneck;
    for (stage, &skip) in stages.iter().zip(skips) {
        x = stage.record(tape, store, x, skip)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_vol(dims: [usize; 4], rng: &mut SplitMix64) -> VoxelVolume {
        VoxelVolume::from_fn(dims, |_, _, _, _| rng.uniform(-1.0, 1.0))
    }

    fn params(cd: usize, ce: usize, bias: f64, alpha: f64) -> AfgParams {
        AfgParams {
            gate_w: Tensor::zeros(&[1, cd + ce, 1, 1, 1]),
            gate_b: bias,
            proj_w: None,
            alpha,
        }
    }

    #[test]
    fn zero_kernel_gates() {
        let mut rng = SplitMix64::new(1);
        let (f, v) = (rand_vol([2, 2, 3, 2], &mut rng), rand_vol([2, 2, 3, 2], &mut rng));
        let m = afg_gate(&f, &v, &params(2, 2, 0.0, 0.75)).unwrap();
        assert!(m.data().iter().all(|&x| x == 0.5));
        let m = afg_gate(&f, &v, &params(2, 2, 20.0, 0.75)).unwrap();
        assert!(m.data().iter().all(|&x| (1.0 - x) < 1e-8 && x < 1.0));
        let fused = afg_fuse(&f, &v, &params(2, 2, 20.0, 0.75)).unwrap();
        for i in 0..f.data().len() {
            assert!((fused.data()[i] - (f.data()[i] + 0.75 * v.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_alpha_returns_decoder_bitwise() {
        let mut rng = SplitMix64::new(2);
        let (f, v) = (rand_vol([3, 2, 2, 2], &mut rng), rand_vol([3, 2, 2, 2], &mut rng));
        let mut p = params(3, 3, 0.3, 0.0);
        p.gate_w = Tensor::full(&[1, 6, 1, 1, 1], 0.4);
        assert_eq!(afg_fuse(&f, &v, &p).unwrap(), f);
    }

    #[test]
    fn mismatched_channels_need_projection() {
        let mut rng = SplitMix64::new(3);
        let (f, v) = (rand_vol([2, 2, 2, 2], &mut rng), rand_vol([3, 2, 2, 2], &mut rng));
        assert!(matches!(afg_fuse(&f, &v, &params(2, 3, 0.0, 1.0)), Err(AmaaError::Config(_))));
        let mut p = params(2, 3, 0.0, 1.0);
        p.proj_w = Some(Tensor::full(&[2, 3, 1, 1, 1], 0.1));
        assert_eq!(afg_fuse(&f, &v, &p).unwrap().dims(), f.dims());
        let w = rand_vol([2, 2, 2, 3], &mut rng);
        assert!(matches!(afg_gate(&f, &w, &p), Err(AmaaError::Shape(_))));
    }

    #[test]
    fn hierarchy_tape_matches_eager() {
        let mut rng = SplitMix64::new(4);
        let stages = vec![
            DecoderStage {
                name: "dec1".into(),
                target: [4, 4, 2],
                upsample: UpsampleMode::Trilinear,
                fusion: FusionMode::Gated { alpha: 0.75 },
            },
            DecoderStage {
                name: "dec0".into(),
                target: [8, 7, 4],
                upsample: UpsampleMode::Trilinear,
                fusion: FusionMode::Additive,
            },
        ];
        let mut store = ParamStore::new();
        stages[0].register(&mut store, 3, 2, 2, 9).unwrap();
        stages[1].register(&mut store, 2, 2, 2, 9).unwrap();
        store.set_value("dec1.afg.gate.b", Tensor::new(vec![1], vec![0.2]).unwrap()).unwrap();
        let bottleneck = rand_vol([3, 2, 2, 1], &mut rng);
        let skips = vec![rand_vol([2, 4, 4, 2], &mut rng), rand_vol([2, 8, 7, 4], &mut rng)];
        let eager = decode_hierarchy(&bottleneck, &skips, &stages, &store).unwrap();
        assert_eq!(eager.dims(), [2, 8, 7, 4]);
        let mut tape = Tape::new();
        let b = tape.input(bottleneck.as_tensor().clone());
        let s: Vec<Var> = skips.iter().map(|v| tape.input(v.as_tensor().clone())).collect();
        let y = record_decode_hierarchy(&mut tape, &store, b, &s, &stages).unwrap();
        assert_eq!(tape.value(y), eager.as_tensor());
        assert!(decode_hierarchy(&bottleneck, &skips[..1], &stages, &store).is_err());
    }
}
