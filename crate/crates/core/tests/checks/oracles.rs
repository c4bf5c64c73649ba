//! Scalar brute-force re-derivations of each operator, compared entry by
//! entry against the library on small random volumes.

use amaa_core::attention::{aggregate_residual, se_block_3d, simam_3d, simam_energy, AggParams, ChannelMode, SEParams, SimamConfig};
use amaa_core::fusion::{afg_fuse, AfgParams};
use amaa_core::objective::{loss_consistency, loss_weighted_ce, ClassProbVolume, LabelVolume, LossConfig};
use amaa_core::rng::SplitMix64;
use amaa_core::{Tensor, VoxelVolume};

const TOL: f64 = 1e-12;
pub const SEEDS: u64 = 24;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_dims(rng: &mut SplitMix64) -> [usize; 4] {
    [
        rng.range_inclusive(1, 3),
        rng.range_inclusive(1, 4),
        rng.range_inclusive(1, 4),
        rng.range_inclusive(1, 4),
    ]
}

fn random_volume(rng: &mut SplitMix64, dims: [usize; 4]) -> VoxelVolume {
    VoxelVolume::from_fn(dims, |_, _, _, _| rng.uniform(-1.0, 1.0))
}

fn random_tensor(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= TOL, "{what}[{i}]: {x} vs {y}");
    }
}

/// Clipped cube window around `(d, h, w)`.
fn window(dims: [usize; 3], d: usize, h: usize, w: usize, size: usize) -> Vec<(usize, usize, usize)> {
    let r = size / 2;
    let mut out = Vec::new();
    for a in d.saturating_sub(r)..=(d + r).min(dims[0] - 1) {
        for b in h.saturating_sub(r)..=(h + r).min(dims[1] - 1) {
            for c in w.saturating_sub(r)..=(w + r).min(dims[2] - 1) {
                out.push((a, b, c));
            }
        }
    }
    out
}

/// Energy of one scalar field `f` over the clipped window, two-pass variance.
fn energy_oracle(f: impl Fn(usize, usize, usize) -> f64, dims: [usize; 3], lambda: f64, size: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let win = window(dims, d, h, w, size);
                let n = win.len() as f64;
                let mu = win.iter().map(|&(a, b, c)| f(a, b, c)).sum::<f64>() / n;
                let var = win.iter().map(|&(a, b, c)| (f(a, b, c) - mu).powi(2)).sum::<f64>() / n;
                let x = f(d, h, w);
                out.push((x - mu).powi(2) / (4.0 * (var + lambda)) + 0.5);
            }
        }
    }
    out
}

pub fn se_chain_matches_scalar_oracle() {
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::new(seed);
        let dims = random_dims(&mut rng);
        let c = dims[0];
        let b = (c / 2).max(1);
        let v = random_volume(&mut rng, dims);
        let params = SEParams {
            w1: random_tensor(&mut rng, &[b, c, 1, 1, 1]),
            w2: random_tensor(&mut rng, &[c, b, 1, 1, 1]),
        };
        let n = v.voxels();
        let z: Vec<f64> = (0..c).map(|k| v.channel(k).iter().sum::<f64>() / n as f64).collect();
        let hidden: Vec<f64> = (0..b)
            .map(|j| (0..c).map(|k| params.w1.data()[j * c + k] * z[k]).sum::<f64>().max(0.0))
            .collect();
        let s: Vec<f64> = (0..c)
            .map(|k| sigmoid((0..b).map(|j| params.w2.data()[k * b + j] * hidden[j]).sum()))
            .collect();
        let expected: Vec<f64> = (0..c).flat_map(|k| v.channel(k).iter().map(|x| x * s[k]).collect::<Vec<_>>()).collect();
        let got = se_block_3d(&v, &params).unwrap();
        assert_close(got.data(), &expected, &format!("se seed {seed}"));
    }
}

pub fn simam_chain_matches_scalar_oracle() {
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::new(seed);
        let dims = random_dims(&mut rng);
        let [c, d, h, w] = dims;
        let v = random_volume(&mut rng, dims);
        for mode in [ChannelMode::ChannelMean, ChannelMode::PerChannelThenAverage] {
            let cfg = SimamConfig {
                channel_mode: mode,
                ..SimamConfig::default()
            };
            let e: Vec<f64> = match mode {
                ChannelMode::ChannelMean => {
                    let mean = |a, b, cc| (0..c).map(|k| v.get(k, a, b, cc)).sum::<f64>() / c as f64;
                    energy_oracle(mean, [d, h, w], cfg.lambda, cfg.window)
                }
                ChannelMode::PerChannelThenAverage => {
                    let per: Vec<Vec<f64>> = (0..c)
                        .map(|k| energy_oracle(|a, b, cc| v.get(k, a, b, cc), [d, h, w], cfg.lambda, cfg.window))
                        .collect();
                    (0..d * h * w).map(|i| per.iter().map(|p| p[i]).sum::<f64>() / c as f64).collect()
                }
            };
            let a: Vec<f64> = e.iter().map(|e| sigmoid(1.0 / e)).collect();
            let out: Vec<f64> = (0..c).flat_map(|k| v.channel(k).iter().zip(&a).map(|(x, a)| x * a).collect::<Vec<_>>()).collect();
            let (ga, gout) = simam_3d(&v, &cfg).unwrap();
            assert_close(ga.data(), &a, &format!("simam A seed {seed} {mode:?}"));
            assert_close(gout.data(), &out, &format!("simam out seed {seed} {mode:?}"));
        }
    }
}

pub fn simam_energy_on_three_voxel_line() {
    let v = VoxelVolume::new([1, 1, 1, 3], vec![0.0, 1.0, 0.0]).unwrap();
    let cfg = SimamConfig::default();
    let e = simam_energy(&v, &cfg).unwrap();
    // windows clip to {0,1}, {0,1,2}, {1,2}
    let lam = 1e-4;
    let edge = 0.25 / (4.0 * (0.25 + lam)) + 0.5;
    let mid_mu = 1.0 / 3.0;
    let mid_var = (2.0 * mid_mu * mid_mu + (1.0 - mid_mu) * (1.0 - mid_mu)) / 3.0;
    let mid = (1.0 - mid_mu) * (1.0 - mid_mu) / (4.0 * (mid_var + lam)) + 0.5;
    assert_close(e.data(), &[edge, mid, edge], "energies");
}

pub fn aggregation_matches_compositional_oracle() {
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::new(seed);
        let dims = random_dims(&mut rng);
        let c = dims[0];
        let v = random_volume(&mut rng, dims);
        let vse = random_volume(&mut rng, dims);
        let vsim = random_volume(&mut rng, dims);
        let params = AggParams {
            gamma: rng.uniform(-1.0, 1.0),
            mix_w: random_tensor(&mut rng, &[c, 2 * c, 1, 1, 1]),
            mix_b: (0..c).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        };
        let n = v.voxels();
        let mut expected = Vec::new();
        for o in 0..c {
            for i in 0..n {
                let mut acc = params.mix_b[o];
                for k in 0..c {
                    acc += params.mix_w.data()[o * 2 * c + k] * vse.channel(k)[i];
                    acc += params.mix_w.data()[o * 2 * c + c + k] * vsim.channel(k)[i];
                }
                expected.push(v.channel(o)[i] + params.gamma * acc);
            }
        }
        let got = aggregate_residual(&v, &vse, &vsim, &params).unwrap();
        assert_close(got.data(), &expected, &format!("aggregation seed {seed}"));
    }
}

pub fn afg_matches_compositional_oracle() {
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::new(seed);
        let [cd, d, h, w] = random_dims(&mut rng);
        let ce = if rng.next_bool() { cd } else { rng.range_inclusive(1, 3) };
        let f = random_volume(&mut rng, [cd, d, h, w]);
        let v = random_volume(&mut rng, [ce, d, h, w]);
        let params = AfgParams {
            gate_w: random_tensor(&mut rng, &[1, cd + ce, 1, 1, 1]),
            gate_b: rng.uniform(-1.0, 1.0),
            proj_w: (ce != cd).then(|| random_tensor(&mut rng, &[cd, ce, 1, 1, 1])),
            alpha: 0.75,
        };
        let n = d * h * w;
        let gw = params.gate_w.data();
        let m: Vec<f64> = (0..n)
            .map(|i| {
                let mut acc = params.gate_b;
                for k in 0..cd {
                    acc += gw[k] * f.channel(k)[i];
                }
                for k in 0..ce {
                    acc += gw[cd + k] * v.channel(k)[i];
                }
                sigmoid(acc)
            })
            .collect();
        let mut expected = Vec::new();
        for o in 0..cd {
            for i in 0..n {
                let p = match &params.proj_w {
                    Some(pw) => (0..ce).map(|k| pw.data()[o * ce + k] * v.channel(k)[i]).sum(),
                    None => v.channel(o)[i],
                };
                expected.push(f.channel(o)[i] + 0.75 * (m[i] * p));
            }
        }
        let got = afg_fuse(&f, &v, &params).unwrap();
        assert_close(got.data(), &expected, &format!("afg seed {seed}"));
    }
}

fn random_probs(rng: &mut SplitMix64, dims: [usize; 4]) -> ClassProbVolume {
    let logits = VoxelVolume::from_fn(dims, |_, _, _, _| rng.uniform(-3.0, 3.0));
    ClassProbVolume::from_logits(&logits)
}

pub fn consistency_matches_scalar_oracle() {
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::new(seed);
        let mut dims = random_dims(&mut rng);
        dims[0] = dims[0].max(2);
        let [_, d, h, w] = dims;
        let p = random_probs(&mut rng, dims);
        let occ = |a, b, c| 1.0 - p.volume().get(0, a, b, c);
        let mut sum = 0.0;
        for a in 0..d {
            for b in 0..h {
                for c in 0..w {
                    let win = window([d, h, w], a, b, c, 3);
                    let mean = win.iter().map(|&(x, y, z)| occ(x, y, z)).sum::<f64>() / win.len() as f64;
                    sum += (occ(a, b, c) - mean).abs();
                }
            }
        }
        let expected = sum / (d * h * w) as f64;
        let got = loss_consistency(&p, &LossConfig::uniform(dims[0])).unwrap();
        assert!((got - expected).abs() <= TOL, "seed {seed}: {got} vs {expected}");
    }
}

pub fn weighted_ce_matches_scalar_oracle() {
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::new(seed);
        let mut dims = random_dims(&mut rng);
        dims[0] = dims[0].max(2);
        let [c, d, h, w] = dims;
        let p = random_probs(&mut rng, dims);
        let n = d * h * w;
        let labels: Vec<usize> = (0..n).map(|_| rng.range_inclusive(0, c - 1)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.8).collect();
        mask[0] = true;
        let truth = LabelVolume::new([d, h, w], labels.clone()).unwrap().with_mask(mask.clone()).unwrap();
        let cfg = LossConfig {
            class_weights: (0..c).map(|_| rng.uniform(0.2, 5.0)).collect(),
            ..LossConfig::uniform(c)
        };
        let (mut sum, mut count) = (0.0, 0);
        for i in 0..n {
            if mask[i] {
                let y = labels[i];
                sum += -cfg.class_weights[y] * p.volume().data()[y * n + i].max(1e-12).ln();
                count += 1;
            }
        }
        let expected = sum / count as f64;
        let got = loss_weighted_ce(&p, &truth, &cfg).unwrap();
        assert!((got - expected).abs() <= TOL, "seed {seed}: {got} vs {expected}");
    }
}
