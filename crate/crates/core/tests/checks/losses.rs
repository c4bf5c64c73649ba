use amaa_core::objective::{loss_consistency, loss_total, ClassProbVolume, LabelVolume, LossConfig};
use amaa_core::rng::SplitMix64;
use amaa_core::VoxelVolume;

fn random_config(rng: &mut SplitMix64, classes: usize) -> LossConfig {
    LossConfig {
        class_weights: (0..classes).map(|_| rng.uniform(0.2, 5.0)).collect(),
        lambda_c: rng.uniform(0.0, 1.0),
        window: [1, 3, 5][rng.range_inclusive(0, 2)],
        use_affinity: rng.next_f64() < 0.8,
    }
}

fn random_labels(rng: &mut SplitMix64, dims: [usize; 3], classes: usize) -> LabelVolume {
    let n = dims.iter().product();
    let labels = LabelVolume::new(dims, (0..n).map(|_| rng.range_inclusive(0, classes - 1)).collect()).unwrap();
    if rng.next_f64() < 0.3 {
        let mut mask: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.7).collect();
        mask[0] = true;
        labels.with_mask(mask).unwrap()
    } else {
        labels
    }
}

pub fn every_term_is_non_negative() {
    for i in 0..100u64 {
        let mut rng = SplitMix64::new(i);
        let classes = rng.range_inclusive(2, 5);
        let dims = [rng.range_inclusive(1, 5), rng.range_inclusive(1, 5), rng.range_inclusive(1, 5)];
        // wide logits push some probabilities to exact 0 and 1
        let scale = [1.0, 10.0, 800.0][i as usize % 3];
        let logits = VoxelVolume::from_fn([classes, dims[0], dims[1], dims[2]], |_, _, _, _| rng.uniform(-scale, scale));
        let probs = ClassProbVolume::from_logits(&logits);
        let truth = random_labels(&mut rng, dims, classes);
        let cfg = random_config(&mut rng, classes);
        let l = loss_total(&probs, &truth, &cfg).unwrap();
        for (name, v) in [("ce", l.ce), ("affinity", l.affinity), ("consistency", l.consistency), ("total", l.total)] {
            assert!(v >= 0.0 && v.is_finite(), "input {i}: {name} = {v}");
        }
    }
}

pub fn constant_occupancy_has_zero_consistency() {
    for i in 0..100u64 {
        let mut rng = SplitMix64::new(500 + i);
        let classes = rng.range_inclusive(2, 5);
        let dims = [classes, rng.range_inclusive(1, 5), rng.range_inclusive(1, 5), rng.range_inclusive(1, 5)];
        let empty = [0.0, 1.0, rng.next_f64()][i as usize % 3];
        // occupied mass is split differently at every voxel
        let mut v = VoxelVolume::zeros(dims);
        let n = v.voxels();
        for j in 0..n {
            let shares: Vec<f64> = (1..classes).map(|_| rng.uniform(0.01, 1.0)).collect();
            let total: f64 = shares.iter().sum();
            v.data_mut()[j] = empty;
            for (k, s) in shares.iter().enumerate() {
                v.data_mut()[(k + 1) * n + j] = (1.0 - empty) * s / total;
            }
        }
        let probs = ClassProbVolume::new(v).unwrap();
        for window in [1, 3, 5] {
            let cfg = LossConfig { window, ..LossConfig::uniform(classes) };
            assert_eq!(loss_consistency(&probs, &cfg).unwrap(), 0.0, "input {i} window {window}");
        }
    }
}

pub fn perfect_one_hot_prediction_has_no_loss() {
    for i in 0..100u64 {
        let mut rng = SplitMix64::new(900 + i);
        let classes = rng.range_inclusive(2, 5);
        let dims = [rng.range_inclusive(1, 5), rng.range_inclusive(1, 5), rng.range_inclusive(1, 5)];
        let truth = random_labels(&mut rng, dims, classes);
        let n = truth.len();
        let mut v = VoxelVolume::zeros([classes, dims[0], dims[1], dims[2]]);
        for (j, &y) in truth.data().iter().enumerate() {
            v.data_mut()[y * n + j] = 1.0;
        }
        let probs = ClassProbVolume::new(v).unwrap();
        let cfg = LossConfig { window: 1, ..random_config(&mut rng, classes) };
        let l = loss_total(&probs, &truth, &cfg).unwrap();
        assert!(l.ce <= 1e-9 && l.affinity <= 1e-9, "input {i}: {l:?}");
        // a single-voxel window sees no neighbours, so a perfect scene scores zero overall
        assert!(l.total <= 1e-9, "input {i}: {l:?}");
    }
}

pub fn perfect_prediction_of_a_solid_scene_has_no_loss_under_defaults() {
    for i in 0..100u64 {
        let mut rng = SplitMix64::new(1300 + i);
        let classes = rng.range_inclusive(2, 5);
        let dims = [rng.range_inclusive(1, 5), rng.range_inclusive(1, 5), rng.range_inclusive(1, 5)];
        let n = dims.iter().product();
        // uniform occupancy (all empty or all occupied) with mixed occupied classes
        let data = if i % 4 == 0 {
            vec![0; n]
        } else {
            (0..n).map(|_| rng.range_inclusive(1, classes - 1)).collect()
        };
        let truth = LabelVolume::new(dims, data).unwrap();
        let mut v = VoxelVolume::zeros([classes, dims[0], dims[1], dims[2]]);
        for (j, &y) in truth.data().iter().enumerate() {
            v.data_mut()[y * n + j] = 1.0;
        }
        let probs = ClassProbVolume::new(v).unwrap();
        let l = loss_total(&probs, &truth, &LossConfig::uniform(classes)).unwrap();
        assert!(l.total <= 1e-9, "input {i}: {l:?}");
    }
}
