use amaa_core::dataset::Dataset;
use amaa_core::model::{build_model, micro_config, Variant};
use amaa_core::scene::{default_palette, SceneSpec};
use amaa_core::train::{evaluate, predict_split, train, TrainConfig};
use amaa_core::ParamStore;

fn micro_data(classes: usize) -> (amaa_core::model::ModelConfig, amaa_core::camera::CameraGrid, Dataset) {
    let (cfg, grid) = micro_config(classes);
    let spec = SceneSpec {
        dims: grid.dims,
        classes,
        palette: default_palette(classes),
        objects: [1, 2],
        object_size: [1, 2],
    };
    let data = Dataset::generate(&spec, &grid, 4, 3, 9).unwrap();
    (cfg.with_variant(Variant::D), grid, data)
}

fn tc(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        epochs: 4,
        seed,
        ..TrainConfig::default()
    }
}

fn bits(p: &ParamStore) -> Vec<(String, Vec<u64>)> {
    p.names()
        .into_iter()
        .map(|n| {
            let v = p.value(&n).unwrap().data().iter().map(|x| x.to_bits()).collect();
            (n, v)
        })
        .collect()
}

#[test]
fn training_is_bitwise_reproducible() {
    let (cfg, grid, data) = micro_data(4);
    let run = |seed| {
        let (model, init) = build_model(cfg.clone(), grid.clone()).unwrap();
        train(&model, init, &data, &tc(seed)).unwrap()
    };
    let (a, b, c) = (run(1), run(1), run(2));
    assert_eq!(bits(&a.params), bits(&b.params));
    assert_eq!(a.log, b.log);
    assert_ne!(bits(&a.params), bits(&c.params));
}

#[test]
fn training_reduces_the_objective() {
    let (cfg, grid, data) = micro_data(4);
    let (model, init) = build_model(cfg, grid).unwrap();
    let r = train(&model, init, &data, &TrainConfig { epochs: 8, ..tc(0) }).unwrap();
    let first = r.log.first().unwrap().train.total;
    let last = r.log.last().unwrap().train.total;
    assert!(last < first, "{first} -> {last}");
    assert!(r.log.iter().all(|e| e.lr > 0.0) && r.log.windows(2).all(|w| w[1].lr < w[0].lr));
}

#[test]
fn evaluation_matches_recounted_predictions() {
    let classes = 4;
    let (cfg, grid, data) = micro_data(classes);
    let (model, init) = build_model(cfg, grid).unwrap();
    let params = train(&model, init, &data, &TrainConfig { epochs: 2, ..tc(3) }).unwrap().params;
    let report = evaluate(&model, &params, &data.val).unwrap();
    let probs = predict_split(&model, &params, &data.val).unwrap();

    // [class][tp, fp, fn]; row 0 is occupancy
    let mut counts = vec![[0u64; 3]; classes];
    for (p, ex) in probs.iter().zip(&data.val) {
        let v = p.volume();
        let n = v.voxels();
        for (i, &t) in ex.labels.data().iter().enumerate() {
            let mut pred = 0;
            for k in 1..classes {
                if v.data()[k * n + i] > v.data()[pred * n + i] {
                    pred = k;
                }
            }
            let mut bump = |k: usize, hit_p: bool, hit_t: bool| match (hit_p, hit_t) {
                (true, true) => counts[k][0] += 1,
                (true, false) => counts[k][1] += 1,
                (false, true) => counts[k][2] += 1,
                _ => {}
            };
            bump(0, pred != 0, t != 0);
            for k in 1..classes {
                bump(k, pred == k, t == k);
            }
        }
    }
    let iou = |c: [u64; 3]| {
        let den = c[0] + c[1] + c[2];
        if den == 0 {
            1.0
        } else {
            c[0] as f64 / den as f64
        }
    };
    assert_eq!(report.sc_iou, iou(counts[0]));
    let per: Vec<f64> = (1..classes).map(|k| iou(counts[k])).collect();
    assert_eq!(report.per_class_iou, per);
    assert!((report.miou - per.iter().sum::<f64>() / per.len() as f64).abs() < 1e-15);
}
