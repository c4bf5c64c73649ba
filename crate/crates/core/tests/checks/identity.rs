use amaa_core::attention::{attention_stage, AttentionConfig};
use amaa_core::camera::CameraGrid;
use amaa_core::model::{build_model, ModelConfig, Variant};
use amaa_core::rng::SplitMix64;
use amaa_core::{Image2D, ParamStore, Tensor, VoxelVolume};

fn bits(v: &VoxelVolume) -> Vec<u64> {
    v.data().iter().map(|x| x.to_bits()).collect()
}

pub fn fresh_attention_stage_is_bitwise_identity() {
    let configs = [(true, true), (true, false), (false, true)];
    for i in 0..100u64 {
        let mut rng = SplitMix64::new(i);
        let dims = [
            rng.range_inclusive(1, 8),
            rng.range_inclusive(1, 5),
            rng.range_inclusive(1, 5),
            rng.range_inclusive(1, 5),
        ];
        let v = VoxelVolume::from_fn(dims, |_, _, _, _| rng.uniform(-4.0, 4.0));
        let (use_se, use_simam) = configs[i as usize % 3];
        let cfg = AttentionConfig {
            use_se,
            use_simam,
            ..AttentionConfig::default()
        };
        let mut store = ParamStore::new();
        cfg.register(&mut store, "att", dims[0], i).unwrap();
        assert_eq!(store.value("att.agg.gamma").unwrap().data(), &[0.0]);
        let out = attention_stage(&v, &store, "att", &cfg).unwrap();
        assert_eq!(bits(&out), bits(&v), "volume {i}");
    }
}

fn randomized(store: &ParamStore, seed: u64) -> ParamStore {
    let mut rng = SplitMix64::new(seed);
    let mut s = store.clone();
    for name in s.names() {
        let shape = s.value(&name).unwrap().shape().to_vec();
        let n = shape.iter().product();
        s.set_value(&name, Tensor::new(shape, (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap())
            .unwrap();
    }
    s
}

pub fn zero_alpha_equals_pipeline_without_injection() {
    let grid = CameraGrid::default();
    let gated = ModelConfig {
        alpha: 0.0,
        ..ModelConfig::default().with_variant(Variant::D)
    };
    let deleted = ModelConfig {
        inject_skips: false,
        ..gated.clone()
    };
    let (m_gated, init) = build_model(gated, grid.clone()).unwrap();
    let (m_deleted, init_deleted) = build_model(deleted, grid.clone()).unwrap();
    assert!(init_deleted.names().iter().all(|n| init.contains(n)));
    assert!(init.names().iter().any(|n| n.contains(".afg.")));
    assert!(!init_deleted.names().iter().any(|n| n.contains(".afg.")));
    for i in 0..10u64 {
        // trained-looking weights: every gate and skip carries signal
        let params = randomized(&init, 100 + i);
        let mut rng = SplitMix64::new(i);
        let (r, c) = (grid.image_rows, grid.image_cols);
        let img = Image2D::new(3, r, c, (0..3 * r * c).map(|_| rng.next_f64()).collect()).unwrap();
        let a = m_gated.forward(&params, &img).unwrap();
        let b = m_deleted.forward(&params, &img).unwrap();
        assert_eq!(bits(a.volume()), bits(b.volume()), "input {i}");
    }
}
