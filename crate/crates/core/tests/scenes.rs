use std::collections::HashSet;

use amaa_core::camera::{CameraGrid, Pose};
use amaa_core::dataset::{split_seeds, Dataset};
use amaa_core::objective::LabelVolume;
use amaa_core::rng::SplitMix64;
use amaa_core::scene::{first_hits, generate_scene, pixel_ray, place_boxes, render_rgb, SceneSpec, FLOOR_CLASS};

/// Entry parameter of the ray into `[lo, hi]`, found by clipping against
/// each slab pair independently of the library's slab test.
fn entry(o: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<f64> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-300 {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
            continue;
        }
        let (a, b) = ((lo[i] - o[i]) / dir[i], (hi[i] - o[i]) / dir[i]);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    // grazing contacts are ambiguous; require a real chord
    (t1 - t0 > 1e-9).then_some(t0)
}

fn random_grid(rng: &mut SplitMix64, posed: bool) -> CameraGrid {
    CameraGrid {
        fx: rng.uniform(4.0, 10.0),
        fy: rng.uniform(4.0, 10.0),
        cx: rng.uniform(2.0, 6.0),
        cy: rng.uniform(2.0, 6.0),
        image_rows: 8,
        image_cols: 8,
        origin: [rng.uniform(-1.0, -0.2), rng.uniform(-1.0, -0.2), rng.uniform(0.3, 1.5)],
        voxel_size: rng.uniform(0.2, 0.5),
        dims: [4, 4, 4],
        pose: posed.then(|| {
            let t: f64 = rng.uniform(-0.3, 0.3);
            let (s, c) = t.sin_cos();
            Pose {
                rotation: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
                translation: [rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.0],
            }
        }),
    }
}

#[test]
fn renderer_matches_exhaustive_ray_box_oracle() {
    let mut hits = 0;
    for i in 0..40u64 {
        let mut rng = SplitMix64::new(i);
        let grid = random_grid(&mut rng, i % 2 == 1);
        let labels = LabelVolume::new([4, 4, 4], (0..64).map(|_| if rng.next_f64() < 0.2 { rng.range_inclusive(1, 4) } else { 0 }).collect()).unwrap();
        let vs = grid.voxel_size;
        for (p, hit) in first_hits(&labels, &grid).into_iter().enumerate() {
            let (o, dir) = pixel_ray(&grid, p / 8, p % 8);
            let mut best: Option<(f64, usize)> = None;
            for d in 0..4 {
                for h in 0..4 {
                    for w in 0..4 {
                        let class = labels.get(d, h, w);
                        if class == 0 {
                            continue;
                        }
                        let lo = [
                            grid.origin[0] + vs * w as f64,
                            grid.origin[1] + vs * h as f64,
                            grid.origin[2] + vs * d as f64,
                        ];
                        let hi = lo.map(|x| x + vs);
                        if let Some(t) = entry(o, dir, lo, hi) {
                            if best.map_or(true, |(b, _)| t < b) {
                                best = Some((t, class));
                            }
                        }
                    }
                }
            }
            match (hit, best) {
                (Some(h), Some((t, _))) => {
                    hits += 1;
                    assert!((h.depth - t).abs() < 1e-9, "geometry {i} pixel {p}: {} vs {t}", h.depth);
                }
                (None, None) => {}
                // a ray that only grazes an edge may go either way
                (Some(h), None) => assert!(labels.get(h.voxel[0], h.voxel[1], h.voxel[2]) != 0),
                (None, Some((t, _))) => panic!("geometry {i} pixel {p}: oracle hit at {t}, renderer missed"),
            }
        }
    }
    assert!(hits > 100, "only {hits} hits");
}

#[test]
fn render_shades_by_depth_and_leaves_misses_black() {
    let spec = SceneSpec::default();
    let grid = CameraGrid::default();
    let labels = generate_scene(&spec, 3).unwrap();
    let img = render_rgb(&labels, &grid, &spec.palette).unwrap();
    let cols = grid.image_cols;
    for (p, hit) in first_hits(&labels, &grid).into_iter().enumerate() {
        for ch in 0..3 {
            let expected = hit.map_or(0.0, |h| spec.palette[h.class][ch] / (1.0 + h.depth));
            assert_eq!(img.get(ch, p / cols, p % cols), expected);
        }
    }
}

/// Replays the box list onto the room shell.
fn scene_oracle(spec: &SceneSpec, seed: u64) -> Vec<usize> {
    let [nd, nh, nw] = spec.dims;
    let boxes = place_boxes(spec, seed);
    let mut out = Vec::with_capacity(nd * nh * nw);
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let inside = |b: &&amaa_core::scene::PlacedBox| {
                    (b.lo[0]..b.hi[0]).contains(&d) && (b.lo[1]..b.hi[1]).contains(&h) && (b.lo[2]..b.hi[2]).contains(&w)
                };
                out.push(if h == nh - 1 {
                    FLOOR_CLASS
                } else if d == nd - 1 || w == 0 {
                    spec.wall_class()
                } else {
                    boxes.iter().rev().find(inside).map_or(0, |b| b.class)
                });
            }
        }
    }
    out
}

#[test]
fn scenes_match_replayed_layout() {
    let spec = SceneSpec::default();
    let (c_lo, c_hi) = spec.object_classes();
    for seed in 0..200u64 {
        let labels = generate_scene(&spec, seed).unwrap();
        assert_eq!(labels.data(), scene_oracle(&spec, seed).as_slice(), "seed {seed}");
        let boxes = place_boxes(&spec, seed);
        assert!((spec.objects[0]..=spec.objects[1]).contains(&boxes.len()));
        for b in boxes {
            assert!((c_lo..=c_hi).contains(&b.class));
            for a in 0..3 {
                assert!((spec.object_size[0]..=spec.object_size[1]).contains(&(b.hi[a] - b.lo[a])));
            }
        }
        let hist = labels.histogram(spec.classes);
        assert_eq!(hist.iter().sum::<u64>() as usize, labels.len());
    }
}

#[test]
fn dataset_is_deterministic_and_splits_are_disjoint() {
    let spec = SceneSpec::default();
    let grid = CameraGrid::default();
    let a = Dataset::generate(&spec, &grid, 6, 3, 42).unwrap();
    let b = Dataset::generate(&spec, &grid, 6, 3, 42).unwrap();
    assert_eq!(a, b);
    let c = Dataset::generate(&spec, &grid, 6, 3, 43).unwrap();
    assert_ne!(a.train[0].labels, c.train[0].labels);

    for seed in 0..50u64 {
        let (tr, va) = split_seeds(64, 16, seed);
        let all: HashSet<u64> = tr.iter().chain(&va).copied().collect();
        assert_eq!(all.len(), 80);
    }
    let scenes: HashSet<Vec<usize>> = a.train.iter().chain(&a.val).map(|e| e.labels.data().to_vec()).collect();
    assert!(scenes.len() > 1);
}
