use std::collections::HashMap;

use amaa_core::camera::{flosp_lift, project_voxel_centers, CameraGrid, Pose, Sampling};
use amaa_core::rng::SplitMix64;
use amaa_core::Image2D;

pub const GEOMETRIES: u64 = 32;

/// Random intrinsics and grid; every third geometry is yawed and shifted so
/// part of the grid sits behind the camera.
fn random_grid(rng: &mut SplitMix64, i: u64) -> CameraGrid {
    let rows = rng.range_inclusive(4, 12);
    let cols = rng.range_inclusive(4, 12);
    let dims = [rng.range_inclusive(2, 6), rng.range_inclusive(2, 6), rng.range_inclusive(2, 6)];
    let vs = rng.uniform(0.05, 0.3);
    let pose = (i % 3 == 0).then(|| {
        let t: f64 = rng.uniform(0.6, 1.4);
        let (s, c) = t.sin_cos();
        Pose {
            rotation: [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
            translation: [0.0, 0.0, rng.uniform(-0.2, 0.2)],
        }
    });
    CameraGrid {
        fx: rng.uniform(3.0, 12.0),
        fy: rng.uniform(3.0, 12.0),
        cx: rng.uniform(0.0, cols as f64),
        cy: rng.uniform(0.0, rows as f64),
        image_rows: rows,
        image_cols: cols,
        origin: [
            rng.uniform(-1.0, 0.0),
            rng.uniform(-1.0, 0.0),
            rng.uniform(0.2, 1.0),
        ],
        voxel_size: vs,
        dims,
        pose,
    }
}

fn random_image(rng: &mut SplitMix64, channels: usize, rows: usize, cols: usize) -> Image2D {
    Image2D::new(channels, rows, cols, (0..channels * rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn inside(grid: &CameraGrid, u: f64, v: f64) -> bool {
    u >= 0.0 && u < grid.image_cols as f64 && v >= 0.0 && v < grid.image_rows as f64
}

pub fn lifting_is_linear_in_the_feature_map() {
    for i in 0..GEOMETRIES {
        let mut rng = SplitMix64::new(i);
        let grid = random_grid(&mut rng, i);
        let (r, c) = (grid.image_rows, grid.image_cols);
        let f = random_image(&mut rng, 2, r, c);
        let g = random_image(&mut rng, 2, r, c);
        let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let mix = Image2D::new(2, r, c, f.data().iter().zip(g.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
        for sampling in [Sampling::Nearest, Sampling::Bilinear] {
            let lf = flosp_lift(&f, &grid, grid.dims, sampling).unwrap();
            let lg = flosp_lift(&g, &grid, grid.dims, sampling).unwrap();
            let lm = flosp_lift(&mix, &grid, grid.dims, sampling).unwrap();
            for ((m, x), y) in lm.data().iter().zip(lf.data()).zip(lg.data()) {
                assert!((m - (a * x + b * y)).abs() <= 1e-12, "geometry {i} {sampling:?}");
            }
        }
    }
}

pub fn nearest_mode_shares_features_along_rays() {
    let mut shared_groups = 0;
    for i in 0..GEOMETRIES {
        let mut rng = SplitMix64::new(1000 + i);
        let grid = random_grid(&mut rng, i);
        let img = random_image(&mut rng, 3, grid.image_rows, grid.image_cols);
        let lifted = flosp_lift(&img, &grid, grid.dims, Sampling::Nearest).unwrap();
        let n = grid.voxel_count();
        let mut by_pixel: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (k, p) in project_voxel_centers(&grid).iter().enumerate() {
            if p.valid && inside(&grid, p.u, p.v) {
                let px = (p.v.floor() as usize, p.u.floor() as usize);
                by_pixel.entry(px).or_default().push(k);
                for ch in 0..3 {
                    assert_eq!(lifted.data()[ch * n + k], img.get(ch, px.0, px.1), "geometry {i}");
                }
            }
        }
        for voxels in by_pixel.values().filter(|v| v.len() > 1) {
            shared_groups += 1;
            for ch in 0..3 {
                let first = lifted.data()[ch * n + voxels[0]];
                assert!(voxels.iter().all(|&k| lifted.data()[ch * n + k] == first));
            }
        }
    }
    assert!(shared_groups > 0, "no two voxels ever shared a pixel");
}

pub fn unobserved_voxels_are_zero() {
    let (mut behind, mut outside) = (0, 0);
    for i in 0..GEOMETRIES {
        let mut rng = SplitMix64::new(2000 + i);
        let grid = random_grid(&mut rng, i);
        let img = random_image(&mut rng, 2, grid.image_rows, grid.image_cols);
        let n = grid.voxel_count();
        let projections = project_voxel_centers(&grid);
        for sampling in [Sampling::Nearest, Sampling::Bilinear] {
            let lifted = flosp_lift(&img, &grid, grid.dims, sampling).unwrap();
            for (k, p) in projections.iter().enumerate() {
                if !p.valid || !inside(&grid, p.u, p.v) {
                    for ch in 0..2 {
                        assert_eq!(lifted.data()[ch * n + k], 0.0, "geometry {i} voxel {k}");
                    }
                }
            }
        }
        behind += projections.iter().filter(|p| !p.valid).count();
        outside += projections.iter().filter(|p| p.valid && !inside(&grid, p.u, p.v)).count();
    }
    assert!(behind > 0 && outside > 0, "behind {behind}, outside {outside}");
}
