//! Procedural desk-scale rooms and a first-hit RGB renderer.
//!
//! A room is a floor slab (bottom `h` row), a back wall (last `d` slab) and
//! a left wall (first `w` column), plus axis-aligned boxes standing on the
//! floor. Class 0 is free space, 1 floor, 2 wall, and the remaining ids are
//! object categories.

use serde::{Deserialize, Serialize};

use crate::camera::CameraGrid;
use crate::error::{AmaaError, Result};
use crate::objective::LabelVolume;
use crate::rng::SplitMix64;
use crate::tensor::Image2D;

pub const FLOOR_CLASS: usize = 1;
pub const WALL_CLASS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    /// `(D, H, W)` in voxels; must equal the camera grid dims.
    pub dims: [usize; 3],
    pub classes: usize,
    /// Base RGB per class id; entry 0 is unused.
    pub palette: Vec<[f64; 3]>,
    /// Inclusive range of box counts.
    pub objects: [usize; 2],
    /// Inclusive range of box edge lengths in voxels.
    pub object_size: [usize; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            dims: [16, 12, 16],
            classes: 5,
            palette: default_palette(5),
            objects: [2, 4],
            object_size: [2, 5],
        }
    }
}

/// Black for class 0, then hues evenly spaced around the color wheel.
pub fn default_palette(classes: usize) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]];
    let n = classes.saturating_sub(1).max(1);
    for k in 0..classes.saturating_sub(1) {
        out.push(hue_to_rgb(k as f64 / n as f64));
    }
    out
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        1.0 - (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.dims;
        if self.classes < 2 {
            return Err(AmaaError::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if d < 3 || h < 3 || w < 3 {
            return Err(AmaaError::Config(format!(
                "room {:?} too small for floor and walls (need >= 3 per axis)",
                self.dims
            )));
        }
        if self.palette.len() != self.classes {
            return Err(AmaaError::Config(format!(
                "palette has {} colors for {} classes",
                self.palette.len(),
                self.classes
            )));
        }
        for i in 1..self.classes {
            for j in 0..i {
                if self.palette[i] == self.palette[j] {
                    return Err(AmaaError::Config(format!("palette colors {j} and {i} coincide")));
                }
            }
        }
        let [lo, hi] = self.object_size;
        if lo == 0 || lo > hi || hi > (d - 1).min(h - 1).min(w - 1) {
            return Err(AmaaError::Config(format!(
                "object_size {:?} does not fit room {:?}",
                self.object_size, self.dims
            )));
        }
        if self.objects[0] > self.objects[1] {
            return Err(AmaaError::Config(format!("objects range {:?} is inverted", self.objects)));
        }
        Ok(())
    }

    pub fn wall_class(&self) -> usize {
        WALL_CLASS.min(self.classes - 1)
    }

    /// Classes boxes are drawn from.
    pub fn object_classes(&self) -> (usize, usize) {
        ((WALL_CLASS + 1).min(self.classes - 1), self.classes - 1)
    }
}

/// Axis-aligned box in voxel coordinates, half-open `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    pub class: usize,
}

/// Draws the box list for `seed`. Draw order per box: class, size (w, h, d),
/// then position (w, d); `h` is forced so the box rests on the floor.
pub fn place_boxes(spec: &SceneSpec, seed: u64) -> Vec<PlacedBox> {
    let mut rng = SplitMix64::for_stream(seed, "scene");
    let [d, h, w] = spec.dims;
    let n = rng.range_inclusive(spec.objects[0], spec.objects[1]);
    let (c_lo, c_hi) = spec.object_classes();
    let [s_lo, s_hi] = spec.object_size;
    (0..n)
        .map(|_| {
            let class = rng.range_inclusive(c_lo, c_hi);
            let sw = rng.range_inclusive(s_lo, s_hi);
            let sh = rng.range_inclusive(s_lo, s_hi);
            let sd = rng.range_inclusive(s_lo, s_hi);
            let w0 = rng.range_inclusive(1, w - sw);
            let d0 = rng.range_inclusive(0, d - 1 - sd);
            let h1 = h - 1;
            PlacedBox {
                lo: [d0, h1 - sh, w0],
                hi: [d0 + sd, h1, w0 + sw],
                class,
            }
        })
        .collect()
}

pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabelVolume> {
    spec.validate()?;
    let [d, h, w] = spec.dims;
    let mut labels = LabelVolume::filled(spec.dims, 0);
    let wall = spec.wall_class();
    for a in 0..d {
        for c in 0..w {
            labels.set(a, h - 1, c, FLOOR_CLASS);
        }
    }
    for b in 0..h - 1 {
        for c in 0..w {
            labels.set(d - 1, b, c, wall);
        }
        for a in 0..d {
            labels.set(a, b, 0, wall);
        }
    }
    for bx in place_boxes(spec, seed) {
        for a in bx.lo[0]..bx.hi[0] {
            for b in bx.lo[1]..bx.hi[1] {
                for c in bx.lo[2]..bx.hi[2] {
                    labels.set(a, b, c, bx.class);
                }
            }
        }
    }
    Ok(labels)
}

/// First occupied voxel along a pixel ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Camera-frame depth of the entry point into the voxel.
    pub depth: f64,
    /// `(d, h, w)`
    pub voxel: [usize; 3],
    pub class: usize,
}

/// Camera center and ray direction in the grid frame for the pixel-center
/// ray through `(row, col)`. The direction has unit camera-frame depth, so
/// the ray parameter equals depth.
pub fn pixel_ray(grid: &CameraGrid, row: usize, col: usize) -> ([f64; 3], [f64; 3]) {
    let dir_cam = [
        (col as f64 + 0.5 - grid.cx) / grid.fx,
        (row as f64 + 0.5 - grid.cy) / grid.fy,
        1.0,
    ];
    match &grid.pose {
        Some(p) => (p.apply_inverse([0.0; 3]), p.rotate_inverse(dir_cam)),
        None => ([0.0; 3], dir_cam),
    }
}

/// Ray/box slab test; `(t_enter, t_exit)` when the ray meets the box at `t >= 0`.
pub fn ray_box(o: [f64; 3], dir: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for i in 0..3 {
        if dir[i] == 0.0 {
            if o[i] < lo[i] || o[i] >= hi[i] {
                return None;
            }
        } else {
            let a = (lo[i] - o[i]) / dir[i];
            let b = (hi[i] - o[i]) / dir[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    (t0 < t1).then_some((t0, t1))
}

/// Exact grid traversal (Amanatides–Woo) to the first non-empty voxel.
pub fn first_hit(labels: &LabelVolume, grid: &CameraGrid, o: [f64; 3], dir: [f64; 3]) -> Option<Hit> {
    let [nd, nh, nw] = grid.dims;
    // grid axes in (x, y, z) order are (w, h, d)
    let n = [nw, nh, nd];
    let vs = grid.voxel_size;
    let lo = grid.origin;
    let hi = [0, 1, 2].map(|i| lo[i] + vs * n[i] as f64);
    let (t_in, t_out) = ray_box(o, dir, lo, hi)?;
    let mut cell = [0usize; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0isize; 3];
    for i in 0..3 {
        let p = o[i] + t_in * dir[i];
        let c = ((p - lo[i]) / vs).floor().clamp(0.0, (n[i] - 1) as f64) as usize;
        cell[i] = c;
        if dir[i] > 0.0 {
            step[i] = 1;
            t_max[i] = (lo[i] + vs * (c + 1) as f64 - o[i]) / dir[i];
            t_delta[i] = vs / dir[i];
        } else if dir[i] < 0.0 {
            step[i] = -1;
            t_max[i] = (lo[i] + vs * c as f64 - o[i]) / dir[i];
            t_delta[i] = -vs / dir[i];
        }
    }
    let mut t = t_in;
    loop {
        let class = labels.get(cell[2], cell[1], cell[0]);
        if class != 0 {
            return Some(Hit {
                depth: t,
                voxel: [cell[2], cell[1], cell[0]],
                class,
            });
        }
        let axis = (0..3).min_by(|&a, &b| t_max[a].total_cmp(&t_max[b])).unwrap();
        t = t_max[axis];
        if t >= t_out {
            return None;
        }
        let next = cell[axis] as isize + step[axis];
        if next < 0 || next >= n[axis] as isize {
            return None;
        }
        cell[axis] = next as usize;
        t_max[axis] += t_delta[axis];
    }
}

/// First hit per pixel in row-major order.
pub fn first_hits(labels: &LabelVolume, grid: &CameraGrid) -> Vec<Option<Hit>> {
    let mut out = Vec::with_capacity(grid.image_rows * grid.image_cols);
    for r in 0..grid.image_rows {
        for c in 0..grid.image_cols {
            let (o, dir) = pixel_ray(grid, r, c);
            out.push(first_hit(labels, grid, o, dir));
        }
    }
    out
}

/// Pixel color is `palette[class] / (1 + depth)` of the first hit; black otherwise.
pub fn render_rgb(labels: &LabelVolume, grid: &CameraGrid, palette: &[[f64; 3]]) -> Result<Image2D> {
    if labels.dims() != grid.dims {
        return Err(AmaaError::Shape(format!(
            "labels {:?} do not match grid {:?}",
            labels.dims(),
            grid.dims
        )));
    }
    if labels.max_class() >= palette.len() {
        return Err(AmaaError::Config(format!(
            "class {} has no palette color",
            labels.max_class()
        )));
    }
    let (rows, cols) = (grid.image_rows, grid.image_cols);
    let mut img = Image2D::zeros(3, rows, cols);
    for (i, hit) in first_hits(labels, grid).into_iter().enumerate() {
        if let Some(h) = hit {
            let shade = 1.0 / (1.0 + h.depth);
            for ch in 0..3 {
                img.set(ch, i / cols, i % cols, palette[h.class][ch] * shade);
            }
        }
    }
    Ok(img)
}

/// Occupied voxels that no pixel ray reaches first.
pub fn occluded_voxels(labels: &LabelVolume, grid: &CameraGrid) -> usize {
    let mut seen = vec![false; labels.len()];
    for h in first_hits(labels, grid).into_iter().flatten() {
        seen[labels.index(h.voxel[0], h.voxel[1], h.voxel[2])] = true;
    }
    labels
        .data()
        .iter()
        .zip(&seen)
        .filter(|(&c, &s)| c != 0 && !s)
        .count()
}

/// One rendered training or validation example.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub rgb: Image2D,
    pub labels: LabelVolume,
    pub grid: CameraGrid,
    pub seed: u64,
}

pub fn make_sample(spec: &SceneSpec, grid: &CameraGrid, seed: u64) -> Result<SceneSample> {
    if spec.dims != grid.dims {
        return Err(AmaaError::Config(format!(
            "scene dims {:?} do not match grid dims {:?}",
            spec.dims, grid.dims
        )));
    }
    let labels = generate_scene(spec, seed)?;
    let rgb = render_rgb(&labels, grid, &spec.palette)?;
    Ok(SceneSample {
        rgb,
        labels,
        grid: grid.clone(),
        seed,
    })
}
