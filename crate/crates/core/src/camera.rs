//! Pinhole camera, voxel-grid geometry and feature lifting.
//!
//! Axis convention: voxel `(d, h, w)` has its center at
//! `origin + voxel_size * (w + ½, h + ½, d + ½)` as `(x, y, z)` in the grid
//! frame; `x` points right, `y` down and `z` forward, so `d` indexes depth
//! slabs in front of the camera. An optional rigid pose maps the grid frame
//! into the camera frame; without one the frames coincide.
//!
//! Image coordinates are continuous: pixel `(row, col)` covers
//! `[col, col + 1) × [row, row + 1)`, so its center is at `col + ½`. This
//! makes downscaling an image by `s` equivalent to dividing `fx, fy, cx, cy`
//! by `s`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AmaaError, Result};
use crate::tape::{CustomOp, Tape, Var};
use crate::tensor::{Image2D, Tensor, VoxelVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    /// Row-major rotation, grid frame to camera frame.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [0, 1, 2].map(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + self.translation[i])
    }

    /// Camera-frame point to grid frame.
    pub fn apply_inverse(&self, p: [f64; 3]) -> [f64; 3] {
        let q = [0, 1, 2].map(|i| p[i] - self.translation[i]);
        let r = &self.rotation;
        [0, 1, 2].map(|j| r[0][j] * q[0] + r[1][j] * q[1] + r[2][j] * q[2])
    }

    /// Camera-frame direction to grid frame.
    pub fn rotate_inverse(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [0, 1, 2].map(|j| r[0][j] * v[0] + r[1][j] * v[1] + r[2][j] * v[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraGrid {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_rows: usize,
    pub image_cols: usize,
    /// Grid corner in meters.
    pub origin: [f64; 3],
    pub voxel_size: f64,
    /// `(D, H, W)`.
    pub dims: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<Pose>,
}

impl Default for CameraGrid {
    /// Desk-scale setup: 64×48 image, 16×12×16 grid of 8 cm voxels whose
    /// frustum-facing slab starts 1 m in front of the camera.
    fn default() -> Self {
        let dims = [16, 12, 16];
        let vs = 0.08;
        Self {
            fx: 48.0,
            fy: 48.0,
            cx: 32.0,
            cy: 24.0,
            image_rows: 48,
            image_cols: 64,
            origin: [-(dims[2] as f64) * vs / 2.0, -(dims[1] as f64) * vs / 2.0, 1.0],
            voxel_size: vs,
            dims,
            pose: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    /// False when the center lies at or behind the camera plane.
    pub valid: bool,
}

impl CameraGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(AmaaError::Config("fx and fy must be > 0".into()));
        }
        if !(self.voxel_size > 0.0) {
            return Err(AmaaError::Config("voxel_size must be > 0".into()));
        }
        if self.dims.contains(&0) {
            return Err(AmaaError::Config(format!("grid dims must be >= 1, got {:?}", self.dims)));
        }
        if self.image_rows == 0 || self.image_cols == 0 {
            return Err(AmaaError::Config("image size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel_center_grid(&self, d: usize, h: usize, w: usize) -> [f64; 3] {
        let s = self.voxel_size;
        [
            self.origin[0] + s * (w as f64 + 0.5),
            self.origin[1] + s * (h as f64 + 0.5),
            self.origin[2] + s * (d as f64 + 0.5),
        ]
    }

    pub fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        match &self.pose {
            Some(pose) => pose.apply(p),
            None => p,
        }
    }

    pub fn project_point(&self, p_cam: [f64; 3]) -> Projection {
        let [x, y, z] = p_cam;
        if z <= 0.0 {
            return Projection {
                u: f64::NAN,
                v: f64::NAN,
                z,
                valid: false,
            };
        }
        Projection {
            u: self.fx * x / z + self.cx,
            v: self.fy * y / z + self.cy,
            z,
            valid: true,
        }
    }

    /// Same camera with the intrinsics of an image downscaled by `(sy, sx)`.
    pub fn with_image_scale(&self, rows: usize, cols: usize) -> CameraGrid {
        let sx = self.image_cols as f64 / cols as f64;
        let sy = self.image_rows as f64 / rows as f64;
        CameraGrid {
            fx: self.fx / sx,
            fy: self.fy / sy,
            cx: self.cx / sx,
            cy: self.cy / sy,
            image_rows: rows,
            image_cols: cols,
            ..self.clone()
        }
    }

    /// Same frustum at a coarser grid: voxels `2^power` times larger, extents
    /// divided by `2^power` and rounded up.
    pub fn coarsened(&self, power: u32) -> CameraGrid {
        let f = 1usize << power;
        CameraGrid {
            voxel_size: self.voxel_size * f as f64,
            dims: self.dims.map(|n| n.div_ceil(f)),
            ..self.clone()
        }
    }

    /// True when a horizontal image flip corresponds to mirroring the grid
    /// along `w` (principal point centered, grid centered on the optical axis,
    /// no pose).
    pub fn is_mirror_symmetric(&self) -> bool {
        let half_w = self.dims[2] as f64 * self.voxel_size / 2.0;
        self.pose.is_none()
            && (self.cx - self.image_cols as f64 / 2.0).abs() < 1e-12
            && (self.origin[0] + half_w).abs() < 1e-12
    }
}

/// Projects every voxel center, in `(d, h, w)` row-major order.
pub fn project_voxel_centers(grid: &CameraGrid) -> Vec<Projection> {
    let [d, h, w] = grid.dims;
    let mut out = Vec::with_capacity(d * h * w);
    for a in 0..d {
        for b in 0..h {
            for c in 0..w {
                out.push(grid.project_point(grid.to_camera(grid.voxel_center_grid(a, b, c))));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    Nearest,
    #[default]
    Bilinear,
}

/// One feature-pyramid level lifted into one voxel resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleLevel {
    /// Index into the 2D feature pyramid.
    pub feature_level: usize,
    /// Grid coarsening: voxel resolution is the full grid divided by `2^power`.
    pub power: u32,
}

/// Ordered fine → coarse list of lifted scales.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScaleMap(pub Vec<ScaleLevel>);

impl ScaleMap {
    pub fn new(levels: Vec<ScaleLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(AmaaError::Config("scale map is empty".into()));
        }
        if levels.windows(2).any(|w| w[1].power <= w[0].power) {
            return Err(AmaaError::Config("scale map must be ordered fine to coarse".into()));
        }
        Ok(Self(levels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn levels(&self) -> &[ScaleLevel] {
        &self.0
    }

    pub fn resolution(&self, grid: &CameraGrid, i: usize) -> [usize; 3] {
        grid.coarsened(self.0[i].power).dims
    }
}

impl Default for ScaleMap {
    fn default() -> Self {
        ScaleMap(vec![
            ScaleLevel {
                feature_level: 1,
                power: 0,
            },
            ScaleLevel {
                feature_level: 2,
                power: 1,
            },
        ])
    }
}

/// Sparse voxel-from-pixel sampling matrix in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftPlan {
    pub dims: [usize; 3],
    pub rows: usize,
    pub cols: usize,
    start: Vec<usize>,
    pixel: Vec<usize>,
    weight: Vec<f64>,
}

impl LiftPlan {
    /// Sampling plan of a `rows × cols` feature map into the grid at
    /// `resolution`. Intrinsics are rescaled to the feature-map size.
    pub fn new(grid: &CameraGrid, resolution: [usize; 3], rows: usize, cols: usize, sampling: Sampling) -> Result<Self> {
        grid.validate()?;
        let power = (0..16)
            .find(|&p| grid.coarsened(p).dims == resolution)
            .ok_or_else(|| {
                AmaaError::Shape(format!(
                    "resolution {resolution:?} is not a power-of-two coarsening of {:?}",
                    grid.dims
                ))
            })?;
        let g = grid.coarsened(power).with_image_scale(rows, cols);
        let mut start = vec![0];
        let mut pixel = Vec::new();
        let mut weight = Vec::new();
        for p in project_voxel_centers(&g) {
            let inside = p.valid && p.u >= 0.0 && p.u < cols as f64 && p.v >= 0.0 && p.v < rows as f64;
            if inside {
                match sampling {
                    Sampling::Nearest => {
                        pixel.push(p.v.floor() as usize * cols + p.u.floor() as usize);
                        weight.push(1.0);
                    }
                    Sampling::Bilinear => {
                        let x = (p.u - 0.5).clamp(0.0, (cols - 1) as f64);
                        let y = (p.v - 0.5).clamp(0.0, (rows - 1) as f64);
                        let (j0, i0) = (x.floor() as usize, y.floor() as usize);
                        let (j1, i1) = ((j0 + 1).min(cols - 1), (i0 + 1).min(rows - 1));
                        let (tx, ty) = (x - j0 as f64, y - i0 as f64);
                        for (i, j, w) in [
                            (i0, j0, (1.0 - ty) * (1.0 - tx)),
                            (i0, j1, (1.0 - ty) * tx),
                            (i1, j0, ty * (1.0 - tx)),
                            (i1, j1, ty * tx),
                        ] {
                            if w != 0.0 {
                                pixel.push(i * cols + j);
                                weight.push(w);
                            }
                        }
                    }
                }
            }
            start.push(pixel.len());
        }
        Ok(Self {
            dims: resolution,
            rows,
            cols,
            start,
            pixel,
            weight,
        })
    }

    pub fn voxel_count(&self) -> usize {
        self.start.len() - 1
    }

    /// `(pixel index, weight)` taps of voxel `i`; empty for unsampled voxels.
    pub fn taps(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.start[i]..self.start[i + 1];
        self.pixel[r.clone()].iter().copied().zip(self.weight[r].iter().copied())
    }

    fn apply(&self, img: &[f64], channels: usize) -> Vec<f64> {
        let (np, nv) = (self.rows * self.cols, self.voxel_count());
        let mut out = vec![0.0; channels * nv];
        for c in 0..channels {
            let src = &img[c * np..(c + 1) * np];
            for v in 0..nv {
                let mut acc = 0.0;
                for (p, w) in self.taps(v) {
                    acc += w * src[p];
                }
                out[c * nv + v] = acc;
            }
        }
        out
    }

    fn apply_adjoint(&self, grad: &[f64], channels: usize) -> Vec<f64> {
        let (np, nv) = (self.rows * self.cols, self.voxel_count());
        let mut out = vec![0.0; channels * np];
        for c in 0..channels {
            for v in 0..nv {
                let g = grad[c * nv + v];
                for (p, w) in self.taps(v) {
                    out[c * np + p] += w * g;
                }
            }
        }
        out
    }

    fn check_image(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [c, r, w] | [c, 1, r, w] if r == self.rows && w == self.cols => Ok(c),
            _ => shape_err(format!(
                "lift plan expects a {}x{} feature map, got {shape:?}",
                self.rows, self.cols
            )),
        }
    }

    pub fn lift(&self, features: &Image2D) -> Result<VoxelVolume> {
        let c = self.check_image(features.as_tensor().shape())?;
        let [d, h, w] = self.dims;
        VoxelVolume::new([c, d, h, w], self.apply(features.data(), c))
    }
}

#[derive(Debug)]
struct LiftOp(Arc<LiftPlan>);

impl CustomOp for LiftOp {
    fn name(&self) -> &'static str {
        "lift"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let c = self.0.check_image(inputs[0].shape())?;
        let [d, h, w] = self.0.dims;
        Tensor::new(vec![c, d, h, w], self.0.apply(inputs[0].data(), c))
    }

    fn backward(&self, inputs: &[&Tensor], _out: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let c = inputs[0].shape()[0];
        let g = self.0.apply_adjoint(grad.data(), c);
        vec![Some(Tensor::new(inputs[0].shape().to_vec(), g).expect("same shape"))]
    }
}

/// Records a lift of the feature-map node `features` on the tape.
pub fn record_lift(tape: &mut Tape, features: Var, plan: Arc<LiftPlan>) -> Result<Var> {
    tape.custom(&[features], Arc::new(LiftOp(plan)))
}

/// Samples `features` (rows × cols at some pyramid level) into the grid at `resolution`.
pub fn flosp_lift(features: &Image2D, grid: &CameraGrid, resolution: [usize; 3], sampling: Sampling) -> Result<VoxelVolume> {
    LiftPlan::new(grid, resolution, features.rows(), features.cols(), sampling)?.lift(features)
}

/// Lifts entry `i` of `pyramid` at scale `i` of `scales`; finest first.
pub fn multi_scale_lift(pyramid: &[Image2D], grid: &CameraGrid, scales: &ScaleMap, sampling: Sampling) -> Result<Vec<VoxelVolume>> {
    if pyramid.len() != scales.len() {
        return Err(AmaaError::Config(format!(
            "pyramid has {} levels but the scale map has {}",
            pyramid.len(),
            scales.len()
        )));
    }
    pyramid
        .iter()
        .enumerate()
        .map(|(i, f)| flosp_lift(f, grid, scales.resolution(grid, i), sampling))
        .collect()
}
