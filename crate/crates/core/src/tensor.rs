//! Dense row-major tensors of `f64`.
//!
//! [`Tensor`] is the untyped carrier stored on the tape and in the parameter
//! store. [`VoxelVolume`] and [`Image2D`] are shape-checked views used at API
//! boundaries: a volume is `(C, D, H, W)` channel-first and an image is
//! `(C, rows, cols)`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AmaaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// The same data viewed with a different shape of equal element count.
    pub fn reshaped(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Interprets the shape as `(C, D, H, W)`; rank-3 tensors are treated as
    /// `(C, 1, H, W)` and rank-1 as `(C, 1, 1, 1)`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [c, d, h, w] => Ok([c, d, h, w]),
            [c, h, w] => Ok([c, 1, h, w]),
            [c] => Ok([c, 1, 1, 1]),
            _ => shape_err(format!("expected a volume-like shape, got {:?}", self.shape)),
        }
    }
}

/// Channel-first volume `(C, D, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelVolume(Tensor);

impl VoxelVolume {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Ok(Self(Tensor::new(dims.to_vec(), data)?))
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self(Tensor::zeros(&dims))
    }

    pub fn full(dims: [usize; 4], value: f64) -> Self {
        Self(Tensor::full(&dims, value))
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let [c, d, h, w] = dims;
        let mut data = Vec::with_capacity(c * d * h * w);
        for ci in 0..c {
            for di in 0..d {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(ci, di, hi, wi));
                    }
                }
            }
        }
        Self(Tensor {
            shape: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn spatial(&self) -> [usize; 3] {
        let [_, d, h, w] = self.dims();
        [d, h, w]
    }

    pub fn voxels(&self) -> usize {
        let [_, d, h, w] = self.dims();
        d * h * w
    }

    #[inline]
    pub fn index(&self, c: usize, d: usize, h: usize, w: usize) -> usize {
        let [_, dd, hh, ww] = self.dims();
        ((c * dd + d) * hh + h) * ww + w
    }

    #[inline]
    pub fn get(&self, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.0.data[self.index(c, d, h, w)]
    }

    pub fn set(&mut self, c: usize, d: usize, h: usize, w: usize, value: f64) {
        let i = self.index(c, d, h, w);
        self.0.data[i] = value;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.0.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

impl TryFrom<Tensor> for VoxelVolume {
    type Error = AmaaError;

    fn try_from(t: Tensor) -> Result<Self> {
        let dims = t.dims4()?;
        Ok(Self(t.reshaped(dims.to_vec())?))
    }
}

impl From<VoxelVolume> for Tensor {
    fn from(v: VoxelVolume) -> Tensor {
        v.0
    }
}

/// Channel-first image `(C, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D(Tensor);

impl Image2D {
    pub fn new(channels: usize, rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Ok(Self(Tensor::new(vec![channels, rows, cols], data)?))
    }

    pub fn zeros(channels: usize, rows: usize, cols: usize) -> Self {
        Self(Tensor::zeros(&[channels, rows, cols]))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.0.shape()[2]
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f64 {
        self.0.data[(c * self.rows() + r) * self.cols() + col]
    }

    pub fn set(&mut self, c: usize, r: usize, col: usize, value: f64) {
        let i = (c * self.rows() + r) * self.cols() + col;
        self.0.data[i] = value;
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        self.0.data_mut()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Mirror along the column axis.
    pub fn flip_horizontal(&self) -> Image2D {
        let (c, r, w) = (self.channels(), self.rows(), self.cols());
        let mut out = Image2D::zeros(c, r, w);
        for ci in 0..c {
            for ri in 0..r {
                for x in 0..w {
                    out.set(ci, ri, x, self.get(ci, ri, w - 1 - x));
                }
            }
        }
        out
    }

    /// View as a `(C, 1, rows, cols)` volume.
    pub fn to_volume(&self) -> VoxelVolume {
        VoxelVolume(Tensor {
            shape: vec![self.channels(), 1, self.rows(), self.cols()],
            data: self.0.data.clone(),
        })
    }

    pub fn from_volume(v: VoxelVolume) -> Result<Self> {
        let [c, d, h, w] = v.dims();
        if d != 1 {
            return shape_err(format!("image volume must have depth 1, got {d}"));
        }
        Image2D::new(c, h, w, v.0.data)
    }
}

impl TryFrom<Tensor> for Image2D {
    type Error = AmaaError;

    fn try_from(t: Tensor) -> Result<Self> {
        let [c, d, h, w] = t.dims4()?;
        if d != 1 {
            return shape_err(format!("image tensor must have depth 1, got {d}"));
        }
        Ok(Self(t.reshaped(vec![c, h, w])?))
    }
}
