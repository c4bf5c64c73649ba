//! Reverse-mode differentiation over a recorded operation list.
//!
//! Each recording call evaluates its op eagerly, appends a node and returns a
//! [`Var`] handle. [`Tape::backward`] walks the nodes in exact reverse order of
//! recording, so gradient accumulation order (and therefore every bit of the
//! result) is fixed by the forward program. [`Tape::replay`] re-evaluates the
//! recorded program after leaf values change; it calls the same kernels as the
//! first pass and so reproduces identical outputs for identical leaves.

use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::Arc;

use crate::error::{shape_err, AmaaError, Result};
use crate::ops::{self, Broadcast, ConvGeom, UpsampleMode};
use crate::param::ParamStore;
use crate::tensor::{Tensor, VoxelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op implemented outside this module (camera lifting, losses).
pub trait CustomOp: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Gradient for each input given the output gradient; `None` marks an
    /// input that receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>>;

    /// Branch indicators of any non-smooth points inside the op. Ops that
    /// report kinks must also implement [`CustomOp::forward_frozen`].
    fn kinks(&self, _inputs: &[&Tensor]) -> Vec<bool> {
        Vec::new()
    }

    /// Forward pass evaluated on the branches given by `pattern`, which has
    /// the length returned by [`CustomOp::kinks`].
    fn forward_frozen(&self, inputs: &[&Tensor], _pattern: &[bool]) -> Result<Tensor> {
        self.forward(inputs)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    ClampMin0(Var),
    RecipFloor(Var, f64),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    GlobalAvgPool(Var),
    ChannelMean(Var),
    WindowMean(Var, usize),
    Concat(Var, Var),
    Upsample {
        x: Var,
        target: [usize; 3],
        mode: UpsampleMode,
    },
    Softmax(Var),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        op: Arc<dyn CustomOp>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Single-writer record of a computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Per-node gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn volume(&self, v: Var) -> Result<VoxelVolume> {
        self.value(v).clone().try_into()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Leaf bound to a named parameter. Requesting the same name twice returns
    /// the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        let v = self.push(Op::Param, value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    /// Overwrites a leaf value; call [`Tape::replay`] afterwards.
    pub fn set_leaf(&mut self, v: Var, value: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        match node.op {
            Op::Input | Op::Param => {}
            _ => return Err(AmaaError::Contract("only leaves can be overwritten".into())),
        }
        if node.value.shape() != value.shape() {
            return shape_err(format!(
                "leaf shape {:?} != {:?}",
                node.value.shape(),
                value.shape()
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Copies current parameter values from `store` into the bound leaves.
    pub fn load_params(&mut self, store: &ParamStore) -> Result<()> {
        let bound: Vec<(String, Var)> = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        for (name, v) in bound {
            self.set_leaf(v, store.value(&name)?.clone())?;
        }
        Ok(())
    }

    // ── recording ───────────────────────────────────────────────────────

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let value = eval_conv(self.value(x), self.value(w), b.map(|b| self.value(b)), stride)?;
        Ok(self.push(Op::Conv { x, w, b, stride }, value))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(ops::relu);
        self.push(Op::Relu(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(ops::sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn clamp_min0(&mut self, x: Var) -> Var {
        let value = self.value(x).map(ops::clamp_min0);
        self.push(Op::ClampMin0(x), value)
    }

    pub fn recip_floor(&mut self, x: Var, floor: f64) -> Var {
        let value = self.value(x).map(|v| ops::recip_floor(v, floor));
        self.push(Op::RecipFloor(x, floor), value)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale(x, factor), value)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x, c), value)
    }

    /// `a + b`, with `b` broadcast per [`Broadcast`].
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::binary_raw(self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::binary_raw(self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::binary_raw(self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Per-channel mean, shaped `(C, 1, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let value = eval_gap(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool(x), value))
    }

    /// Mean over channels, shaped `(1, D, H, W)`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let value = eval_channel_mean(self.value(x))?;
        Ok(self.push(Op::ChannelMean(x), value))
    }

    pub fn window_mean(&mut self, x: Var, size: usize) -> Result<Var> {
        ops::check_window(size)?;
        let value = eval_window_mean(self.value(x), size)?;
        Ok(self.push(Op::WindowMean(x, size), value))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = eval_concat(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat(a, b), value))
    }

    pub fn upsample(&mut self, x: Var, target: [usize; 3], mode: UpsampleMode) -> Result<Var> {
        let value = eval_upsample(self.value(x), target, mode)?;
        Ok(self.push(Op::Upsample { x, target, mode }, value))
    }

    /// Softmax across the channel axis at every voxel.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let value = eval_softmax(self.value(x))?;
        Ok(self.push(Op::Softmax(x), value))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), value)
    }

    pub fn custom(&mut self, inputs: &[Var], op: Arc<dyn CustomOp>) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let value = op.forward(&vals)?;
        Ok(self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
        ))
    }

    // ── replay and differentiation ──────────────────────────────────────

    fn eval(&self, op: &Op, frozen: Option<&[bool]>, kink_cursor: &mut usize) -> Result<Tensor> {
        let v = |x: &Var| &self.nodes[x.0].value;
        Ok(match op {
            Op::Input | Op::Param => unreachable!("leaves are not re-evaluated"),
            Op::Conv { x, w, b, stride } => eval_conv(v(x), v(w), b.as_ref().map(v), *stride)?,
            Op::Relu(x) | Op::ClampMin0(x) => match frozen {
                Some(mask) => frozen_map(v(x), mask, kink_cursor, |a, on| if on { a } else { 0.0 })?,
                None => v(x).map(ops::relu),
            },
            Op::RecipFloor(x, floor) => {
                let fl = *floor;
                match frozen {
                    Some(mask) => frozen_map(v(x), mask, kink_cursor, |a, on| {
                        if on {
                            1.0 / a
                        } else {
                            1.0 / fl
                        }
                    })?,
                    None => v(x).map(|a| ops::recip_floor(a, fl)),
                }
            }
            Op::Sigmoid(x) => v(x).map(ops::sigmoid),
            Op::Scale(x, f) => v(x).map(|a| a * f),
            Op::AddScalar(x, c) => v(x).map(|a| a + c),
            Op::Add(a, b) => ops::binary_raw(v(a), v(b), |x, y| x + y)?,
            Op::Sub(a, b) => ops::binary_raw(v(a), v(b), |x, y| x - y)?,
            Op::Mul(a, b) => ops::binary_raw(v(a), v(b), |x, y| x * y)?,
            Op::GlobalAvgPool(x) => eval_gap(v(x))?,
            Op::ChannelMean(x) => eval_channel_mean(v(x))?,
            Op::WindowMean(x, s) => eval_window_mean(v(x), *s)?,
            Op::Concat(a, b) => eval_concat(v(a), v(b))?,
            Op::Upsample { x, target, mode } => eval_upsample(v(x), *target, *mode)?,
            Op::Softmax(x) => eval_softmax(v(x))?,
            Op::Sum(x) => Tensor::scalar(v(x).data().iter().sum()),
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(v).collect();
                match frozen {
                    Some(mask) => {
                        let n = op.kinks(&vals).len();
                        if *kink_cursor + n > mask.len() {
                            return Err(AmaaError::Contract("kink pattern is shorter than the tape".into()));
                        }
                        let out = op.forward_frozen(&vals, &mask[*kink_cursor..*kink_cursor + n])?;
                        *kink_cursor += n;
                        out
                    }
                    None => op.forward(&vals)?,
                }
            }
        })
    }

    /// Re-evaluates every non-leaf node in recording order.
    pub fn replay(&mut self) -> Result<()> {
        self.replay_inner(None)
    }

    /// Replay in which every kink op (ReLU, clamp, floored reciprocal) keeps
    /// the branch recorded in `pattern` (see [`Tape::kink_pattern`]).
    pub fn replay_frozen(&mut self, pattern: &[bool]) -> Result<()> {
        self.replay_inner(Some(pattern))
    }

    fn replay_inner(&mut self, frozen: Option<&[bool]>) -> Result<()> {
        let mut cursor = 0;
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Input | Op::Param) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let value = self.eval(&op, frozen, &mut cursor)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Branch taken by every kink-op element, in recording order.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::ClampMin0(x) => {
                    out.extend(self.nodes[x.0].value.data().iter().map(|&a| a > 0.0))
                }
                Op::RecipFloor(x, fl) => {
                    out.extend(self.nodes[x.0].value.data().iter().map(|&a| a >= *fl))
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|x| &self.nodes[x.0].value).collect();
                    out.extend(op.kinks(&vals));
                }
                _ => {}
            }
        }
        out
    }

    /// Gradients of scalar node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).numel() != 1 {
            return Err(AmaaError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let contribs = self.node_backward(node, &g)?;
            grads[i] = Some(g);
            for (var, cg) in contribs {
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter-leaf gradients into the store's accumulators.
    pub fn accumulate_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        let mut bound: Vec<(&String, &Var)> = self.params.iter().collect();
        bound.sort();
        for (name, v) in bound {
            if let Some(g) = grads.wrt(*v) {
                store.get_mut(name)?.grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let v = |x: &Var| &self.nodes[x.0].value;
        let like = |x: &Var, data: Vec<f64>| Tensor::new(v(x).shape().to_vec(), data);
        let zip = |x: &Var, f: &dyn Fn(f64, f64) -> f64| -> Result<Tensor> {
            like(x, v(x).data().iter().zip(g.data()).map(|(&a, &b)| f(a, b)).collect())
        };
        let out = &node.value;
        Ok(match &node.op {
            Op::Input | Op::Param => vec![],
            Op::Conv { x, w, b, stride } => {
                let geom = ConvGeom::new(v(x).dims4()?, v(w).shape(), *stride)?;
                let (gx, gw, gb) = ops::conv3d_backward_raw(v(x).data(), v(w).data(), g.data(), &geom);
                let mut r = vec![(*x, like(x, gx)?), (*w, like(w, gw)?)];
                if let Some(b) = b {
                    r.push((*b, like(b, gb)?));
                }
                r
            }
            Op::Relu(x) | Op::ClampMin0(x) => {
                vec![(*x, zip(x, &|a, g| if a > 0.0 { g } else { 0.0 })?)]
            }
            Op::RecipFloor(x, fl) => {
                let fl = *fl;
                vec![(*x, zip(x, &|a, g| if a >= fl { -g / (a * a) } else { 0.0 })?)]
            }
            Op::Sigmoid(x) => {
                let data = out.data().iter().zip(g.data()).map(|(s, g)| g * s * (1.0 - s)).collect();
                vec![(*x, like(x, data)?)]
            }
            Op::Scale(x, f) => vec![(*x, g.map(|a| a * f))],
            Op::AddScalar(x, _) => vec![(*x, g.clone())],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let bc = Broadcast::resolve(v(a).shape(), v(b).shape())?;
                let mut gb = ops::reduce_broadcast(g.data(), v(a).shape(), v(b).shape(), bc);
                if matches!(node.op, Op::Sub(..)) {
                    gb.iter_mut().for_each(|x| *x = -*x);
                }
                vec![(*a, g.clone()), (*b, like(b, gb)?)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (v(a), v(b));
                let bc = Broadcast::resolve(ta.shape(), tb.shape())?;
                let nv = voxels(ta.shape());
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * tb.data()[bc.rhs_index(i, nv)])
                    .collect();
                let full: Vec<f64> = g.data().iter().zip(ta.data()).map(|(g, a)| g * a).collect();
                let gb = ops::reduce_broadcast(&full, ta.shape(), tb.shape(), bc);
                vec![(*a, like(a, ga)?), (*b, like(b, gb)?)]
            }
            Op::GlobalAvgPool(x) => {
                let [c, d, h, w] = v(x).dims4()?;
                let n = d * h * w;
                let mut gx = Vec::with_capacity(c * n);
                for ci in 0..c {
                    gx.extend(std::iter::repeat(g.data()[ci] / n as f64).take(n));
                }
                vec![(*x, like(x, gx)?)]
            }
            Op::ChannelMean(x) => {
                let [c, ..] = v(x).dims4()?;
                let mut gx = Vec::with_capacity(v(x).numel());
                for _ in 0..c {
                    gx.extend(g.data().iter().map(|g| g / c as f64));
                }
                vec![(*x, like(x, gx)?)]
            }
            Op::WindowMean(x, s) => {
                let gx = ops::window_mean_backward_raw(g.data(), v(x).dims4()?, *s);
                vec![(*x, like(x, gx)?)]
            }
            Op::Concat(a, b) => {
                let na = v(a).numel();
                vec![
                    (*a, like(a, g.data()[..na].to_vec())?),
                    (*b, like(b, g.data()[na..].to_vec())?),
                ]
            }
            Op::Upsample { x, target, mode } => {
                let gx = ops::upsample_backward_raw(g.data(), v(x).dims4()?, *target, *mode);
                vec![(*x, like(x, gx)?)]
            }
            Op::Softmax(x) => {
                let [c, d, h, w] = out.dims4()?;
                let n = d * h * w;
                let (p, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; c * n];
                for i in 0..n {
                    let dot: f64 = (0..c).map(|k| p[k * n + i] * gd[k * n + i]).sum();
                    for k in 0..c {
                        gx[k * n + i] = p[k * n + i] * (gd[k * n + i] - dot);
                    }
                }
                vec![(*x, like(x, gx)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(v(x).shape(), g.data()[0]))],
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(v).collect();
                op.backward(&vals, out, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, var)| gi.map(|t| (*var, t)))
                    .collect()
            }
        })
    }
}

fn frozen_map(
    x: &Tensor,
    mask: &[bool],
    cursor: &mut usize,
    f: impl Fn(f64, bool) -> f64,
) -> Result<Tensor> {
    let n = x.numel();
    if *cursor + n > mask.len() {
        return Err(AmaaError::Contract("kink pattern is shorter than the tape".into()));
    }
    let data = x
        .data()
        .iter()
        .zip(&mask[*cursor..*cursor + n])
        .map(|(&a, &on)| f(a, on))
        .collect();
    *cursor += n;
    Tensor::new(x.shape().to_vec(), data)
}

fn voxels(shape: &[usize]) -> usize {
    if shape.len() == 4 {
        shape[1..].iter().product()
    } else {
        1
    }
}

fn eval_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let geom = ConvGeom::new(x.dims4()?, w.shape(), stride)?;
    if let Some(b) = b {
        if b.numel() != geom.c_out {
            return shape_err(format!("bias length {} != C_out {}", b.numel(), geom.c_out));
        }
    }
    let out = ops::conv3d_raw(x.data(), w.data(), b.map(|b| b.data()), &geom);
    let [d, h, wd] = geom.output;
    Tensor::new(vec![geom.c_out, d, h, wd], out)
}

fn eval_gap(x: &Tensor) -> Result<Tensor> {
    let [c, d, h, w] = x.dims4()?;
    let n = d * h * w;
    if n == 0 || c == 0 {
        return shape_err("global average pool of an empty volume");
    }
    let z = x.data().chunks(n).map(|ch| ch.iter().sum::<f64>() / n as f64).collect();
    Tensor::new(vec![c, 1, 1, 1], z)
}

fn eval_channel_mean(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims4()?;
    let [_, d, h, w] = dims;
    Tensor::new(vec![1, d, h, w], ops::channel_mean_raw(x.data(), dims))
}

fn eval_window_mean(x: &Tensor, size: usize) -> Result<Tensor> {
    let dims = x.dims4()?;
    Tensor::new(dims.to_vec(), ops::window_mean_raw(x.data(), dims, size))
}

fn eval_concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let va: VoxelVolume = a.clone().try_into()?;
    let vb: VoxelVolume = b.clone().try_into()?;
    Ok(ops::concat_channels(&va, &vb)?.into_tensor())
}

fn eval_upsample(x: &Tensor, target: [usize; 3], mode: UpsampleMode) -> Result<Tensor> {
    let dims = x.dims4()?;
    ops::check_upsample_target([dims[1], dims[2], dims[3]], target)?;
    let [d, h, w] = target;
    Tensor::new(vec![dims[0], d, h, w], ops::upsample_raw(x.data(), dims, target, mode))
}

/// Numerically stable per-voxel softmax over channels.
pub fn softmax_channels(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [c, d, h, w] = dims;
    let n = d * h * w;
    let mut out = vec![0.0; c * n];
    for i in 0..n {
        let mx = (0..c).map(|k| x[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (x[k * n + i] - mx).exp();
            out[k * n + i] = e;
            z += e;
        }
        for k in 0..c {
            out[k * n + i] /= z;
        }
    }
    out
}

fn eval_softmax(x: &Tensor) -> Result<Tensor> {
    let dims = x.dims4()?;
    Tensor::new(dims.to_vec(), softmax_channels(x.data(), dims))
}
