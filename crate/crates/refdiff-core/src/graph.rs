//! Reverse-mode automatic differentiation on a per-sample tape.
//!
//! A [`Graph`] owns an arena of nodes; building an op evaluates it eagerly
//! and records enough context to run the backward pass later. Handles are
//! plain [`Var`] indices, so graphs are cheap to build and are simply dropped
//! after each training sample. Gradients only flow into nodes whose
//! `requires_grad` flag is set, which is how frozen parameters are excluded:
//! feed them in with [`Graph::input`] and they never receive a gradient.
//!
//! The op set is exactly what the denoiser, text encoder, auxiliary heads,
//! and losses need: dense/conv linear algebra, the two normalizations, SiLU,
//! softmax attention pieces, nearest upsampling, embedding lookup, RoI
//! alignment, and scalar reductions. Every op has a hand-derived backward
//! verified against `f64` central finite differences in the tests below.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::{
    concat_channels, matmul, matmul_a_bt, matmul_at_b, slice_channels, transpose2d, Scalar,
    Tensor,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Axis-aligned box in continuous feature-map coordinates, `x1 > x0`,
/// `y1 > y0`, with pixel centers at half-integers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect<T> {
    pub x0: T,
    pub y0: T,
    pub x1: T,
    pub y1: T,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var, T),
    Square(Var),
    Silu(Var),
    Matmul(Var, Var),
    Transpose2d(Var),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels(Var, usize, usize),
    AddRowBroadcast(Var, Var),
    AddChanBroadcast(Var, Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(T, T)>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(T, T)>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
        cols: Tensor<T>,
    },
    UpsampleNearest2(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    RoiAlign {
        x: Var,
        rect: Rect<T>,
        grid: (usize, usize),
        sampling: usize,
    },
    CrossEntropyMean {
        logits: Var,
        targets: Vec<usize>,
    },
    MeanAll(Var),
    SumAll(Var),
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Arena-allocated computation tape.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; gradients never flow into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf; [`Graph::grad`] is populated for it after backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward target with respect to `v`.
    ///
    /// `None` if backward has not run, the node is unreachable from the
    /// target, or the node does not require gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let value = self.value(a).scale(k);
        let rg = self.rg(a);
        Ok(self.push(Op::Scale(a, k), value, rg))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Result<Var> {
        let value = self.value(a).add_scalar(k);
        let rg = self.rg(a);
        Ok(self.push(Op::AddScalar(a, k), value, rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        Ok(self.push(Op::Square(a), value, rg))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v * sigmoid(v));
        let rg = self.rg(a);
        Ok(self.push(Op::Silu(a), value, rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = transpose2d(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose2d(a), value, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), value, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = concat_channels(&tensors)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(Op::ConcatChannels(parts.to_vec()), value, rg))
    }

    pub fn slice_channels(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let value = slice_channels(self.value(a), lo, hi)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceChannels(a, lo, hi), value, rg))
    }

    /// `(rows, cols) + (cols)` with the vector added to every row.
    pub fn add_row_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = rank2(self.value(x))?;
        if self.value(b).shape() != [cols] {
            return Err(CoreError::ShapeMismatch(format!(
                "row broadcast: {:?} + {:?}",
                self.value(x).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in value.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(&bd) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddRowBroadcast(x, b), value, rg))
    }

    /// `(C,H,W) + (C)` with one scalar added per channel plane.
    pub fn add_chan_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x))?;
        if self.value(b).shape() != [c] {
            return Err(CoreError::ShapeMismatch(format!(
                "channel broadcast: {:?} + {:?}",
                self.value(x).shape(),
                self.value(b).shape()
            )));
        }
        let mut value = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        let plane = h * w;
        for (ci, &bv) in bd.iter().enumerate() {
            for o in &mut value.data_mut()[ci * plane..(ci + 1) * plane] {
                *o = *o + bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddChanBroadcast(x, b), value, rg))
    }

    // ---- normalization and attention ----

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = rank2(self.value(a))?;
        let mut value = self.value(a).clone();
        for r in 0..rows {
            let row = &mut value.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxRows(a), value, rg))
    }

    /// Per-row layer norm with learned scale and shift, over `(rows, cols)`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (rows, cols) = rank2(self.value(x))?;
        if self.value(gamma).shape() != [cols] || self.value(beta).shape() != [cols] {
            return Err(CoreError::ShapeMismatch("layer_norm scale/shift".to_string()));
        }
        let n = T::from_f64(cols as f64);
        let mut value = self.value(x).clone();
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut value.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / n;
            let inv = (var + eps).sqrt().recip();
            stats.push((mean, inv));
            for (i, v) in row.iter_mut().enumerate() {
                *v = g[i] * ((*v - mean) * inv) + be[i];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                stats,
            },
            value,
            rg,
        ))
    }

    /// Group normalization over `(C,H,W)` with per-channel scale and shift.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x))?;
        if groups == 0 || c % groups != 0 {
            return Err(CoreError::InvalidConfig(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(CoreError::ShapeMismatch("group_norm scale/shift".to_string()));
        }
        let per = c / groups;
        let plane = h * w;
        let n = T::from_f64((per * plane) as f64);
        let mut value = self.value(x).clone();
        let g = self.value(gamma).data().to_vec();
        let be = self.value(beta).data().to_vec();
        let mut stats = Vec::with_capacity(groups);
        for gi in 0..groups {
            let span = gi * per * plane..(gi + 1) * per * plane;
            let mean = value.data()[span.clone()]
                .iter()
                .fold(T::zero(), |a, &v| a + v)
                / n;
            let var = value.data()[span.clone()]
                .iter()
                .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
                / n;
            let inv = (var + eps).sqrt().recip();
            stats.push((mean, inv));
            for ci in gi * per..(gi + 1) * per {
                for v in &mut value.data_mut()[ci * plane..(ci + 1) * plane] {
                    *v = g[ci] * ((*v - mean) * inv) + be[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            value,
            rg,
        ))
    }

    // ---- convolution and spatial ops ----

    /// 2-D convolution. `x` is `(Cin,H,W)`, `w` is `(Cout, Cin*k*k)` with
    /// kernels flattened row-major, optional `bias` is `(Cout)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cin, h, wi) = rank3(self.value(x))?;
        let (cout, wk) = rank2(self.value(w))?;
        if wk != cin * kernel * kernel {
            return Err(CoreError::ShapeMismatch(format!(
                "conv2d weight ({cout},{wk}) vs Cin*k*k = {}",
                cin * kernel * kernel
            )));
        }
        if h + 2 * pad < kernel || wi + 2 * pad < kernel || stride == 0 {
            return Err(CoreError::InvalidConfig(format!(
                "conv2d geometry: input {h}x{wi}, kernel {kernel}, pad {pad}, stride {stride}"
            )));
        }
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (wi + 2 * pad - kernel) / stride + 1;
        let cols = im2col(self.value(x), kernel, stride, pad, oh, ow);
        let mut y = matmul(self.value(w), &cols)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(CoreError::ShapeMismatch("conv2d bias".to_string()));
            }
            let bd = self.value(b).data().to_vec();
            let plane = oh * ow;
            for (ci, &bv) in bd.iter().enumerate() {
                for v in &mut y.data_mut()[ci * plane..(ci + 1) * plane] {
                    *v = *v + bv;
                }
            }
        }
        let value = y.reshape(&[cout, oh, ow])?;
        let rg = self.rg(x) || self.rg(w) || bias.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                kernel,
                stride,
                pad,
                cols,
            },
            value,
            rg,
        ))
    }

    /// Nearest-neighbor 2x upsampling of `(C,H,W)`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x))?;
        let mut value = Tensor::zeros(&[c, 2 * h, 2 * w]);
        let xd = self.value(x).data();
        {
            let od = value.data_mut();
            for ci in 0..c {
                for y in 0..2 * h {
                    for xi in 0..2 * w {
                        od[ci * 4 * h * w + y * 2 * w + xi] = xd[ci * h * w + (y / 2) * w + xi / 2];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Op::UpsampleNearest2(x), value, rg))
    }

    /// Row lookup: `table` is `(V,D)`, output is `(ids.len(), D)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = rank2(self.value(table))?;
        if ids.is_empty() {
            return Err(CoreError::InvalidConfig("embedding of zero ids".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(CoreError::InvalidConfig(format!(
                "embedding id {bad} out of vocabulary {v}"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// RoI align: bilinear sampling of `grid` output cells over `rect`, each
    /// cell averaging `sampling x sampling` sub-points. Coordinates are
    /// continuous with half-pixel centers and are never snapped to the grid.
    pub fn roi_align(
        &mut self,
        x: Var,
        rect: Rect<T>,
        grid: (usize, usize),
        sampling: usize,
    ) -> Result<Var> {
        let (c, h, w) = rank3(self.value(x))?;
        if !(rect.x1 > rect.x0 && rect.y1 > rect.y0) {
            return Err(CoreError::InvalidConfig(format!(
                "roi_align: degenerate rect ({:?},{:?})-({:?},{:?})",
                rect.x0, rect.y0, rect.x1, rect.y1
            )));
        }
        if grid.0 == 0 || grid.1 == 0 || sampling == 0 {
            return Err(CoreError::InvalidConfig("roi_align: zero-sized grid".to_string()));
        }
        let (gh, gw) = grid;
        let mut value = Tensor::zeros(&[c, gh, gw]);
        let xd = self.value(x).data();
        let norm = T::from_f64((sampling * sampling) as f64).recip();
        {
            let od = value.data_mut();
            for_each_roi_sample::<T>(rect, grid, sampling, |gy, gx, sy, sx| {
                let (pts, _) = bilinear_points::<T>(sx, sy, h, w);
                for ci in 0..c {
                    let mut acc = T::zero();
                    for &(iy, ix, wgt) in &pts {
                        acc = acc + xd[ci * h * w + iy * w + ix] * wgt;
                    }
                    od[ci * gh * gw + gy * gw + gx] = od[ci * gh * gw + gy * gw + gx] + acc * norm;
                }
            });
        }
        let rg = self.rg(x);
        Ok(self.push(
            Op::RoiAlign {
                x,
                rect,
                grid,
                sampling,
            },
            value,
            rg,
        ))
    }

    // ---- losses and reductions ----

    /// Mean cross-entropy of `(N, classes)` logits against integer targets:
    /// `-1/N sum_i log softmax(logits_i)[target_i]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, classes) = rank2(self.value(logits))?;
        if targets.len() != n {
            return Err(CoreError::ShapeMismatch(format!(
                "cross_entropy: {n} rows vs {} targets",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(CoreError::InvalidConfig(format!(
                "cross_entropy target {bad} out of {classes} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * classes..(r + 1) * classes];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let logsum = row
                .iter()
                .fold(T::zero(), |a, &v| a + (v - max).exp())
                .ln()
                + max;
            total = total + (logsum - row[t]);
        }
        let value = Tensor::scalar(total / T::from_f64(n as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        Ok(self.push(Op::MeanAll(a), value, rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        Ok(self.push(Op::SumAll(a), value, rg))
    }

    // ---- backward ----

    /// Reverse accumulation from scalar `target`. Overwrites any previous
    /// gradients held by the graph.
    pub fn backward(&mut self, target: Var) -> Result<()> {
        if self.value(target).numel() != 1 {
            return Err(CoreError::ShapeMismatch(format!(
                "backward target must be scalar, got {:?}",
                self.value(target).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[target.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=target.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate_parents(i, &g, &mut grads)?;
            // Leaves keep their gradient; interior nodes release it once
            // their parents are charged, bounding backward memory.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate_parents(
        &self,
        node: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let mut give = |v: Var, delta: Tensor<T>| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(T::one(), &delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &self.nodes[node].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                give(*a, g.clone())?;
                give(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                give(*a, g.clone())?;
                give(*b, g.scale(-T::one()))?;
            }
            Op::Mul(a, b) => {
                give(*a, g.mul(self.value(*b))?)?;
                give(*b, g.mul(self.value(*a))?)?;
            }
            Op::Scale(a, k) => give(*a, g.scale(*k))?,
            Op::AddScalar(a, _) => give(*a, g.clone())?,
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                give(*a, g.mul(&self.value(*a).scale(two))?)?;
            }
            Op::Silu(a) => {
                let dx = self.value(*a).map(|x| {
                    let s = sigmoid(x);
                    s * (T::one() + x * (T::one() - s))
                });
                give(*a, g.mul(&dx)?)?;
            }
            Op::Matmul(a, b) => {
                give(*a, matmul_a_bt(g, self.value(*b))?)?;
                give(*b, matmul_at_b(self.value(*a), g)?)?;
            }
            Op::Transpose2d(a) => give(*a, transpose2d(g)?)?,
            Op::Reshape(a) => give(*a, g.reshape(self.value(*a).shape())?)?,
            Op::ConcatChannels(parts) => {
                let mut lo = 0;
                for &p in parts {
                    let c = self.value(p).shape()[0];
                    give(p, slice_channels(g, lo, lo + c)?)?;
                    lo += c;
                }
            }
            Op::SliceChannels(a, lo, _hi) => {
                let mut dx = Tensor::zeros(self.value(*a).shape());
                let plane: usize = self.value(*a).shape()[1..].iter().product();
                let start = lo * plane;
                dx.data_mut()[start..start + g.numel()].copy_from_slice(g.data());
                give(*a, dx)?;
            }
            Op::AddRowBroadcast(x, b) => {
                give(*x, g.clone())?;
                let (rows, cols) = rank2(g)?;
                let mut db = Tensor::zeros(&[cols]);
                for r in 0..rows {
                    for c in 0..cols {
                        db.data_mut()[c] = db.data()[c] + g.data()[r * cols + c];
                    }
                }
                give(*b, db)?;
            }
            Op::AddChanBroadcast(x, b) => {
                give(*x, g.clone())?;
                let (c, h, w) = rank3(g)?;
                let plane = h * w;
                let mut db = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let s = g.data()[ci * plane..(ci + 1) * plane]
                        .iter()
                        .fold(T::zero(), |a, &v| a + v);
                    db.data_mut()[ci] = s;
                }
                give(*b, db)?;
            }
            Op::SoftmaxRows(a) => {
                let y = self.value(node_var(node));
                let (rows, cols) = rank2(y)?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let yr = &y.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for c in 0..cols {
                        dx.data_mut()[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                give(*a, dx)?;
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                stats,
            } => {
                let xv = self.value(*x);
                let (rows, cols) = rank2(xv)?;
                let n = T::from_f64(cols as f64);
                let gv = self.value(*gamma).data();
                let mut dx = Tensor::zeros(&[rows, cols]);
                let mut dgamma = Tensor::zeros(&[cols]);
                let mut dbeta = Tensor::zeros(&[cols]);
                for r in 0..rows {
                    let (mean, inv) = stats[r];
                    let xr = &xv.data()[r * cols..(r + 1) * cols];
                    let gr = &g.data()[r * cols..(r + 1) * cols];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * inv;
                        let dxhat = gr[c] * gv[c];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgamma.data_mut()[c] = dgamma.data()[c] + gr[c] * xhat;
                        dbeta.data_mut()[c] = dbeta.data()[c] + gr[c];
                    }
                    for c in 0..cols {
                        let xhat = (xr[c] - mean) * inv;
                        let dxhat = gr[c] * gv[c];
                        dx.data_mut()[r * cols + c] =
                            inv * (dxhat - sum_dxhat / n - xhat * (sum_dxhat_xhat / n));
                    }
                }
                give(*x, dx)?;
                give(*gamma, dgamma)?;
                give(*beta, dbeta)?;
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xv = self.value(*x);
                let (c, h, w) = rank3(xv)?;
                let per = c / groups;
                let plane = h * w;
                let n = T::from_f64((per * plane) as f64);
                let gv = self.value(*gamma).data();
                let mut dx = Tensor::zeros(&[c, h, w]);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                for gi in 0..*groups {
                    let (mean, inv) = stats[gi];
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for ci in gi * per..(gi + 1) * per {
                        for p in 0..plane {
                            let idx = ci * plane + p;
                            let xhat = (xv.data()[idx] - mean) * inv;
                            let dxhat = g.data()[idx] * gv[ci];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            dgamma.data_mut()[ci] = dgamma.data()[ci] + g.data()[idx] * xhat;
                            dbeta.data_mut()[ci] = dbeta.data()[ci] + g.data()[idx];
                        }
                    }
                    for ci in gi * per..(gi + 1) * per {
                        for p in 0..plane {
                            let idx = ci * plane + p;
                            let xhat = (xv.data()[idx] - mean) * inv;
                            let dxhat = g.data()[idx] * gv[ci];
                            dx.data_mut()[idx] =
                                inv * (dxhat - sum_dxhat / n - xhat * (sum_dxhat_xhat / n));
                        }
                    }
                }
                give(*x, dx)?;
                give(*gamma, dgamma)?;
                give(*beta, dbeta)?;
            }
            Op::Conv2d {
                x,
                w,
                bias,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let (cout, oh, ow) = rank3(self.value(node_var(node)))?;
                let g2 = g.reshape(&[cout, oh * ow])?;
                give(*w, matmul_a_bt(&g2, cols)?)?;
                if self.nodes[x.0].requires_grad {
                    let dcols = matmul_at_b(self.value(*w), &g2)?;
                    let dx = col2im(
                        &dcols,
                        self.value(*x).shape(),
                        *kernel,
                        *stride,
                        *pad,
                        oh,
                        ow,
                    );
                    give(*x, dx)?;
                }
                if let Some(b) = bias {
                    let mut db = Tensor::zeros(&[cout]);
                    for ci in 0..cout {
                        let s = g2.data()[ci * oh * ow..(ci + 1) * oh * ow]
                            .iter()
                            .fold(T::zero(), |a, &v| a + v);
                        db.data_mut()[ci] = s;
                    }
                    give(*b, db)?;
                }
            }
            Op::UpsampleNearest2(x) => {
                let (c, h, w) = rank3(self.value(*x))?;
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ci in 0..c {
                    for y in 0..2 * h {
                        for xi in 0..2 * w {
                            let idx = ci * h * w + (y / 2) * w + xi / 2;
                            dx.data_mut()[idx] =
                                dx.data()[idx] + g.data()[ci * 4 * h * w + y * 2 * w + xi];
                        }
                    }
                }
                give(*x, dx)?;
            }
            Op::Embedding { table, ids } => {
                let (v, d) = rank2(self.value(*table))?;
                let mut dt = Tensor::zeros(&[v, d]);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt.data_mut()[id * d + c] = dt.data()[id * d + c] + g.data()[r * d + c];
                    }
                }
                give(*table, dt)?;
            }
            Op::RoiAlign {
                x,
                rect,
                grid,
                sampling,
            } => {
                let (c, h, w) = rank3(self.value(*x))?;
                let (gh, gw) = *grid;
                let mut dx = Tensor::zeros(&[c, h, w]);
                let norm = T::from_f64((*sampling * *sampling) as f64).recip();
                for_each_roi_sample::<T>(*rect, *grid, *sampling, |gy, gx, sy, sx| {
                    let (pts, _) = bilinear_points::<T>(sx, sy, h, w);
                    for ci in 0..c {
                        let go = g.data()[ci * gh * gw + gy * gw + gx] * norm;
                        for &(iy, ix, wgt) in &pts {
                            let idx = ci * h * w + iy * w + ix;
                            dx.data_mut()[idx] = dx.data()[idx] + go * wgt;
                        }
                    }
                });
                give(*x, dx)?;
            }
            Op::CrossEntropyMean { logits, targets } => {
                let lv = self.value(*logits);
                let (n, classes) = rank2(lv)?;
                let scale = g.data()[0] / T::from_f64(n as f64);
                let mut dl = Tensor::zeros(&[n, classes]);
                for (r, &t) in targets.iter().enumerate() {
                    let row = &lv.data()[r * classes..(r + 1) * classes];
                    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                    let sum = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
                    for c in 0..classes {
                        let p = (row[c] - max).exp() / sum;
                        let delta = if c == t { T::one() } else { T::zero() };
                        dl.data_mut()[r * classes + c] = (p - delta) * scale;
                    }
                }
                give(*logits, dl)?;
            }
            Op::MeanAll(a) => {
                let n = T::from_f64(self.value(*a).numel() as f64);
                give(*a, Tensor::full(self.value(*a).shape(), g.data()[0] / n))?;
            }
            Op::SumAll(a) => {
                give(*a, Tensor::full(self.value(*a).shape(), g.data()[0]))?;
            }
        }
        Ok(())
    }
}

fn node_var(i: usize) -> Var {
    Var(i)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    (T::one() + (-x).exp()).recip()
}

fn rank2<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(CoreError::ShapeMismatch(format!(
            "expected rank 2, got {other:?}"
        ))),
    }
}

fn rank3<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(CoreError::ShapeMismatch(format!(
            "expected rank 3, got {other:?}"
        ))),
    }
}

fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let [cin, h, w] = x.shape() else { unreachable!() };
    let (cin, h, w) = (*cin, *h, *w);
    let mut cols = Tensor::zeros(&[cin * kernel * kernel, oh * ow]);
    let xd = x.data();
    let cd = cols.data_mut();
    for ci in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cd[row * oh * ow + oy * ow + ox] =
                            xd[ci * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(
    dcols: &Tensor<T>,
    x_shape: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let (cin, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let mut dx = Tensor::zeros(x_shape);
    let dd = dcols.data();
    let xd = dx.data_mut();
    for ci in 0..cin {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = ci * h * w + iy as usize * w + ix as usize;
                        xd[idx] = xd[idx] + dd[row * oh * ow + oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}

/// Visit every RoI sample point: callback gets output cell `(gy,gx)` and the
/// continuous sample coordinate `(sy,sx)`.
fn for_each_roi_sample<T: Scalar>(
    rect: Rect<T>,
    grid: (usize, usize),
    sampling: usize,
    mut f: impl FnMut(usize, usize, T, T),
) {
    let (gh, gw) = grid;
    let bin_h = (rect.y1 - rect.y0) / T::from_f64(gh as f64);
    let bin_w = (rect.x1 - rect.x0) / T::from_f64(gw as f64);
    let s = T::from_f64(sampling as f64);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..sampling {
                for px in 0..sampling {
                    let fy = (T::from_f64(py as f64) + T::from_f64(0.5)) / s;
                    let fx = (T::from_f64(px as f64) + T::from_f64(0.5)) / s;
                    let sy = rect.y0 + (T::from_f64(gy as f64) + fy) * bin_h;
                    let sx = rect.x0 + (T::from_f64(gx as f64) + fx) * bin_w;
                    f(gy, gx, sy, sx);
                }
            }
        }
    }
}

/// Bilinear interpolation stencil at a continuous coordinate with half-pixel
/// centers (pixel `(i,j)` is centered at `(i+0.5, j+0.5)`), clamped to the
/// map edges. Returns up to four `(iy, ix, weight)` taps.
fn bilinear_points<T: Scalar>(x: T, y: T, h: usize, w: usize) -> ([(usize, usize, T); 4], ()) {
    let half = T::from_f64(0.5);
    let fx = (x - half)
        .max(T::zero())
        .min(T::from_f64((w - 1) as f64));
    let fy = (y - half)
        .max(T::zero())
        .min(T::from_f64((h - 1) as f64));
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let x0u = x0.to_f64() as usize;
    let y0u = y0.to_f64() as usize;
    let x1u = (x0u + 1).min(w - 1);
    let y1u = (y0u + 1).min(h - 1);
    let one = T::one();
    (
        [
            (y0u, x0u, (one - ty) * (one - tx)),
            (y0u, x1u, (one - ty) * tx),
            (y1u, x0u, ty * (one - tx)),
            (y1u, x1u, ty * tx),
        ],
        (),
    )
}

// ---- finite-difference checking, shared by tests across the crate ----

/// Maximum relative error between analytic gradients and `f64` central
/// finite differences, over every element of every parameter.
///
/// `build` must construct the same scalar loss each call from the given
/// parameter leaves; determinism is on the caller.
pub fn max_rel_error_fd(
    inputs: &[Tensor<f64>],
    eps: f64,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |tensors: &[Tensor<f64>]| -> (f64, Vec<Option<Tensor<f64>>>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &vars).expect("build loss");
        g.backward(loss).expect("backward");
        let grads = vars.iter().map(|&v| g.grad(v).cloned()).collect();
        (g.value(loss).data()[0], grads)
    };

    let (_, analytic) = eval(inputs);
    let mut worst = 0.0f64;
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[pi].data_mut()[ei] += eps;
            let mut minus = inputs.to_vec();
            minus[pi].data_mut()[ei] -= eps;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
            let an = analytic[pi]
                .as_ref()
                .map(|t| t.data()[ei])
                .unwrap_or(0.0);
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}
