//! Differentiable operators over per-vertex feature arrays.
//!
//! Every operator exists twice: as a plain function on [`Tensor`]s (forward
//! and backward kernels) and as a recording method on [`Tape`]. The tape keeps
//! each intermediate value and replays the kernels in reverse for
//! [`Tape::backward`]. Only the primitives the tetrahedral U-Net needs are
//! provided; this is not a general autodiff engine.
//!
//! Per-row work is split across the rayon pool, but every reduction runs in a
//! fixed order, so results are bit-identical for any thread count.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::tetgrid::{GridLevel, Parent};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss node must be 1x1, found {0}x{1}")]
    NonScalarLoss(usize, usize),
    #[error("node {0} does not contribute to the loss")]
    Disconnected(usize),
    #[error("level {0} has no coarser level to pool into")]
    NoCoarserLevel(usize),
    #[error("level has no parent map")]
    MissingParents,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::Shape(msg.into()))
}

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!("{} values for a {rows}x{cols} tensor", data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return shape_err(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            ));
        }
        Ok(())
    }

    /// Columns `[start, start + width)` as a new tensor.
    pub fn columns(&self, start: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    pub fn write_le(&self, w: &mut impl Write) -> io::Result<()> {
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_le(r: &mut impl Read, rows: usize, cols: usize) -> io::Result<Self> {
        let mut buf = vec![0u8; rows * cols * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { rows, cols, data })
    }
}

/// Per-vertex features on one grid level.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureArray {
    pub level: usize,
    pub values: Tensor,
}

/// Tetrahedral convolution weights: `m + 1` stacked `c_in x c_out` blocks
/// (block 0 is the center) and a `1 x c_out` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvWeights {
    pub fn zeros(m: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            kernel: Tensor::zeros((m + 1) * c_in, c_out),
            bias: Tensor::zeros(1, c_out),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Max,
    Sum,
}

// ---------------------------------------------------------------------------
// Kernels

fn check_conv(x: &Tensor, kernel: &Tensor, bias: &Tensor, level: &GridLevel) -> Result<(usize, usize)> {
    if x.rows() != level.num_vertices() {
        return shape_err(format!("{} rows for a level with {} vertices", x.rows(), level.num_vertices()));
    }
    let c_in = x.cols();
    let slots = level.m() + 1;
    if kernel.rows() != slots * c_in {
        return shape_err(format!(
            "kernel has {} rows, expected {slots} slots x {c_in} channels",
            kernel.rows()
        ));
    }
    if bias.shape() != (1, kernel.cols()) {
        return shape_err(format!("bias {}x{} for {} outputs", bias.rows(), bias.cols(), kernel.cols()));
    }
    Ok((c_in, kernel.cols()))
}

/// Rescaling of the neighbor sum at vertex `v`: `m / |N(v)|`.
fn neighbor_scale(level: &GridLevel, v: usize) -> f64 {
    let deg = level.neighbors(v).len();
    if deg == 0 {
        0.0
    } else {
        level.m() as f64 / deg as f64
    }
}

/// `acc += x · W` for a row vector `x` and a `len(x) x len(acc)` block `W`.
#[inline]
fn row_times_block(acc: &mut [f64], x: &[f64], block: &[f64], scale: f64) {
    let c_out = acc.len();
    for (i, &xi) in x.iter().enumerate() {
        let s = xi * scale;
        if s == 0.0 {
            continue;
        }
        let w = &block[i * c_out..(i + 1) * c_out];
        for (a, &wv) in acc.iter_mut().zip(w) {
            *a += s * wv;
        }
    }
}

pub fn conv_forward(x: &Tensor, kernel: &Tensor, bias: &Tensor, level: &GridLevel) -> Result<Tensor> {
    let (c_in, c_out) = check_conv(x, kernel, bias, level)?;
    let block = c_in * c_out;
    let w = kernel.data();
    let mut out = Tensor::zeros(x.rows(), c_out);
    out.data
        .par_chunks_mut(c_out.max(1))
        .enumerate()
        .for_each(|(v, o)| {
            let mut nb = vec![0.0; c_out];
            for (p, &j) in level.neighbors(v).iter().enumerate() {
                let s = p + 1;
                row_times_block(&mut nb, x.row(j), &w[s * block..(s + 1) * block], 1.0);
            }
            o.copy_from_slice(bias.data());
            row_times_block(o, x.row(v), &w[..block], 1.0);
            let scale = neighbor_scale(level, v);
            for (a, n) in o.iter_mut().zip(&nb) {
                *a += scale * n;
            }
        });
    Ok(out)
}

/// Returns `(dx, dkernel, dbias)`.
pub fn conv_backward(x: &Tensor, kernel: &Tensor, level: &GridLevel, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c_in = x.cols();
    let c_out = dout.cols();
    let block = c_in * c_out;
    let w = kernel.data();
    let slots = level.m() + 1;

    // dx_j = dout_j W0ᵀ + Σ_{k : j ∈ N(k)} scale_k dout_k W_{slot_k(j)}ᵀ
    let mut dx = Tensor::zeros(x.rows(), c_in);
    dx.data
        .par_chunks_mut(c_in.max(1))
        .enumerate()
        .for_each(|(j, o)| {
            let mut add = |g: &[f64], blk: &[f64], scale: f64| {
                for (i, oi) in o.iter_mut().enumerate() {
                    let wr = &blk[i * c_out..(i + 1) * c_out];
                    let mut s = 0.0;
                    for (gv, wv) in g.iter().zip(wr) {
                        s += gv * wv;
                    }
                    *oi += scale * s;
                }
            };
            add(dout.row(j), &w[..block], 1.0);
            for &k in level.neighbors(j) {
                let s = level.slots().slot(k, j).expect("symmetric adjacency");
                add(dout.row(k), &w[s * block..(s + 1) * block], neighbor_scale(level, k));
            }
        });

    // dW_s = Σ_k scale_k x_{nb(k, s)}ᵀ dout_k, one slot per task
    let mut dk = Tensor::zeros(slots * c_in, c_out);
    dk.data
        .par_chunks_mut(block.max(1))
        .enumerate()
        .for_each(|(s, blk)| {
            for k in 0..x.rows() {
                let (src, scale) = if s == 0 {
                    (k, 1.0)
                } else {
                    match level.neighbors(k).get(s - 1) {
                        Some(&j) => (j, neighbor_scale(level, k)),
                        None => continue,
                    }
                };
                let g = dout.row(k);
                for (i, &xi) in x.row(src).iter().enumerate() {
                    let f = xi * scale;
                    if f == 0.0 {
                        continue;
                    }
                    for (b, gv) in blk[i * c_out..(i + 1) * c_out].iter_mut().zip(g) {
                        *b += f * gv;
                    }
                }
            }
        });

    let db = column_sums(dout);
    (dx, dk, db)
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (o, v) in out.data.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

/// Pools fine-level features into the coarser level. For `Max`, also returns
/// the winning fine vertex per coarse vertex and channel.
pub fn pool_forward(x: &Tensor, fine: &GridLevel, agg: Aggregation) -> Result<(Tensor, Vec<usize>)> {
    if !fine.has_parents() {
        return Err(TensorError::MissingParents);
    }
    if x.rows() != fine.num_vertices() {
        return shape_err(format!("{} rows for a level with {} vertices", x.rows(), fine.num_vertices()));
    }
    let c = x.cols();
    let mut out = Tensor::zeros(fine.coarse_len(), c);
    let mut argmax = if agg == Aggregation::Max {
        vec![0usize; fine.coarse_len() * c]
    } else {
        Vec::new()
    };
    for k in 0..fine.coarse_len() {
        let group = fine.pool_group(k);
        let o = &mut out.data[k * c..(k + 1) * c];
        match agg {
            Aggregation::Sum | Aggregation::Mean => {
                for &v in group {
                    for (a, b) in o.iter_mut().zip(x.row(v)) {
                        *a += b;
                    }
                }
                if agg == Aggregation::Mean {
                    let inv = 1.0 / group.len() as f64;
                    o.iter_mut().for_each(|a| *a *= inv);
                }
            }
            Aggregation::Max => {
                for ch in 0..c {
                    let mut best = group[0];
                    for &v in &group[1..] {
                        if x.get(v, ch) > x.get(best, ch) {
                            best = v;
                        }
                    }
                    o[ch] = x.get(best, ch);
                    argmax[k * c + ch] = best;
                }
            }
        }
    }
    Ok((out, argmax))
}

pub fn pool_backward(fine: &GridLevel, agg: Aggregation, argmax: &[usize], dout: &Tensor) -> Tensor {
    let c = dout.cols();
    let mut dx = Tensor::zeros(fine.num_vertices(), c);
    for k in 0..fine.coarse_len() {
        let group = fine.pool_group(k);
        let g = dout.row(k);
        match agg {
            Aggregation::Sum | Aggregation::Mean => {
                let f = if agg == Aggregation::Mean {
                    1.0 / group.len() as f64
                } else {
                    1.0
                };
                for &v in group {
                    for (a, b) in dx.row_mut(v).iter_mut().zip(g) {
                        *a += f * b;
                    }
                }
            }
            Aggregation::Max => {
                for ch in 0..c {
                    let v = argmax[k * c + ch];
                    dx.data[v * c + ch] += g[ch];
                }
            }
        }
    }
    dx
}

/// Copies coarse features to copied vertices and averages the two parents
/// for edge midpoints.
pub fn unpool_forward(x: &Tensor, fine: &GridLevel) -> Result<Tensor> {
    if !fine.has_parents() {
        return Err(TensorError::MissingParents);
    }
    if x.rows() != fine.coarse_len() {
        return shape_err(format!("{} rows for a coarse level with {} vertices", x.rows(), fine.coarse_len()));
    }
    let c = x.cols();
    let mut out = Tensor::zeros(fine.num_vertices(), c);
    out.data
        .par_chunks_mut(c.max(1))
        .zip(fine.parents().par_iter())
        .for_each(|(o, p)| match *p {
            Parent::Copy(k) => o.copy_from_slice(x.row(k)),
            Parent::Midpoint(a, b) => {
                for ((o, xa), xb) in o.iter_mut().zip(x.row(a)).zip(x.row(b)) {
                    *o = 0.5 * (xa + xb);
                }
            }
        });
    Ok(out)
}

pub fn unpool_backward(fine: &GridLevel, dout: &Tensor) -> Tensor {
    let c = dout.cols();
    let mut dx = Tensor::zeros(fine.coarse_len(), c);
    dx.data
        .par_chunks_mut(c.max(1))
        .enumerate()
        .for_each(|(k, o)| {
            for &v in fine.pool_group(k) {
                let f = match fine.parents()[v] {
                    Parent::Copy(_) => 1.0,
                    Parent::Midpoint(..) => 0.5,
                };
                for (a, b) in o.iter_mut().zip(dout.row(v)) {
                    *a += f * b;
                }
            }
        });
    dx
}

/// Normalizes every row to zero mean and unit variance, then applies
/// `gain` and `offset` (both `1 x C`). Returns `(y, x_hat, 1/σ per row)`.
pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, offset: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c = x.cols();
    if gain.shape() != (1, c) || offset.shape() != (1, c) {
        return shape_err(format!("layer norm affine parameters must be 1x{c}"));
    }
    let mut xhat = Tensor::zeros(x.rows(), c);
    let mut inv_std = vec![0.0; x.rows()];
    xhat.data
        .par_chunks_mut(c.max(1))
        .zip(inv_std.par_iter_mut())
        .enumerate()
        .for_each(|(r, (h, is))| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            *is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (hv, v) in h.iter_mut().zip(row) {
                *hv = (v - mean) * *is;
            }
        });
    let mut y = xhat.clone();
    y.data.par_chunks_mut(c.max(1)).for_each(|row| {
        for ((v, g), o) in row.iter_mut().zip(gain.data()).zip(offset.data()) {
            *v = *v * g + o;
        }
    });
    Ok((y, xhat, inv_std))
}

/// Returns `(dx, dgain, doffset)`.
pub fn layer_norm_backward(xhat: &Tensor, inv_std: &[f64], gain: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = xhat.cols();
    let mut dx = Tensor::zeros(xhat.rows(), c);
    dx.data
        .par_chunks_mut(c.max(1))
        .enumerate()
        .for_each(|(r, o)| {
            let h = xhat.row(r);
            let g = dout.row(r);
            let mut mean_d = 0.0;
            let mut mean_dh = 0.0;
            for i in 0..c {
                let d = g[i] * gain.data()[i];
                mean_d += d;
                mean_dh += d * h[i];
            }
            mean_d /= c as f64;
            mean_dh /= c as f64;
            for i in 0..c {
                let d = g[i] * gain.data()[i];
                o[i] = inv_std[r] * (d - mean_d - h[i] * mean_dh);
            }
        });
    let mut dgain = Tensor::zeros(1, c);
    let mut doffset = Tensor::zeros(1, c);
    for r in 0..xhat.rows() {
        for i in 0..c {
            dgain.data[i] += dout.get(r, i) * xhat.get(r, i);
            doffset.data[i] += dout.get(r, i);
        }
    }
    (dx, dgain, doffset)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation of `x Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.rows() != x.cols() {
        return shape_err(format!("linear: input has {} channels, weight expects {}", x.cols(), w.rows()));
    }
    if b.shape() != (1, w.cols()) {
        return shape_err(format!("linear: bias must be 1x{}", w.cols()));
    }
    let c_out = w.cols();
    let mut out = Tensor::zeros(x.rows(), c_out);
    out.data
        .par_chunks_mut(c_out.max(1))
        .enumerate()
        .for_each(|(r, o)| {
            o.copy_from_slice(b.data());
            row_times_block(o, x.row(r), w.data(), 1.0);
        });
    Ok(out)
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dout: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c_in = x.cols();
    let c_out = w.cols();
    let mut dx = Tensor::zeros(x.rows(), c_in);
    dx.data
        .par_chunks_mut(c_in.max(1))
        .enumerate()
        .for_each(|(r, o)| {
            let g = dout.row(r);
            for (i, oi) in o.iter_mut().enumerate() {
                let wr = &w.data()[i * c_out..(i + 1) * c_out];
                *oi = g.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        });
    let mut dw = Tensor::zeros(c_in, c_out);
    dw.data
        .par_chunks_mut(c_out.max(1))
        .enumerate()
        .for_each(|(i, o)| {
            for r in 0..x.rows() {
                let xi = x.get(r, i);
                if xi == 0.0 {
                    continue;
                }
                for (a, g) in o.iter_mut().zip(dout.row(r)) {
                    *a += xi * g;
                }
            }
        });
    (dx, dw, column_sums(dout))
}

/// Sinusoidal embedding of an integer step: `dim / 2` sines followed by
/// `dim / 2` cosines with frequencies `10000^(-i / (dim / 2))`. An odd
/// trailing channel is zero.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Feature-array API

pub fn tetra_conv(x: &FeatureArray, w: &ConvWeights, level: &GridLevel) -> Result<FeatureArray> {
    Ok(FeatureArray {
        level: x.level,
        values: conv_forward(&x.values, &w.kernel, &w.bias, level)?,
    })
}

pub fn tetra_pool(x: &FeatureArray, fine: &GridLevel, agg: Aggregation) -> Result<FeatureArray> {
    if x.level == 0 {
        return Err(TensorError::NoCoarserLevel(0));
    }
    let (values, _) = pool_forward(&x.values, fine, agg)?;
    Ok(FeatureArray {
        level: x.level - 1,
        values,
    })
}

/// `x` lives on the level just below `fine`.
pub fn tetra_unpool(x: &FeatureArray, fine: &GridLevel) -> Result<FeatureArray> {
    Ok(FeatureArray {
        level: x.level + 1,
        values: unpool_forward(&x.values, fine)?,
    })
}

// ---------------------------------------------------------------------------
// Tape

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<'g> {
    Leaf,
    Conv {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        level: &'g GridLevel,
    },
    Pool {
        x: NodeId,
        fine: &'g GridLevel,
        agg: Aggregation,
        argmax: Vec<usize>,
    },
    Unpool {
        x: NodeId,
        fine: &'g GridLevel,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        offset: NodeId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Silu(NodeId),
    Gelu(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    /// `x + row` with `row` broadcast over every row of `x`.
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    Concat(NodeId, NodeId),
    /// Mean squared error against a constant target, as a 1x1 node.
    Mse {
        pred: NodeId,
        target: Tensor,
    },
    /// Mean of squares, as a 1x1 node.
    MeanSquare(NodeId),
}

#[derive(Debug)]
struct Node<'g> {
    value: Tensor,
    op: Op<'g>,
}

/// Records operator applications for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape<'g> {
    nodes: Vec<Node<'g>>,
}

impl<'g> Tape<'g> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op<'g>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Inputs and parameters.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, level: &'g GridLevel) -> Result<NodeId> {
        let v = conv_forward(self.value(x), self.value(kernel), self.value(bias), level)?;
        Ok(self.push(v, Op::Conv { x, kernel, bias, level }))
    }

    pub fn pool(&mut self, x: NodeId, fine: &'g GridLevel, agg: Aggregation) -> Result<NodeId> {
        let (v, argmax) = pool_forward(self.value(x), fine, agg)?;
        Ok(self.push(v, Op::Pool { x, fine, agg, argmax }))
    }

    pub fn unpool(&mut self, x: NodeId, fine: &'g GridLevel) -> Result<NodeId> {
        let v = unpool_forward(self.value(x), fine)?;
        Ok(self.push(v, Op::Unpool { x, fine }))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, offset: NodeId) -> Result<NodeId> {
        let (v, xhat, inv_std) = layer_norm_forward(self.value(x), self.value(gain), self.value(offset))?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(silu);
        self.push(v, Op::Silu(x))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = add_row_forward(self.value(x), self.value(row))?;
        Ok(self.push(v, Op::AddRow { x, row }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = concat_forward(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Concat(a, b)))
    }

    pub fn mse(&mut self, pred: NodeId, target: Tensor) -> Result<NodeId> {
        let v = Tensor::scalar(mse_value(self.value(pred), &target)?);
        Ok(self.push(v, Op::Mse { pred, target }))
    }

    pub fn mean_square(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().map(|v| v * v).sum::<f64>() / t.len().max(1) as f64);
        self.push(v, Op::MeanSquare(x))
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |id: NodeId| -> &Tensor { &vals[id.0] };
            let out = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Conv { x, kernel, bias, level } => conv_forward(v(*x), v(*kernel), v(*bias), level)?,
                Op::Pool { x, fine, agg, .. } => pool_forward(v(*x), fine, *agg)?.0,
                Op::Unpool { x, fine } => unpool_forward(v(*x), fine)?,
                Op::LayerNorm { x, gain, offset, .. } => layer_norm_forward(v(*x), v(*gain), v(*offset))?.0,
                Op::Silu(x) => v(*x).map(silu),
                Op::Gelu(x) => v(*x).map(gelu),
                Op::Linear { x, w, b } => linear_forward(v(*x), v(*w), v(*b))?,
                Op::Add(a, b) => v(*a).zip_map(v(*b), |p, q| p + q)?,
                Op::AddRow { x, row } => add_row_forward(v(*x), v(*row))?,
                Op::Concat(a, b) => concat_forward(v(*a), v(*b))?,
                Op::Mse { pred, target } => Tensor::scalar(mse_value(v(*pred), target)?),
                Op::MeanSquare(x) => {
                    let t = v(*x);
                    Tensor::scalar(t.data().iter().map(|q| q * q).sum::<f64>() / t.len().max(1) as f64)
                }
            };
            vals.push(out);
        }
        Ok(vals)
    }

    /// Reverse pass from a 1x1 `loss` node. Nodes recorded after `loss` are
    /// ignored.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(TensorError::NonScalarLoss(lv.rows(), lv.cols()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                // leaves keep their gradient for the caller
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, kernel, level, bias } => {
                    let (dx, dk, db) = conv_backward(self.value(*x), self.value(*kernel), level, &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *kernel, dk);
                    acc(&mut grads, *bias, db);
                }
                Op::Pool { x, fine, agg, argmax } => {
                    acc(&mut grads, *x, pool_backward(fine, *agg, argmax, &g));
                }
                Op::Unpool { x, fine } => acc(&mut grads, *x, unpool_backward(fine, &g)),
                Op::LayerNorm {
                    x,
                    gain,
                    offset,
                    xhat,
                    inv_std,
                } => {
                    let (dx, dg, doff) = layer_norm_backward(xhat, inv_std, self.value(*gain), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *offset, doff);
                }
                Op::Silu(x) => {
                    let d = self.value(*x).zip_map(&g, |a, b| silu_grad(a) * b)?;
                    acc(&mut grads, *x, d);
                }
                Op::Gelu(x) => {
                    let d = self.value(*x).zip_map(&g, |a, b| gelu_grad(a) * b)?;
                    acc(&mut grads, *x, d);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = linear_backward(self.value(*x), self.value(*w), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow { x, row } => {
                    acc(&mut grads, *row, column_sums(&g));
                    acc(&mut grads, *x, g);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    acc(&mut grads, *a, g.columns(0, ca));
                    acc(&mut grads, *b, g.columns(ca, cb));
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let f = 2.0 * g.item() / p.len().max(1) as f64;
                    acc(&mut grads, *pred, p.zip_map(target, |a, b| f * (a - b))?);
                }
                Op::MeanSquare(x) => {
                    let p = self.value(*x);
                    let f = 2.0 * g.item() / p.len().max(1) as f64;
                    acc(&mut grads, *x, p.map(|a| f * a));
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn add_row_forward(x: &Tensor, row: &Tensor) -> Result<Tensor> {
    if row.shape() != (1, x.cols()) {
        return shape_err(format!("broadcast row must be 1x{}, found {}x{}", x.cols(), row.rows(), row.cols()));
    }
    let mut out = x.clone();
    let c = x.cols();
    out.data.par_chunks_mut(c.max(1)).for_each(|r| {
        for (a, b) in r.iter_mut().zip(row.data()) {
            *a += b;
        }
    });
    Ok(out)
}

fn concat_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return shape_err(format!("concat of {} and {} rows", a.rows(), b.rows()));
    }
    let c = a.cols() + b.cols();
    let mut out = Tensor::zeros(a.rows(), c);
    for r in 0..a.rows() {
        let o = out.row_mut(r);
        o[..a.cols()].copy_from_slice(a.row(r));
        o[a.cols()..].copy_from_slice(b.row(r));
    }
    Ok(out)
}

fn mse_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.same_shape(target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Gradients of a loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Result<&Tensor> {
        self.grads
            .get(id.0)
            .and_then(Option::as_ref)
            .ok_or(TensorError::Disconnected(id.0))
    }

    pub fn take(&mut self, id: NodeId) -> Result<Tensor> {
        self.grads
            .get_mut(id.0)
            .and_then(Option::take)
            .ok_or(TensorError::Disconnected(id.0))
    }
}

// ---------------------------------------------------------------------------
// Adam

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect(),
        }
    }

    /// Step counter, then first and second moments in parameter order.
    pub fn write_le(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.step.to_le_bytes())?;
        for t in self.m.iter().chain(&self.v) {
            t.write_le(w)?;
        }
        Ok(())
    }

    /// Reads state shaped like `params`.
    pub fn read_le(r: &mut impl Read, params: &[Tensor]) -> io::Result<Self> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let step = u64::from_le_bytes(b);
        let mut read_all = || -> io::Result<Vec<Tensor>> {
            params.iter().map(|p| Tensor::read_le(r, p.rows(), p.cols())).collect()
        };
        let m = read_all()?;
        let v = read_all()?;
        Ok(Self { step, m, v })
    }
}

/// One bias-corrected Adam update of every parameter tensor.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.same_shape(g)?;
        p.same_shape(&state.m[i])?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
