//! Tensor operations and their backward rules.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{accumulate, sigmoid, softplus, Result, Tensor, TensorError};

/// Elementwise reduction used for stacks of tensors and row reductions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMethod {
    Max,
    Sum,
    Mean,
}

impl std::fmt::Display for PoolMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Max => write!(f, "max"),
            Self::Sum => write!(f, "sum"),
            Self::Mean => write!(f, "mean"),
        }
    }
}

pub(crate) enum Op {
    Matmul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    /// x[m,n] + bias[n], broadcast over rows.
    AddBias { x: Tensor, bias: Tensor },
    Scale { x: Tensor, c: f64 },
    Silu { x: Tensor, sig: Vec<f64> },
    SoftmaxRows { x: Tensor, y: Vec<f64> },
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Train-mode batchnorm over columns; gradients couple through the
    /// batch statistics.
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Eval-mode batchnorm: fixed statistics, affine-only gradient path.
    BatchNormFixed {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BceWithLogits { logit: Tensor, label: f64 },
    Pool {
        inputs: Vec<Tensor>,
        method: PoolMethod,
        argmax: Vec<u32>,
    },
    /// Row reduction [m,n] -> [1,n].
    ReduceRows {
        x: Tensor,
        method: PoolMethod,
        argmax: Vec<u32>,
    },
    Transpose { x: Tensor },
    SliceCols { x: Tensor, start: usize, len: usize },
    ConcatCols { parts: Vec<Tensor> },
    GatherRows { table: Tensor, ids: Vec<usize> },
    AddToRow { x: Tensor, row: usize, v: Tensor },
    Dropout { x: Tensor, mask: Vec<f64> },
    SumAll { x: Tensor },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::Scale { x, .. }
            | Op::Silu { x, .. }
            | Op::SoftmaxRows { x, .. }
            | Op::Transpose { x }
            | Op::SliceCols { x, .. }
            | Op::Dropout { x, .. }
            | Op::ReduceRows { x, .. }
            | Op::SumAll { x } => vec![x],
            Op::LayerNorm { x, gamma, beta, .. }
            | Op::BatchNorm { x, gamma, beta, .. }
            | Op::BatchNormFixed { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::BceWithLogits { logit, .. } => vec![logit],
            Op::Pool { inputs, .. } => inputs.iter().collect(),
            Op::ConcatCols { parts } => parts.iter().collect(),
            Op::GatherRows { table, .. } => vec![table],
            Op::AddToRow { x, v, .. } => vec![x, v],
        }
    }

    pub(crate) fn backward(&self, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
        match self {
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    // dA[i,p] = sum_j g[i,j] * b[p,j]
                    let bd = b.data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for (p, dv) in darow.iter_mut().enumerate() {
                            let brow = &bd[p * n..(p + 1) * n];
                            *dv = grow.iter().zip(brow).map(|(gv, bv)| gv * bv).sum();
                        }
                    }
                    accumulate(grads, a, da);
                }
                if b.requires_grad() {
                    // dB = A^T . g
                    let ad = a.data();
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let arow = &ad[i * k..(i + 1) * k];
                        let grow = &g[i * n..(i + 1) * n];
                        for (p, &av) in arow.iter().enumerate() {
                            let drow = &mut db[p * n..(p + 1) * n];
                            for (dv, &gv) in drow.iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Add { a, b } => {
                accumulate(grads, a, g.to_vec());
                accumulate(grads, b, g.to_vec());
            }
            Op::Mul { a, b } => {
                if a.requires_grad() {
                    let bd = b.data();
                    accumulate(grads, a, g.iter().zip(bd.iter()).map(|(gv, bv)| gv * bv).collect());
                }
                if b.requires_grad() {
                    let ad = a.data();
                    accumulate(grads, b, g.iter().zip(ad.iter()).map(|(gv, av)| gv * av).collect());
                }
            }
            Op::AddBias { x, bias } => {
                accumulate(grads, x, g.to_vec());
                if bias.requires_grad() {
                    let n = bias.numel();
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, bias, db);
                }
            }
            Op::Scale { x, c } => {
                accumulate(grads, x, g.iter().map(|v| v * c).collect());
            }
            Op::Silu { x, sig } => {
                if x.requires_grad() {
                    let xd = x.data();
                    let dx = g
                        .iter()
                        .zip(xd.iter().zip(sig.iter()))
                        .map(|(gv, (xv, s))| gv * s * (1.0 + xv * (1.0 - s)))
                        .collect();
                    accumulate(grads, x, dx);
                }
            }
            Op::SoftmaxRows { x, y } => {
                if x.requires_grad() {
                    let cols = x.shape()[1];
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..x.shape()[0] {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let gd = gamma.data();
                if gamma.requires_grad() {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    accumulate(grads, gamma, dg);
                }
                if beta.requires_grad() {
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, beta, db);
                }
                if x.requires_grad() {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let ggam: Vec<f64> = (0..n).map(|c| g[r * n + c] * gd[c]).collect();
                        let mean_g: f64 = ggam.iter().sum::<f64>() / n as f64;
                        let mean_gx: f64 = ggam
                            .iter()
                            .enumerate()
                            .map(|(c, v)| v * xhat[r * n + c])
                            .sum::<f64>()
                            / n as f64;
                        for c in 0..n {
                            dx[r * n + c] =
                                inv_std[r] * (ggam[c] - mean_g - xhat[r * n + c] * mean_gx);
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let gd = gamma.data();
                if gamma.requires_grad() {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                    accumulate(grads, gamma, dg);
                }
                if beta.requires_grad() {
                    let mut db = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, beta, db);
                }
                if x.requires_grad() {
                    let mut dx = vec![0.0; m * n];
                    for c in 0..n {
                        let mut mean_g = 0.0;
                        let mut mean_gx = 0.0;
                        for r in 0..m {
                            let gg = g[r * n + c] * gd[c];
                            mean_g += gg;
                            mean_gx += gg * xhat[r * n + c];
                        }
                        mean_g /= m as f64;
                        mean_gx /= m as f64;
                        for r in 0..m {
                            let gg = g[r * n + c] * gd[c];
                            dx[r * n + c] = inv_std[c] * (gg - mean_g - xhat[r * n + c] * mean_gx);
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::BatchNormFixed { x, gamma, beta, xhat, inv_std } => {
                let n = gamma.numel();
                let gd = gamma.data();
                if gamma.requires_grad() {
                    let mut dg = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        dg[i % n] += gv * xhat[i];
                    }
                    accumulate(grads, gamma, dg);
                }
                if beta.requires_grad() {
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    accumulate(grads, beta, db);
                }
                if x.requires_grad() {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * gd[i % n] * inv_std[i % n])
                        .collect();
                    accumulate(grads, x, dx);
                }
            }
            Op::BceWithLogits { logit, label } => {
                if logit.requires_grad() {
                    let z = logit.data()[0];
                    accumulate(grads, logit, vec![g[0] * (sigmoid(z) - label)]);
                }
            }
            Op::Pool { inputs, method, argmax } => match method {
                PoolMethod::Sum => {
                    for t in inputs {
                        accumulate(grads, t, g.to_vec());
                    }
                }
                PoolMethod::Mean => {
                    let inv = 1.0 / inputs.len() as f64;
                    for t in inputs {
                        accumulate(grads, t, g.iter().map(|v| v * inv).collect());
                    }
                }
                PoolMethod::Max => {
                    for (k, t) in inputs.iter().enumerate() {
                        if !t.requires_grad() {
                            continue;
                        }
                        let dx = g
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| if argmax[i] as usize == k { *gv } else { 0.0 })
                            .collect();
                        accumulate(grads, t, dx);
                    }
                }
            },
            Op::ReduceRows { x, method, argmax } => {
                if !x.requires_grad() {
                    return;
                }
                let (m, n) = (x.shape()[0], x.shape()[1]);
                let mut dx = vec![0.0; m * n];
                match method {
                    PoolMethod::Sum => {
                        for r in 0..m {
                            dx[r * n..(r + 1) * n].copy_from_slice(g);
                        }
                    }
                    PoolMethod::Mean => {
                        let inv = 1.0 / m as f64;
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] = g[c] * inv;
                            }
                        }
                    }
                    PoolMethod::Max => {
                        for c in 0..n {
                            dx[argmax[c] as usize * n + c] = g[c];
                        }
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::Transpose { x } => {
                if x.requires_grad() {
                    let (m, n) = (x.shape()[0], x.shape()[1]);
                    // g has shape [n, m]; transpose back.
                    let mut dx = vec![0.0; m * n];
                    for r in 0..n {
                        for c in 0..m {
                            dx[c * n + r] = g[r * m + c];
                        }
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::SliceCols { x, start, len } => {
                if x.requires_grad() {
                    let (m, n) = (x.shape()[0], x.shape()[1]);
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    accumulate(grads, x, dx);
                }
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
                let m = parts[0].shape()[0];
                let mut offset = 0;
                for p in parts {
                    let w = p.shape()[1];
                    if p.requires_grad() {
                        let mut dp = vec![0.0; m * w];
                        for r in 0..m {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                if table.requires_grad() {
                    let n = table.shape()[1];
                    let mut dt = vec![0.0; table.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..n {
                            dt[id * n + c] += g[r * n + c];
                        }
                    }
                    accumulate(grads, table, dt);
                }
            }
            Op::AddToRow { x, row, v } => {
                accumulate(grads, x, g.to_vec());
                if v.requires_grad() {
                    let n = x.shape()[1];
                    accumulate(grads, v, g[row * n..(row + 1) * n].to_vec());
                }
            }
            Op::Dropout { x, mask } => {
                if x.requires_grad() {
                    accumulate(grads, x, g.iter().zip(mask).map(|(gv, m)| gv * m).collect());
                }
            }
            Op::SumAll { x } => {
                if x.requires_grad() {
                    accumulate(grads, x, vec![g[0]; x.numel()]);
                }
            }
        }
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(TensorError::RankError {
            op,
            expected: 2,
            shape: t.shape().to_vec(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Tensor {
    /// Standard matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = require_rank2("matmul", self)?;
        let (k2, n) = require_rank2("matmul", other)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let a = self.data();
        let b = other.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::Matmul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Add {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
        let out = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Mul {
                a: self.clone(),
                b: other.clone(),
            },
        ))
    }

    /// Row-broadcast bias add: [m,n] + [n].
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (m, n) = require_rank2("add_bias", self)?;
        if bias.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape().to_vec(),
                right: bias.shape().to_vec(),
            });
        }
        let out = {
            let x = self.data();
            let b = bias.data();
            let mut out = Vec::with_capacity(m * n);
            for row in x.chunks_exact(n) {
                out.extend(row.iter().zip(b.iter()).map(|(xv, bv)| xv + bv));
            }
            out
        };
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::AddBias {
                x: self.clone(),
                bias: bias.clone(),
            },
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(out, self.shape().to_vec(), Op::Scale { x: self.clone(), c })
    }

    /// x * sigmoid(x), elementwise.
    pub fn silu(&self) -> Result<Tensor> {
        let (out, sig) = {
            let x = self.data();
            let sig: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
            let out = x.iter().zip(&sig).map(|(v, s)| v * s).collect();
            (out, sig)
        };
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Silu { x: self.clone(), sig },
        ))
    }

    /// Row-wise softmax over the last axis of a [m,n] tensor.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (m, n) = require_rank2("softmax_rows", self)?;
        let out = {
            let x = self.data();
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                let row = &x[r * n..(r + 1) * n];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for (c, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    out[r * n + c] = e;
                    denom += e;
                }
                for v in &mut out[r * n..(r + 1) * n] {
                    *v /= denom;
                }
            }
            out
        };
        Ok(Tensor::from_op(
            out.clone(),
            vec![m, n],
            Op::SoftmaxRows { x: self.clone(), y: out },
        ))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (m, n) = require_rank2("layernorm", self)?;
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                left: self.shape().to_vec(),
                right: gamma.shape().to_vec(),
            });
        }
        let (out, xhat, inv_std) = {
            let x = self.data();
            let gd = gamma.data();
            let bd = beta.data();
            let mut out = vec![0.0; m * n];
            let mut xhat = vec![0.0; m * n];
            let mut inv_std = vec![0.0; m];
            for r in 0..m {
                let row = &x[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..n {
                    let xh = (row[c] - mean) * is;
                    xhat[r * n + c] = xh;
                    out[r * n + c] = gd[c] * xh + bd[c];
                }
            }
            (out, xhat, inv_std)
        };
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                inv_std,
            },
        ))
    }

    /// Numerically stable binary cross-entropy on a single logit.
    /// loss = log(1 + exp(-(2*label - 1) * logit)).
    pub fn bce_with_logits(&self, label: f64) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(TensorError::RankError {
                op: "bce_with_logits",
                expected: 1,
                shape: self.shape().to_vec(),
            });
        }
        if label != 0.0 && label != 1.0 {
            return Err(TensorError::InvalidLabel { label });
        }
        let z = self.data()[0];
        let sign = 2.0 * label - 1.0;
        let loss = softplus(-sign * z);
        Ok(Tensor::from_op(
            vec![loss],
            vec![1],
            Op::BceWithLogits {
                logit: self.clone(),
                label,
            },
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = require_rank2("transpose", self)?;
        let out = {
            let x = self.data();
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                for c in 0..n {
                    out[c * m + r] = x[r * n + c];
                }
            }
            out
        };
        Ok(Tensor::from_op(out, vec![n, m], Op::Transpose { x: self.clone() }))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        let (m, n) = require_rank2("slice_cols", self)?;
        if start + len > n {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                bound: n,
            });
        }
        let out = {
            let x = self.data();
            let mut out = Vec::with_capacity(m * len);
            for r in 0..m {
                out.extend_from_slice(&x[r * n + start..r * n + start + len]);
            }
            out
        };
        Ok(Tensor::from_op(
            out,
            vec![m, len],
            Op::SliceCols {
                x: self.clone(),
                start,
                len,
            },
        ))
    }

    /// Reduce over rows: [m,n] -> [1,n]. Max ties break to the lowest row.
    pub fn reduce_rows(&self, method: PoolMethod) -> Result<Tensor> {
        let (m, n) = require_rank2("reduce_rows", self)?;
        if m == 0 {
            return Err(TensorError::EmptyInput { op: "reduce_rows" });
        }
        let (out, argmax) = {
            let x = self.data();
            let mut out = vec![0.0; n];
            let mut argmax = vec![0u32; n];
            match method {
                PoolMethod::Sum | PoolMethod::Mean => {
                    for r in 0..m {
                        for c in 0..n {
                            out[c] += x[r * n + c];
                        }
                    }
                    if method == PoolMethod::Mean {
                        for v in &mut out {
                            *v /= m as f64;
                        }
                    }
                }
                PoolMethod::Max => {
                    out.copy_from_slice(&x[..n]);
                    for r in 1..m {
                        for c in 0..n {
                            if x[r * n + c] > out[c] {
                                out[c] = x[r * n + c];
                                argmax[c] = r as u32;
                            }
                        }
                    }
                }
            }
            (out, argmax)
        };
        Ok(Tensor::from_op(
            out,
            vec![1, n],
            Op::ReduceRows {
                x: self.clone(),
                method,
                argmax,
            },
        ))
    }

    /// Sum of all elements into a scalar of shape [1].
    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.data().iter().sum();
        Ok(Tensor::from_op(vec![s], vec![1], Op::SumAll { x: self.clone() }))
    }

    /// Inverted dropout: kept units are scaled by 1/(1-p).
    pub fn dropout<R: Rng>(&self, p: f64, rng: &mut R) -> Result<Tensor> {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let out = self.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::Dropout { x: self.clone(), mask },
        ))
    }
}

/// Elementwise reduction over a stack of same-shape tensors.
/// Max ties break to the lowest stack index.
pub fn pool(stack: &[Tensor], method: PoolMethod) -> Result<Tensor> {
    if stack.is_empty() {
        return Err(TensorError::EmptyStack);
    }
    let shape = stack[0].shape().to_vec();
    for t in &stack[1..] {
        if t.shape() != shape {
            return Err(TensorError::ShapeMismatch {
                op: "pool",
                left: shape,
                right: t.shape().to_vec(),
            });
        }
    }
    let numel = stack[0].numel();
    let mut out = stack[0].to_vec();
    let mut argmax = vec![0u32; if method == PoolMethod::Max { numel } else { 0 }];
    for (k, t) in stack.iter().enumerate().skip(1) {
        let d = t.data();
        match method {
            PoolMethod::Sum | PoolMethod::Mean => {
                for (o, v) in out.iter_mut().zip(d.iter()) {
                    *o += v;
                }
            }
            PoolMethod::Max => {
                for (i, (o, v)) in out.iter_mut().zip(d.iter()).enumerate() {
                    if *v > *o {
                        *o = *v;
                        argmax[i] = k as u32;
                    }
                }
            }
        }
    }
    if method == PoolMethod::Mean {
        let inv = 1.0 / stack.len() as f64;
        for v in &mut out {
            *v *= inv;
        }
    }
    Ok(Tensor::from_op(
        out,
        shape,
        Op::Pool {
            inputs: stack.to_vec(),
            method,
            argmax,
        },
    ))
}

/// Concatenate [m,n_i] tensors along columns.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::EmptyStack);
    }
    let m = require_rank2("concat_cols", &parts[0])?.0;
    let mut total = 0;
    for p in parts {
        let (pm, pn) = require_rank2("concat_cols", p)?;
        if pm != m {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: parts[0].shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        total += pn;
    }
    let mut out = Vec::with_capacity(m * total);
    for r in 0..m {
        for p in parts {
            let n = p.shape()[1];
            out.extend_from_slice(&p.data()[r * n..(r + 1) * n]);
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![m, total],
        Op::ConcatCols { parts: parts.to_vec() },
    ))
}

/// Gather rows of a [v,n] table by index: output [ids.len(), n].
pub fn gather_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (v, n) = require_rank2("gather_rows", table)?;
    let mut out = Vec::with_capacity(ids.len() * n);
    {
        let d = table.data();
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&d[id * n..(id + 1) * n]);
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![ids.len(), n],
        Op::GatherRows {
            table: table.clone(),
            ids: ids.to_vec(),
        },
    ))
}

/// Add a [1,n] (or [n]) vector onto one row of a [m,n] tensor.
pub fn add_to_row(x: &Tensor, row: usize, v: &Tensor) -> Result<Tensor> {
    let (m, n) = require_rank2("add_to_row", x)?;
    if row >= m {
        return Err(TensorError::IndexOutOfBounds {
            op: "add_to_row",
            index: row,
            bound: m,
        });
    }
    if v.numel() != n {
        return Err(TensorError::ShapeMismatch {
            op: "add_to_row",
            left: x.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let out = {
        let xd = x.data();
        let vd = v.data();
        let mut out = xd.clone();
        for (o, add) in out[row * n..(row + 1) * n].iter_mut().zip(vd.iter()) {
            *o += add;
        }
        out
    };
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        Op::AddToRow {
            x: x.clone(),
            row,
            v: v.clone(),
        },
    ))
}

/// Train-mode batch normalization over columns of x[m,n] using batch
/// statistics (population variance). Returns the output plus the batch
/// mean/var so the caller can maintain running statistics.
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (m, n) = require_rank2("batchnorm", x)?;
    if m < 2 {
        return Err(TensorError::DegenerateBatch { batch: m });
    }
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    let (out, xhat, inv_std, mean, var) = {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut mean = vec![0.0; n];
        let mut var = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                mean[c] += xd[r * n + c];
            }
        }
        for v in &mut mean {
            *v /= m as f64;
        }
        for r in 0..m {
            for c in 0..n {
                let d = xd[r * n + c] - mean[c];
                var[c] += d * d;
            }
        }
        for v in &mut var {
            *v /= m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                let xh = (xd[r * n + c] - mean[c]) * inv_std[c];
                xhat[r * n + c] = xh;
                out[r * n + c] = gd[c] * xh + bd[c];
            }
        }
        (out, xhat, inv_std, mean, var)
    };
    let t = Tensor::from_op(
        out,
        vec![m, n],
        Op::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
        },
    );
    Ok((t, mean, var))
}

/// Eval-mode batch normalization with fixed (running) statistics.
pub fn batchnorm_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &[f64],
    running_var: &[f64],
    eps: f64,
) -> Result<Tensor> {
    let (m, n) = require_rank2("batchnorm", x)?;
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(TensorError::ShapeMismatch {
            op: "batchnorm",
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
        });
    }
    assert_eq!(running_mean.len(), n);
    assert_eq!(running_var.len(), n);
    let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let (out, xhat) = {
        let xd = x.data();
        let gd = gamma.data();
        let bd = beta.data();
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                let xh = (xd[r * n + c] - running_mean[c]) * inv_std[c];
                xhat[r * n + c] = xh;
                out[r * n + c] = gd[c] * xh + bd[c];
            }
        }
        (out, xhat)
    };
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        Op::BatchNormFixed {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            xhat,
            inv_std,
        },
    ))
}
