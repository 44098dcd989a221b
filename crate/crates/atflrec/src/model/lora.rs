//! Low-rank adapters: y = x.W + bias + (alpha/r) . (x.A) . B attached to a
//! frozen base weight. Only A and B train; B starts at zero so a fresh
//! adapter is an exact identity over the frozen linear.

use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelError, Result};
use crate::tensor::Tensor;

pub struct LoraAdapter {
    pub name: String,
    /// [in, r], Gaussian-initialized.
    pub a: Tensor,
    /// [r, out], zero-initialized.
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn init(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rank: usize,
        alpha: f64,
        rng: &mut ChaCha20Rng,
    ) -> Result<LoraAdapter> {
        if rank == 0 {
            return Err(ModelError::Config(format!("adapter {name}: rank must be >= 1")));
        }
        let dist = Normal::new(0.0, 1.0 / (in_dim as f64).sqrt()).unwrap();
        let a: Vec<f64> = (0..in_dim * rank).map(|_| dist.sample(rng)).collect();
        Ok(LoraAdapter {
            name: name.to_string(),
            a: Tensor::leaf(a, &[in_dim, rank], true)?,
            b: Tensor::zeros(&[rank, out_dim], true),
            rank,
            alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// (alpha/r) . (x.A) . B
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.a)?.matmul(&self.b)?.scale(self.scaling()))
    }

    /// W' = W + (alpha/r) . A . B as a plain buffer.
    pub fn merged_weight(&self, w: &Tensor) -> Vec<f64> {
        let (in_dim, out_dim) = (w.shape()[0], w.shape()[1]);
        let a = self.a.data();
        let b = self.b.data();
        let s = self.scaling();
        let mut merged = w.to_vec();
        for i in 0..in_dim {
            for r in 0..self.rank {
                let av = a[i * self.rank + r] * s;
                let brow = &b[r * out_dim..(r + 1) * out_dim];
                let mrow = &mut merged[i * out_dim..(i + 1) * out_dim];
                for (m, &bv) in mrow.iter_mut().zip(brow) {
                    *m += av * bv;
                }
            }
        }
        merged
    }
}

/// The adapted linear. With no adapter (or adapters disabled) this is the
/// plain frozen projection.
pub fn lora_linear(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    adapter: Option<&LoraAdapter>,
    adapters_enabled: bool,
) -> Result<Tensor> {
    let base = x.matmul(w)?.add_bias(bias)?;
    match adapter {
        Some(a) if adapters_enabled => Ok(base.add(&a.delta(x)?)?),
        _ => Ok(base),
    }
}
