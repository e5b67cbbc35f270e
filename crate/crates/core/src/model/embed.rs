//! Fixed sinusoidal embeddings.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

fn frequencies(dim: usize) -> impl Iterator<Item = f64> {
    (0..dim / 2).map(move |i| 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64))
}

/// `num_bins x dim` table; row `k` interleaves `sin(k w_i)` and `cos(k w_i)`
/// with `w_i = 10000^(-2i/dim)`.
pub fn freq_positional_embedding(num_bins: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "embedding width {dim} must be even"
        )));
    }
    let mut out = Vec::with_capacity(num_bins * dim);
    for k in 0..num_bins {
        for w in frequencies(dim) {
            let a = k as f64 * w;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Ok(out)
}

pub fn positional_tensor(
    num_bins: usize,
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let v = freq_positional_embedding(num_bins, dim)?;
    Ok(Tensor::from_vec(v, (num_bins, dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal features of scaled times, `[N, dim]`.
pub fn time_features(
    t: &[f64],
    scale: f64,
    dim: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        for w in frequencies(dim) {
            let a = ti * scale * w;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), device)?.to_dtype(dtype)?)
}
