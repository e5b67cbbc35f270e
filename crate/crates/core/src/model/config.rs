use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the feature encoder and vector field estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VfeConfig {
    /// ConvNeXt blocks per U-Net stage; one resolution halving between stages.
    pub stage_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    pub base_channels: usize,
    /// Conditioning feature width `D`.
    pub d_cond: usize,
    pub total_bins: usize,
    pub min_cutoff_bins: usize,
    pub block_kernel: usize,
    pub block_expansion: usize,
    pub encoder_channels: usize,
    /// Convolution layers in the feature encoder.
    pub encoder_layers: usize,
    pub encoder_kernel: usize,
    /// Frequency bins left after adaptive pooling in the encoder.
    pub pool_bins: usize,
    /// Input rates with a learned sampling-rate embedding, ascending.
    pub rates: Vec<u32>,
    /// Multiplier applied to `t` before the sinusoidal time embedding.
    pub time_scale: f64,
}

impl Default for VfeConfig {
    fn default() -> Self {
        Self {
            stage_depths: vec![2, 2, 4, 2],
            bottleneck_depth: 3,
            base_channels: 96,
            d_cond: 384,
            total_bins: 512,
            min_cutoff_bins: 80,
            block_kernel: 7,
            block_expansion: 4,
            encoder_channels: 384,
            encoder_layers: 4,
            encoder_kernel: 3,
            pool_bins: 4,
            rates: vec![8000, 12000, 16000, 24000],
            time_scale: 1000.0,
        }
    }
}

impl VfeConfig {
    /// Small model used for desk-scale training runs.
    pub fn toy() -> Self {
        Self {
            stage_depths: vec![1, 1, 1, 1],
            bottleneck_depth: 1,
            base_channels: 16,
            d_cond: 32,
            encoder_channels: 32,
            ..Self::default()
        }
    }

    /// Smallest configuration; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            stage_depths: vec![1, 1, 1, 1],
            bottleneck_depth: 1,
            base_channels: 8,
            d_cond: 16,
            encoder_channels: 8,
            ..Self::default()
        }
    }

    pub fn n_stages(&self) -> usize {
        self.stage_depths.len()
    }

    pub fn gen_bins(&self) -> usize {
        self.total_bins - self.min_cutoff_bins
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        (0..self.n_stages())
            .map(|i| self.base_channels << i)
            .collect()
    }

    /// Spatial multiple required by the U-Net halvings.
    pub fn resolution_multiple(&self) -> usize {
        1 << (self.n_stages() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_stages() == 0 {
            return fail("at least one U-Net stage required".into());
        }
        if self.d_cond % 2 != 0 {
            return fail(format!("d_cond {} must be even", self.d_cond));
        }
        if self.min_cutoff_bins >= self.total_bins {
            return fail("min_cutoff_bins must be below total_bins".into());
        }
        if self.gen_bins() % self.resolution_multiple() != 0 {
            return fail(format!(
                "generation band of {} bins is not divisible by {}",
                self.gen_bins(),
                self.resolution_multiple()
            ));
        }
        if self.block_kernel % 2 == 0 || self.encoder_kernel % 2 == 0 {
            return fail("kernel sizes must be odd".into());
        }
        if self.encoder_layers == 0 || self.pool_bins == 0 {
            return fail("encoder needs at least one layer and one pooled bin".into());
        }
        if self.rates.is_empty() || self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return fail("rates must be non-empty and strictly increasing".into());
        }
        Ok(())
    }

    /// Index of the supported rate closest to `rate`.
    pub fn rate_index(&self, rate: u32) -> usize {
        self.rates
            .iter()
            .enumerate()
            .min_by_key(|(_, &r)| (r as i64 - rate as i64).unsigned_abs())
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}
