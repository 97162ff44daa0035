use serde::{Deserialize, Serialize};

use crate::calibration::RatioSet;
use crate::error::{Error, Result};

/// Architecture of a nested VAE.
///
/// With `L = block_out_channels.len()` and `d = log2(f3)`, the first `L - d`
/// encoder blocks keep resolution and each of the last `d` halves it. The tap
/// for ratio `f` is the output of the block whose cumulative factor is `f`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NestedVaeConfig {
    pub resolution: usize,
    pub in_channels: usize,
    pub block_out_channels: Vec<usize>,
    pub latent_channels: usize,
    pub ratios: RatioSet,
    pub middle_block_units: usize,
    pub norm_groups: usize,
}

impl Default for NestedVaeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NestedVaeConfig {
    /// The CPU-trainable default: 64px, four blocks, ratios (4,8,16).
    pub fn desk() -> Self {
        NestedVaeConfig {
            resolution: 64,
            in_channels: 3,
            block_out_channels: vec![32, 64, 64, 128],
            latent_channels: 4,
            ratios: RatioSet { f1: 4, f2: 8, f3: 16 },
            middle_block_units: 2,
            norm_groups: 8,
        }
    }

    /// Tiny configuration used for finite-difference checks.
    pub fn smallest() -> Self {
        NestedVaeConfig {
            resolution: 8,
            in_channels: 3,
            block_out_channels: vec![4, 4, 4],
            latent_channels: 2,
            ratios: RatioSet { f1: 2, f2: 4, f3: 8 },
            middle_block_units: 1,
            norm_groups: 1,
        }
    }

    /// Scaled-down variant with the given resolution, latent width and ratios.
    pub fn compact(resolution: usize, latent_channels: usize, ratios: RatioSet) -> Self {
        let depth = ratios.f3.trailing_zeros() as usize;
        NestedVaeConfig {
            resolution,
            in_channels: 3,
            block_out_channels: vec![8; depth.max(1)],
            latent_channels,
            ratios,
            middle_block_units: 1,
            norm_groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        RatioSet::new(self.ratios.f1, self.ratios.f2, self.ratios.f3)?;
        if self.in_channels != 3 {
            return cfg(format!("in_channels must be 3, got {}", self.in_channels));
        }
        if self.latent_channels == 0 {
            return cfg("latent_channels must be >= 1".into());
        }
        if self.norm_groups == 0 {
            return cfg("norm_groups must be >= 1".into());
        }
        if self.block_out_channels.is_empty() || self.block_out_channels.contains(&0) {
            return cfg(format!("block_out_channels must be non-empty and positive: {:?}", self.block_out_channels));
        }
        let f3 = self.ratios.f3 as usize;
        if self.resolution == 0 || !self.resolution.is_multiple_of(f3) {
            return cfg(format!("resolution {} not divisible by f3 = {f3}", self.resolution));
        }
        if self.ratios.f1 < 2 {
            return cfg("f1 must be at least 2 so every tap follows a block".into());
        }
        let d = self.downsampling_blocks();
        if self.block_out_channels.len() < d {
            return cfg(format!(
                "{} blocks cannot reach factor {f3}; need at least {d}",
                self.block_out_channels.len()
            ));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.block_out_channels.len()
    }

    /// `log2(f3)`.
    pub fn downsampling_blocks(&self) -> usize {
        self.ratios.f3.trailing_zeros() as usize
    }

    /// Whether encoder block `k` starts with a stride-2 convolution.
    pub fn block_downsamples(&self, k: usize) -> bool {
        k >= self.num_blocks() - self.downsampling_blocks()
    }

    /// Encoder block whose output is the tap for `ratio`.
    pub fn tap_block(&self, ratio: u32) -> Result<usize> {
        if !self.ratios.contains(ratio) {
            return Err(Error::Config(format!("ratio {ratio} not in {}", self.ratios)));
        }
        Ok(self.num_blocks() - self.downsampling_blocks() + ratio.trailing_zeros() as usize - 1)
    }

    /// Width of the shared middle block.
    pub fn mid_channels(&self) -> usize {
        *self.block_out_channels.last().expect("validated")
    }

    /// Spatial side of the latent for `ratio`.
    pub fn latent_side(&self, ratio: u32) -> usize {
        self.resolution / ratio as usize
    }
}
