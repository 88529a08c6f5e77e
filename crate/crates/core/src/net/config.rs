use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// `C`; stage widths are `[C, 2C, 4C, 8C]`.
    pub base_channels: usize,
    pub depths: [usize; 4],
    /// `N`, states per scanned channel.
    pub state_dim: usize,
    /// Common width of the fused levels and the decoder.
    pub sdi_channels: usize,
    pub input_size: (usize, usize),
    pub deep_supervision: bool,
    pub num_classes: usize,
    /// Inner width of a VSS block relative to its stage width.
    pub ssm_ratio: f64,
}

impl ModelConfig {
    /// Total spatial reduction from input to the deepest level.
    pub const STRIDE: usize = 32;

    /// 256x256, `C = 96`, depths `[2, 2, 9, 2]`.
    pub fn full() -> Self {
        Self {
            in_channels: 3,
            base_channels: 96,
            depths: [2, 2, 9, 2],
            state_dim: 16,
            sdi_channels: 96,
            input_size: (256, 256),
            deep_supervision: true,
            num_classes: 1,
            ssm_ratio: 1.5,
        }
    }

    /// 64x64, `C = 16`, depths `[1, 1, 2, 1]`, `N = 8`.
    pub fn desk() -> Self {
        Self {
            base_channels: 16,
            depths: [1, 1, 2, 1],
            state_dim: 8,
            sdi_channels: 16,
            input_size: (64, 64),
            ..Self::full()
        }
    }

    /// 32x32 with four channels, for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            base_channels: 4,
            depths: [1, 1, 1, 1],
            state_dim: 2,
            sdi_channels: 4,
            input_size: (32, 32),
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % Self::STRIDE != 0 || w % Self::STRIDE != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be a positive multiple of {}",
                Self::STRIDE
            )));
        }
        if let Some(d) = self.depths.iter().position(|&d| d == 0) {
            return Err(Error::Config(format!("stage {} has depth 0", d + 1)));
        }
        for (name, v) in [
            ("in_channels", self.in_channels),
            ("base_channels", self.base_channels),
            ("state_dim", self.state_dim),
            ("sdi_channels", self.sdi_channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.num_classes != 1 {
            return Err(Error::Config(format!(
                "only binary masks are supported (num_classes = 1), got {}",
                self.num_classes
            )));
        }
        if !(self.ssm_ratio.is_finite() && self.ssm_ratio > 0.0) {
            return Err(Error::Config(format!("ssm_ratio must be positive, got {}", self.ssm_ratio)));
        }
        Ok(())
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Spatial size of level `i` (0-based) for an `h x w` input.
    pub fn level_size(h: usize, w: usize, i: usize) -> (usize, usize) {
        (h >> (i + 2), w >> (i + 2))
    }

    /// Inner width of the VSS blocks of stage `s`.
    pub fn inner_channels(&self, s: usize) -> usize {
        ((self.ssm_ratio * self.stage_channels()[s] as f64).round() as usize).max(1)
    }

    pub fn heads(&self) -> usize {
        if self.deep_supervision {
            2
        } else {
            1
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
