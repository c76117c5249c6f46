use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::conv::Padding;
use crate::tensor::Precision;

/// Number of stages in a dense module: DWSC, 3×3 conv, 1×1 bottleneck,
/// 3×3 conv, DWSC, DWSC.
pub const DENSE_STAGES: usize = 6;

/// Architecture and ablation switches for [`super::ModelGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side length of the square input image.
    pub input_size: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    /// Filters of the single 3×3 convolution in blocks 1 to 3.
    pub block_filters: [usize; 3],
    /// Output channels of the six stages of the dense module in block 4.
    pub dense_module1: Vec<usize>,
    /// Output channels of the six stages of the dense module in block 5.
    pub dense_module2: Vec<usize>,
    /// Filters `B` of the attention branch.
    pub sam_filters: usize,
    /// Residual connection from the block-3 output to the block-5 input.
    pub enable_skip1: bool,
    /// Spatial attention branch from the middle of block 4 to the classifier.
    pub enable_sam: bool,
    /// Replace the dilated 3×3 convolution of the branch by a plain 5×5 one.
    pub sam_uses_plain_conv5x5: bool,
    /// Where the branch taps block 4: 0 is the dense-module input, `s` the
    /// output of stage `s` (3 = the 1×1 bottleneck).
    pub sam_tap_stage: usize,
    /// Padding of the two 5×5 DWSC stages of the branch.
    pub sam_stage_padding: Padding,
    /// Whether each of the five blocks ends with a 2×2 max pool.
    pub block_pooling: [bool; 5],
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            input_channels: 1,
            num_classes: 4,
            block_filters: [32, 64, 96],
            dense_module1: vec![128, 128, 64, 160, 160, 160],
            dense_module2: vec![192, 192, 96, 224, 224, 224],
            sam_filters: 96,
            enable_skip1: true,
            enable_sam: true,
            sam_uses_plain_conv5x5: false,
            sam_tap_stage: 3,
            sam_stage_padding: Padding::Valid,
            block_pooling: [true; 5],
            seed: 0,
            precision: Precision::Single,
        }
    }
}

impl ModelConfig {
    /// Default topology with every channel count divided by `divisor`
    /// (rounded up, at least 1).
    pub fn width_reduced(divisor: usize) -> Self {
        let d = divisor.max(1);
        let shrink = |c: usize| c.div_ceil(d).max(1);
        let base = Self::default();
        Self {
            block_filters: base.block_filters.map(shrink),
            dense_module1: base.dense_module1.iter().map(|&c| shrink(c)).collect(),
            dense_module2: base.dense_module2.iter().map(|&c| shrink(c)).collect(),
            sam_filters: shrink(base.sam_filters),
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_size == 0 || self.input_channels == 0 {
            return bad("input size and channel count must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.block_filters.contains(&0) {
            return bad("block filters must be positive".into());
        }
        for (name, plan) in [("dense_module1", &self.dense_module1), ("dense_module2", &self.dense_module2)] {
            if plan.len() != DENSE_STAGES {
                return bad(format!(
                    "{name} must list {DENSE_STAGES} stage widths, got {}",
                    plan.len()
                ));
            }
            if plan.contains(&0) {
                return bad(format!("{name} stage widths must be positive"));
            }
        }
        if self.sam_filters == 0 {
            return bad("sam_filters must be positive".into());
        }
        if self.sam_uses_plain_conv5x5 && !self.enable_sam {
            return bad("sam_uses_plain_conv5x5 requires enable_sam".into());
        }
        if self.sam_tap_stage > DENSE_STAGES {
            return bad(format!(
                "sam_tap_stage must be within 0..={DENSE_STAGES}, got {}",
                self.sam_tap_stage
            ));
        }
        Ok(())
    }
}
