use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Everything needed to rebuild a detector
/// from a checkpoint lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Channel width of the pyramid and the object queries.
    pub d: usize,
    pub queries: usize,
    /// Attention heads; also the number of salient points per reference box.
    pub heads: usize,
    pub levels: usize,
    /// Sampling points per head and level.
    pub points: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_classes: usize,
    /// Output channels of each stride-2 convolution. The last `levels`
    /// stages feed the pyramid.
    pub backbone_channels: Vec<usize>,
    pub ffn_dim: usize,
    pub roi_grid: usize,
    pub salient_hidden: usize,
    /// Semantic aligner on/off. Off means each query is repeated across the
    /// heads before cross-attention.
    pub semantic_aligner: bool,
}

impl DetectorConfig {
    /// Small configuration that trains on one core in minutes.
    pub fn desk() -> Self {
        Self {
            image_height: 64,
            image_width: 64,
            d: 32,
            queries: 10,
            heads: 4,
            levels: 4,
            points: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            num_classes: 2,
            backbone_channels: vec![8, 16, 32, 32, 32, 32],
            ffn_dim: 64,
            roi_grid: 7,
            salient_hidden: 64,
            semantic_aligner: true,
        }
    }

    /// Full-width configuration (d = 256, 8 heads, 300 queries, 6 + 6 layers).
    pub fn full() -> Self {
        Self {
            image_height: 256,
            image_width: 256,
            d: 256,
            queries: 300,
            heads: 8,
            levels: 4,
            points: 4,
            encoder_layers: 6,
            decoder_layers: 6,
            num_classes: 1,
            backbone_channels: vec![32, 64, 128, 256, 256, 256],
            ffn_dim: 1024,
            roi_grid: 7,
            salient_hidden: 256,
            semantic_aligner: true,
        }
    }

    /// Total downsampling factor of the backbone.
    pub fn max_stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    /// `(H_l, W_l)` of every pyramid level.
    pub fn level_shapes(&self) -> Vec<(usize, usize)> {
        let first = self.backbone_channels.len() - self.levels;
        (first..self.backbone_channels.len())
            .map(|s| (self.image_height >> (s + 1), self.image_width >> (s + 1)))
            .collect()
    }

    /// Width of the tensor entering decoder cross-attention.
    pub fn cross_attn_width(&self) -> usize {
        self.heads * self.d
    }

    /// Pyramid level read by decoder layer `layer`.
    pub fn routed_level(&self, layer: usize) -> usize {
        layer % self.levels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(format!("invalid detector config: {m}")));
        if self.d == 0 || !self.d.is_multiple_of(4) {
            return fail(format!("d = {} must be a positive multiple of 4", self.d));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} is not divisible by {} heads", self.d, self.heads));
        }
        if self.levels == 0 || self.levels > self.backbone_channels.len() {
            return fail(format!(
                "{} levels need at least as many backbone stages (have {})",
                self.levels,
                self.backbone_channels.len()
            ));
        }
        if self.backbone_channels.contains(&0) {
            return fail("backbone stage with zero channels".into());
        }
        let s = self.max_stride();
        if self.image_height == 0
            || self.image_width == 0
            || !self.image_height.is_multiple_of(s)
            || !self.image_width.is_multiple_of(s)
        {
            return fail(format!(
                "image {}x{} is not divisible by the backbone stride {s}",
                self.image_width, self.image_height
            ));
        }
        if self.queries == 0 || self.points == 0 || self.num_classes == 0 {
            return fail("queries, points and classes must be positive".into());
        }
        if self.roi_grid == 0 || self.ffn_dim == 0 || self.salient_hidden == 0 {
            return fail("roi grid, ffn and salient widths must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_levels_follow_strides() {
        let c = DetectorConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.level_shapes(), vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
    }

    #[test]
    fn full_cross_attn_width() {
        let c = DetectorConfig::full();
        c.validate().unwrap();
        assert_eq!(c.cross_attn_width(), 2048);
    }

    #[test]
    fn round_robin_routing() {
        let mut c = DetectorConfig::desk();
        c.decoder_layers = 6;
        let r: Vec<usize> = (0..6).map(|i| c.routed_level(i)).collect();
        assert_eq!(r, vec![0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn rejects_indivisible_image() {
        let mut c = DetectorConfig::desk();
        c.image_width = 60;
        assert!(c.validate().is_err());
    }
}
