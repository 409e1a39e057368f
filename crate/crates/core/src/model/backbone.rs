//! Strided convolutional backbone producing the multi-level feature pyramid.

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear};
use crate::tensor::{Conv2dSpec, ParamGroup, ParamId, Var};

use super::DetectorConfig;

#[derive(Debug, Clone)]
pub struct ConvStage {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A chain of 3x3 stride-2 convolutions with ReLU. The outputs of the last
/// `levels` stages are projected to `d` channels and layer-normalized.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub stages: Vec<ConvStage>,
    pub projections: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
    image_height: usize,
    image_width: usize,
    shapes: Vec<(usize, usize)>,
}

const SPEC: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1 };

impl Backbone {
    pub fn new(init: &mut Init, config: &DetectorConfig) -> Self {
        let saved = init.group;
        init.group = ParamGroup::Backbone;
        let mut c_in = 3;
        let mut stages = Vec::new();
        for (i, &c_out) in config.backbone_channels.iter().enumerate() {
            stages.push(ConvStage {
                weight: init.xavier(&format!("backbone.conv{i}.weight"), &[c_out, c_in, 3, 3], c_in * 9, c_out * 9),
                bias: init.zeros(&format!("backbone.conv{i}.bias"), &[c_out]),
            });
            c_in = c_out;
        }
        init.group = saved;
        let first = config.backbone_channels.len() - config.levels;
        let mut projections = Vec::new();
        let mut norms = Vec::new();
        for l in 0..config.levels {
            let c = config.backbone_channels[first + l];
            projections.push(Linear::new(init, &format!("input_proj.{l}"), c, config.d));
            norms.push(LayerNorm::new(init, &format!("input_proj.{l}.norm"), config.d));
        }
        Self {
            stages,
            projections,
            norms,
            image_height: config.image_height,
            image_width: config.image_width,
            shapes: config.level_shapes(),
        }
    }

    /// `image: [3, H, W]`. Returns one `[H_l * W_l, d]` map per level.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: Var<'t>) -> Result<Vec<Var<'t>>> {
        let s = image.shape();
        if s != [3, self.image_height, self.image_width] {
            return Err(Error::contract(format!(
                "backbone expects a 3x{}x{} image, got {s:?}",
                self.image_height, self.image_width
            )));
        }
        let first = self.stages.len() - self.projections.len();
        let mut x = image;
        let mut levels = Vec::with_capacity(self.projections.len());
        for (i, stage) in self.stages.iter().enumerate() {
            x = x.conv2d(ctx.param(stage.weight), ctx.param(stage.bias), SPEC)?.relu();
            if i >= first {
                let l = i - first;
                let (h, w) = self.shapes[l];
                let c = x.shape()[0];
                let tokens = x.permute(&[1, 2, 0])?.reshape(&[h * w, c])?;
                let proj = self.projections[l].forward(ctx, tokens)?;
                levels.push(self.norms[l].forward(ctx, proj)?);
            }
        }
        Ok(levels)
    }
}
