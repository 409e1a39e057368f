//! Decoder layers: semantic aligner, deformable cross-attention,
//! query self-attention and FFN.

use crate::aligner::{project_ref_boxes, project_ref_points, SemanticAligner};
use crate::deform::{FeaturePyramid, MsDeformAttn, MsDeformAttnConfig};
use crate::error::Result;
use crate::nn::{Ctx, Init, LayerNorm, Mlp, MultiHeadAttention};
use crate::tensor::{Tensor, Var};

use super::DetectorConfig;

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub aligner: SemanticAligner,
    pub cross_attn: MsDeformAttn,
    pub norm_cross: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub ffn: Mlp,
    pub norm_ffn: LayerNorm,
    pub level: usize,
    pub use_aligner: bool,
}

/// What one decoder layer computed.
pub struct DecoderStep<'t> {
    /// Updated query content `[N, d]`.
    pub state: Var<'t>,
    pub ref_boxes: Var<'t>,
    pub ref_points: Var<'t>,
    /// Query entering cross-attention, `[N, M * d]`.
    pub cross_query: Var<'t>,
    /// Pyramid level the aligner read.
    pub level: usize,
    /// `[N, M, 2]`, present when the aligner is enabled.
    pub salient_points: Option<Var<'t>>,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, index: usize, config: &DetectorConfig) -> Result<Self> {
        let name = format!("decoder.{index}");
        let d = config.d;
        let m = config.heads;
        let cross_attn = MsDeformAttn::new(
            init,
            &format!("{name}.cross_attn"),
            MsDeformAttnConfig {
                query_dim: m * d,
                value_dim: d,
                hidden_dim: m * d,
                out_dim: d,
                heads: m,
                levels: config.levels,
                points: config.points,
            },
        )?;
        Ok(Self {
            aligner: SemanticAligner::new(
                init,
                &format!("{name}.sam"),
                d,
                m,
                config.roi_grid,
                config.salient_hidden,
            ),
            cross_attn,
            norm_cross: LayerNorm::new(init, &format!("{name}.norm_cross"), d),
            self_attn: MultiHeadAttention::new(init, &format!("{name}.self_attn"), d, m)?,
            norm_self: LayerNorm::new(init, &format!("{name}.norm_self"), d),
            ffn: Mlp::new(init, &format!("{name}.ffn"), &[d, config.ffn_dim, d]),
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), d),
            level: config.routed_level(index),
            use_aligner: config.semantic_aligner,
        })
    }

    /// `content`, `pos`: `[N, d]`; `memory`: encoded pyramid.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        content: Var<'t>,
        pos: Var<'t>,
        memory: &FeaturePyramid<'t>,
    ) -> Result<DecoderStep<'t>> {
        let n = content.shape()[0];
        let m = self.aligner.heads;
        let (ref_boxes, ref_points, cross_query, salient_points) = if self.use_aligner {
            let level = memory.level(self.level)?;
            let a = self.aligner.forward(ctx, content, pos, level)?;
            (a.ref_boxes, a.ref_points, a.content.add(a.pos)?, Some(a.salient_points))
        } else {
            let ref_boxes = project_ref_boxes(ctx, &self.aligner.box_proj, pos)?;
            let ref_points = project_ref_points(ctx, &self.aligner.point_proj, ref_boxes)?;
            let d = content.shape()[1];
            let q = content.add(pos)?.reshape(&[n, 1, d])?;
            let tiled = q.add(ctx.constant(Tensor::zeros([1, m, d])))?.reshape(&[n, m * d])?;
            (ref_boxes, ref_points, tiled, None)
        };
        let cross = self
            .cross_attn
            .forward(ctx, cross_query, ref_points, memory.flat, &memory.layout)?;
        let x = self.norm_cross.forward(ctx, content.add(cross)?)?;
        let qk = x.add(pos)?;
        let attended = self.self_attn.forward(ctx, qk, qk, x)?;
        let x = self.norm_self.forward(ctx, x.add(attended)?)?;
        let ffn = self.ffn.forward(ctx, x)?;
        let state = self.norm_ffn.forward(ctx, x.add(ffn)?)?;
        Ok(DecoderStep {
            state,
            ref_boxes,
            ref_points,
            cross_query,
            level: self.level,
            salient_points,
        })
    }
}
