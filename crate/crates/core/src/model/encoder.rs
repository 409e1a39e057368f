//! Deformable self-attention encoder over the flattened pyramid.

use crate::deform::{LevelLayout, MsDeformAttn, MsDeformAttnConfig};
use crate::error::Result;
use crate::nn::{Ctx, Init, LayerNorm, Mlp};
use crate::posenc::encode_grid;
use crate::tensor::{ParamId, Tensor, Var};

use super::DetectorConfig;

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MsDeformAttn,
    pub norm_attn: LayerNorm,
    pub ffn: Mlp,
    pub norm_ffn: LayerNorm,
}

impl EncoderLayer {
    pub fn new(init: &mut Init, name: &str, config: &DetectorConfig) -> Result<Self> {
        let d = config.d;
        let attn = MsDeformAttn::new(
            init,
            &format!("{name}.attn"),
            MsDeformAttnConfig {
                query_dim: d,
                value_dim: d,
                hidden_dim: d,
                out_dim: d,
                heads: config.heads,
                levels: config.levels,
                points: config.points,
            },
        )?;
        Ok(Self {
            attn,
            norm_attn: LayerNorm::new(init, &format!("{name}.norm_attn"), d),
            ffn: Mlp::new(init, &format!("{name}.ffn"), &[d, config.ffn_dim, d]),
            norm_ffn: LayerNorm::new(init, &format!("{name}.norm_ffn"), d),
        })
    }

    /// Post-norm layer: `LN(x + attn(x + pos))`, then `LN(x + ffn(x))`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        src: Var<'t>,
        pos: Var<'t>,
        ref_points: Var<'t>,
        layout: &LevelLayout,
    ) -> Result<Var<'t>> {
        let attended = self.attn.forward(ctx, src.add(pos)?, ref_points, src, layout)?;
        let x = self.norm_attn.forward(ctx, src.add(attended)?)?;
        let ffn = self.ffn.forward(ctx, x)?;
        self.norm_ffn.forward(ctx, x.add(ffn)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    /// `[L, d]`, added to every token of the matching level.
    pub level_embed: ParamId,
    layout: LevelLayout,
    /// `[S, d]` sinusoidal encoding of each token's own location.
    grid_pos: Tensor,
    /// `[S, 2]` normalized pixel-center locations.
    ref_points: Tensor,
    /// `[S, L]` one-hot level membership, used to gather level embeddings.
    level_onehot: Tensor,
}

impl Encoder {
    pub fn new(init: &mut Init, config: &DetectorConfig) -> Result<Self> {
        let layers = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(init, &format!("encoder.{i}"), config))
            .collect::<Result<_>>()?;
        let level_embed = init.normal("encoder.level_embed", &[config.levels, config.d], 1.0);
        let layout = LevelLayout::new(config.level_shapes());
        let d = config.d;
        let mut pos = Vec::with_capacity(layout.total_len() * d);
        let mut refs = Vec::with_capacity(layout.total_len() * 2);
        let mut onehot = Vec::with_capacity(layout.total_len() * config.levels);
        for (l, &(h, w)) in layout.shapes.iter().enumerate() {
            pos.extend_from_slice(encode_grid(h, w, d)?.data());
            for i in 0..h {
                for j in 0..w {
                    refs.push((j as f64 + 0.5) / w as f64);
                    refs.push((i as f64 + 0.5) / h as f64);
                    onehot.extend((0..config.levels).map(|k| if k == l { 1.0 } else { 0.0 }));
                }
            }
        }
        let s = layout.total_len();
        Ok(Self {
            layers,
            level_embed,
            grid_pos: Tensor::new([s, d], pos)?,
            ref_points: Tensor::new([s, 2], refs)?,
            level_onehot: Tensor::new([s, config.levels], onehot)?,
            layout,
        })
    }

    pub fn layout(&self) -> &LevelLayout {
        &self.layout
    }

    /// Positional term added to the attention queries: sinusoidal location
    /// plus the learned level embedding. `[S, d]`.
    pub fn positions<'t>(&self, ctx: &Ctx<'t>) -> Result<Var<'t>> {
        let level = ctx
            .constant(self.level_onehot.clone())
            .matmul(ctx.param(self.level_embed))?;
        ctx.constant(self.grid_pos.clone()).add(level)
    }

    /// `src: [S, d]` flattened pyramid. Shape-preserving.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, src: Var<'t>) -> Result<Var<'t>> {
        if self.layers.is_empty() {
            return Ok(src);
        }
        let pos = self.positions(ctx)?;
        let refs = ctx.constant(self.ref_points.clone());
        let mut x = src;
        for layer in &self.layers {
            x = layer.forward(ctx, x, pos, refs, &self.layout)?;
        }
        Ok(x)
    }
}
