//! The full detector: backbone, deformable encoder, aligned decoder, heads.

mod backbone;
mod checkpoint;
mod config;
mod decoder;
mod encoder;

pub use backbone::{Backbone, ConvStage};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::DetectorConfig;
pub use decoder::{DecoderLayer, DecoderStep};
pub use encoder::{Encoder, EncoderLayer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deform::FeaturePyramid;
use crate::error::{Error, Result};
use crate::geometry::BoxCxCyWh;
use crate::nn::{Ctx, Init, Linear, Mlp};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Tensor, Var};

/// Classification and box heads shared by every decoder layer.
#[derive(Debug, Clone)]
pub struct Heads {
    pub class: Linear,
    pub boxes: Mlp,
}

/// Per-layer head outputs.
pub struct LayerPrediction<'t> {
    /// `[N, C + 1]`, last column is no-object.
    pub logits: Var<'t>,
    /// `[N, 4]` normalized cxcywh.
    pub boxes: Var<'t>,
}

impl Heads {
    pub fn new(init: &mut Init, d: usize, num_classes: usize) -> Self {
        Self {
            class: Linear::new(init, "head.class", d, num_classes + 1),
            boxes: Mlp::new(init, "head.box", &[d, d, d, 4]),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, state: Var<'t>) -> Result<LayerPrediction<'t>> {
        Ok(LayerPrediction {
            logits: self.class.forward(ctx, state)?,
            boxes: self.boxes.forward(ctx, state)?.sigmoid(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub decoder: Vec<DecoderLayer>,
    pub heads: Heads,
    pub query_content: ParamId,
    pub query_pos: ParamId,
}

pub struct ForwardOutput<'t> {
    /// Encoded pyramid.
    pub memory: FeaturePyramid<'t>,
    pub steps: Vec<DecoderStep<'t>>,
    /// One entry per decoder layer; the last is the final prediction.
    pub predictions: Vec<LayerPrediction<'t>>,
}

/// One scored box from the final decoder layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    /// Zero-based class index.
    pub label: usize,
    pub score: f64,
    pub bbox: BoxCxCyWh,
}

impl Detector {
    /// Build a detector with freshly initialized weights.
    pub fn new(config: DetectorConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Detector,
        };
        let backbone = Backbone::new(&mut init, &config);
        let encoder = Encoder::new(&mut init, &config)?;
        let decoder = (0..config.decoder_layers)
            .map(|i| DecoderLayer::new(&mut init, i, &config))
            .collect::<Result<_>>()?;
        let heads = Heads::new(&mut init, config.d, config.num_classes);
        let query_content = init.normal("query.content", &[config.queries, config.d], 0.02);
        let query_pos = init.normal("query.pos", &[config.queries, config.d], 0.02);
        Ok((
            Self {
                config,
                backbone,
                encoder,
                decoder,
                heads,
                query_content,
                query_pos,
            },
            store,
        ))
    }

    /// Backbone and encoder only.
    pub fn encode<'t>(&self, ctx: &Ctx<'t>, image: Var<'t>) -> Result<FeaturePyramid<'t>> {
        let levels = self.backbone.forward(ctx, image)?;
        let pyramid = FeaturePyramid::from_levels(&levels, self.config.level_shapes())?;
        let flat = self.encoder.forward(ctx, pyramid.flat)?;
        Ok(FeaturePyramid {
            flat,
            layout: pyramid.layout,
        })
    }

    /// Decoder and heads over an encoded pyramid, starting from the given
    /// query content and positional embeddings (`[N, d]` each).
    pub fn decode<'t>(
        &self,
        ctx: &Ctx<'t>,
        memory: FeaturePyramid<'t>,
        content: Var<'t>,
        pos: Var<'t>,
    ) -> Result<ForwardOutput<'t>> {
        let mut steps = Vec::with_capacity(self.decoder.len());
        let mut predictions = Vec::with_capacity(self.decoder.len());
        let mut x = content;
        for layer in &self.decoder {
            let step = layer.forward(ctx, x, pos, &memory)?;
            x = step.state;
            predictions.push(self.heads.forward(ctx, x)?);
            steps.push(step);
        }
        Ok(ForwardOutput {
            memory,
            steps,
            predictions,
        })
    }

    /// `image: [3, H, W]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: Var<'t>) -> Result<ForwardOutput<'t>> {
        let memory = self.encode(ctx, image)?;
        self.decode(ctx, memory, ctx.param(self.query_content), ctx.param(self.query_pos))
    }

    /// Final-layer detections for an image: each query once per real class,
    /// scored by that class's probability.
    pub fn detect(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<Detection>> {
        if self.config.decoder_layers == 0 {
            return Err(Error::contract("detector has no decoder layers"));
        }
        let tape = crate::tensor::Tape::new();
        let ctx = Ctx::new(&tape, store);
        let out = self.forward(&ctx, tape.constant(image.clone()))?;
        let last = out.predictions.last().unwrap();
        let probs = last.logits.softmax(1)?.to_tensor();
        let boxes = last.boxes.to_tensor();
        let c = self.config.num_classes;
        Ok((0..self.config.queries)
            .flat_map(|q| (0..c).map(move |label| (q, label)))
            .map(|(q, label)| {
                let b = &boxes.data()[q * 4..q * 4 + 4];
                Detection {
                    label,
                    score: probs.data()[q * (c + 1) + label],
                    bbox: BoxCxCyWh {
                        cx: b[0],
                        cy: b[1],
                        w: b[2],
                        h: b[3],
                    },
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests;
