//! Semantic aligner: rebuilds each object query from the image features
//! inside its reference box.
//!
//! Per decoder layer the block
//! 1. projects query positional embeddings to reference boxes (sigmoid cxcywh),
//! 2. projects those boxes to cross-attention reference points,
//! 3. extracts a `G x G` ROIAlign grid from one pyramid level,
//! 4. predicts `M` salient points inside each box and samples them into new
//!    queries with sinusoidal positional embeddings,
//! 5. blends old and new queries with sigmoid gates, and
//! 6. flattens the result to `[N, M * d]` for cross-attention.

use crate::deform::sample_points;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, Mlp};
use crate::posenc::encode_points;
use crate::tensor::{Tensor, Var};

/// Reference boxes `[N, 4]` = sigmoid(linear(pos)).
pub fn project_ref_boxes<'t>(ctx: &Ctx<'t>, proj: &Linear, pos: Var<'t>) -> Result<Var<'t>> {
    Ok(proj.forward(ctx, pos)?.sigmoid())
}

/// Reference points `[N, 2]` = sigmoid(linear(ref_boxes)); not tied to the box centers.
pub fn project_ref_points<'t>(ctx: &Ctx<'t>, proj: &Linear, ref_boxes: Var<'t>) -> Result<Var<'t>> {
    Ok(proj.forward(ctx, ref_boxes)?.sigmoid())
}

/// Bin-center sample coordinates (level pixels) for each box: `[N, G, G, 2]`
/// with the last axis `(x, y)` and grid rows running along `y`.
fn roi_grid<'t>(boxes: Var<'t>, grid: usize, h: usize, w: usize) -> Result<Var<'t>> {
    let tape = boxes.tape();
    let n = boxes.shape()[0];
    let frac = Tensor::from_fn([1, grid], |i| (i as f64 + 0.5) / grid as f64 - 0.5);
    let coord = |center: usize, size: usize, extent: usize| -> Result<Var<'t>> {
        let c = boxes.narrow(1, center, 1)?;
        let s = boxes.narrow(1, size, 1)?;
        Ok(c.add(s.mul(tape.constant(frac.clone()))?)?
            .scale(extent as f64)
            .add_scalar(-0.5))
    };
    let zeros = tape.constant(Tensor::zeros([1, grid, grid, 1]));
    let xs = coord(0, 2, w)?.reshape(&[n, 1, grid, 1])?.add(zeros)?;
    let ys = coord(1, 3, h)?.reshape(&[n, grid, 1, 1])?.add(zeros)?;
    Var::concat(&[xs, ys], 3)
}

/// ROIAlign with one bilinear sample per bin: `level: [H, W, d]`,
/// `boxes: [N, 4]` normalized cxcywh. Returns `[N, G, G, d]`.
pub fn roi_align<'t>(level: Var<'t>, boxes: Var<'t>, grid: usize) -> Result<Var<'t>> {
    let ls = level.shape();
    let bs = boxes.shape();
    if ls.len() != 3 || bs.len() != 2 || bs[1] != 4 || grid == 0 {
        return Err(Error::shape("roi_align", &ls, &bs));
    }
    let (h, w, d) = (ls[0], ls[1], ls[2]);
    let n = bs[0];
    let pts = roi_grid(boxes, grid, h, w)?.reshape(&[n * grid * grid, 2])?;
    sample_points(level, pts)?.reshape(&[n, grid, grid, d])
}

/// Output of [`SalientResampler::forward`].
pub struct Resampled<'t> {
    /// `[N, M, 2]` normalized `(x, y)` inside each reference box.
    pub points: Var<'t>,
    /// `[N, M, d]`
    pub content: Var<'t>,
    /// `[N, M, d]`
    pub pos: Var<'t>,
}

/// Predicts `M` salient locations per region and samples new queries there.
#[derive(Debug, Clone)]
pub struct SalientResampler {
    pub predictor: Mlp,
    pub points: usize,
}

impl SalientResampler {
    /// Two-layer MLP over the flattened region; the output layer starts at
    /// zero so every point begins at its box center.
    pub fn new(init: &mut Init, name: &str, region_dim: usize, hidden: usize, points: usize) -> Self {
        let mut predictor = Mlp::new(init, name, &[region_dim, hidden, points * 2]);
        let last = predictor.layers.last_mut().unwrap();
        *init.store.value_mut(last.weight) = Tensor::zeros([hidden, points * 2]);
        Self { predictor, points }
    }

    /// `regions: [N, G, G, d]`, `boxes: [N, 4]`, `level: [H, W, d]`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        regions: Var<'t>,
        boxes: Var<'t>,
        level: Var<'t>,
        heads: usize,
    ) -> Result<Resampled<'t>> {
        if heads != self.points {
            return Err(Error::contract(format!(
                "salient point count {} must equal the cross-attention head count {heads}",
                self.points
            )));
        }
        let rs = regions.shape();
        let (n, d) = (rs[0], rs[3]);
        let (h, w) = (level.shape()[0], level.shape()[1]);
        let m = self.points;
        let flat = regions.reshape(&[n, rs[1] * rs[2] * d])?;
        let unit = self
            .predictor
            .forward(ctx, flat)?
            .sigmoid()
            .reshape(&[n, m, 2])?;
        // top-left corner and size of each box, [N, 1, 2]
        let center = boxes.narrow(1, 0, 2)?.reshape(&[n, 1, 2])?;
        let size = boxes.narrow(1, 2, 2)?.reshape(&[n, 1, 2])?;
        let corner = center.sub(size.scale(0.5))?;
        let points = corner.add(unit.mul(size)?)?;
        let scale = ctx.constant(Tensor::new([1, 1, 2], vec![w as f64, h as f64])?);
        let pixel = points.mul(scale)?.add_scalar(-0.5).reshape(&[n * m, 2])?;
        let content = sample_points(level, pixel)?.reshape(&[n, m, d])?;
        let pos = encode_points(points, d)?;
        Ok(Resampled { points, content, pos })
    }
}

/// Sigmoid gates blending old queries with resampled ones.
#[derive(Debug, Clone)]
pub struct Reweight {
    pub gate: Linear,
    pub points: usize,
    pub dim: usize,
}

impl Reweight {
    pub fn new(init: &mut Init, name: &str, dim: usize, points: usize) -> Self {
        Self {
            gate: Linear::new(init, name, dim, 2 * points * dim),
            points,
            dim,
        }
    }

    /// `gate ⊙ new + (1 − gate) ⊙ old` for content and positional parts, old
    /// broadcast over the `M` points. Returns `([N, M, d], [N, M, d])`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        old_content: Var<'t>,
        old_pos: Var<'t>,
        new_content: Var<'t>,
        new_pos: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = old_content.shape()[0];
        let (m, d) = (self.points, self.dim);
        if new_content.shape() != [n, m, d] || new_pos.shape() != [n, m, d] {
            return Err(Error::shape("reweight", &new_content.shape(), &[n, m, d]));
        }
        let gates = self
            .gate
            .forward(ctx, old_content)?
            .sigmoid()
            .reshape(&[n, 2, m, d])?;
        let blend = |g: Var<'t>, old: Var<'t>, new: Var<'t>| -> Result<Var<'t>> {
            let g = g.reshape(&[n, m, d])?;
            let old = old.reshape(&[n, 1, d])?;
            old.add(g.mul(new.sub(old)?)?)
        };
        Ok((
            blend(gates.narrow(1, 0, 1)?, old_content, new_content)?,
            blend(gates.narrow(1, 1, 1)?, old_pos, new_pos)?,
        ))
    }
}

/// Lossless `[N, M, d] -> [N, M * d]`; element `(n, m, c)` lands at `m * d + c`.
pub fn reshape_for_cross_attn<'t>(q: Var<'t>) -> Result<Var<'t>> {
    let s = q.shape();
    if s.len() != 3 {
        return Err(Error::shape("reshape_for_cross_attn", &s, &[0, 0, 0]));
    }
    q.reshape(&[s[0], s[1] * s[2]])
}

/// Everything the aligner produced for one decoder layer.
pub struct AlignedQueries<'t> {
    pub ref_boxes: Var<'t>,
    pub ref_points: Var<'t>,
    pub regions: Var<'t>,
    pub salient_points: Var<'t>,
    /// `[N, M * d]`
    pub content: Var<'t>,
    /// `[N, M * d]`
    pub pos: Var<'t>,
}

#[derive(Debug, Clone)]
pub struct SemanticAligner {
    pub box_proj: Linear,
    pub point_proj: Linear,
    pub resampler: SalientResampler,
    pub reweight: Reweight,
    pub grid: usize,
    pub heads: usize,
}

impl SemanticAligner {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, grid: usize, hidden: usize) -> Self {
        Self {
            box_proj: Linear::new(init, &format!("{name}.ref_box"), dim, 4),
            point_proj: Linear::new(init, &format!("{name}.ref_point"), 4, 2),
            resampler: SalientResampler::new(init, &format!("{name}.salient"), grid * grid * dim, hidden, heads),
            reweight: Reweight::new(init, &format!("{name}.reweight"), dim, heads),
            grid,
            heads,
        }
    }

    /// `content`, `pos`: `[N, d]`; `level`: the one `[H, W, d]` map this
    /// layer reads.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        content: Var<'t>,
        pos: Var<'t>,
        level: Var<'t>,
    ) -> Result<AlignedQueries<'t>> {
        let ref_boxes = project_ref_boxes(ctx, &self.box_proj, pos)?;
        let ref_points = project_ref_points(ctx, &self.point_proj, ref_boxes)?;
        let regions = roi_align(level, ref_boxes, self.grid)?;
        let resampled = self.resampler.forward(ctx, regions, ref_boxes, level, self.heads)?;
        let (c, p) = self
            .reweight
            .forward(ctx, content, pos, resampled.content, resampled.pos)?;
        Ok(AlignedQueries {
            ref_boxes,
            ref_points,
            regions,
            salient_points: resampled.points,
            content: reshape_for_cross_attn(c)?,
            pos: reshape_for_cross_attn(p)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::bilinear_sample;
    use crate::tensor::{ParamGroup, ParamStore, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_map_gives_constant_regions() {
        let tape = Tape::new();
        let level = tape.constant(Tensor::full([6, 5, 3], 2.5));
        let boxes = tape.constant(Tensor::new([2, 4], vec![0.5, 0.5, 0.4, 0.6, 0.3, 0.6, 0.2, 0.1]).unwrap());
        let r = roi_align(level, boxes, 7).unwrap().to_tensor();
        assert_eq!(r.shape(), &[2, 7, 7, 3]);
        assert!(r.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn degenerate_box_collapses_to_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = Tensor::from_fn([4, 4, 2], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::new();
        let boxes = tape.constant(Tensor::new([1, 4], vec![0.4, 0.6, 0.0, 0.0]).unwrap());
        let r = roi_align(tape.constant(map.clone()), boxes, 3).unwrap().to_tensor();
        let center = bilinear_sample(&map, 0.4 * 4.0 - 0.5, 0.6 * 4.0 - 0.5);
        for bin in r.data().chunks(2) {
            assert!((bin[0] - center[0]).abs() < 1e-12 && (bin[1] - center[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn flatten_layout() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let f = reshape_for_cross_attn(q).unwrap().to_tensor();
        assert_eq!(f.shape(), &[2, 12]);
        // (n=1, m=2, c=3) -> 1 * 12 + 2 * 4 + 3
        assert_eq!(f.at(&[1, 2 * 4 + 3]), (12 + 8 + 3) as f64);
    }

    #[test]
    fn head_mismatch_is_a_contract_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Detector,
        };
        let r = SalientResampler::new(&mut init, "s", 4 * 4, 8, 2);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let out = r.forward(
            &ctx,
            ctx.constant(Tensor::zeros([1, 2, 2, 4])),
            ctx.constant(Tensor::full([1, 4], 0.5)),
            ctx.constant(Tensor::zeros([3, 3, 4])),
            4,
        );
        assert!(matches!(out, Err(Error::Contract(_))));
    }
}
