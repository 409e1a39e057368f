//! Multi-scale deformable attention over a feature pyramid.
//!
//! Sampling convention: pixel centers sit at integer coordinates, and a
//! normalized point `p` maps onto level `l` at `(p.x * W_l - 0.5, p.y * H_l - 0.5)`.
//! Bilinear taps that fall outside a map read zero.

use std::cell::Cell;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear};
use crate::tensor::{Tensor, Var};

thread_local! {
    static BILINEAR_FAULT: Cell<bool> = const { Cell::new(false) };
    static SAMPLE_COUNT: Cell<u64> = const { Cell::new(0) };
}

/// Corrupt every bilinear tap taken on this thread (fault injection for
/// self-checks).
pub fn set_bilinear_fault(on: bool) {
    BILINEAR_FAULT.with(|f| f.set(on));
}

/// Number of deformable-attention samples taken on this thread since the
/// last reset.
pub fn sample_count() -> u64 {
    SAMPLE_COUNT.with(Cell::get)
}

pub fn reset_sample_count() {
    SAMPLE_COUNT.with(|c| c.set(0));
}

/// The four bilinear taps around `(x, y)` on an `h x w` grid: pixel index
/// (None when outside), weight, d(weight)/dx, d(weight)/dy.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub index: Option<usize>,
    pub weight: f64,
    pub dx: f64,
    pub dy: f64,
}

pub(crate) fn taps(h: usize, w: usize, x: f64, y: f64) -> [Tap; 4] {
    let none = Tap {
        index: None,
        weight: 0.0,
        dx: 0.0,
        dy: 0.0,
    };
    if !x.is_finite() || !y.is_finite() {
        return [none; 4];
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| {
        (xi >= 0.0 && yi >= 0.0 && xi < w as f64 && yi < h as f64).then(|| yi as usize * w + xi as usize)
    };
    let scale = if BILINEAR_FAULT.with(Cell::get) { 1.01 } else { 1.0 };
    [
        Tap {
            index: at(x0, y0),
            weight: scale * (1.0 - fx) * (1.0 - fy),
            dx: -(1.0 - fy),
            dy: -(1.0 - fx),
        },
        Tap {
            index: at(x0 + 1.0, y0),
            weight: scale * fx * (1.0 - fy),
            dx: 1.0 - fy,
            dy: -fx,
        },
        Tap {
            index: at(x0, y0 + 1.0),
            weight: scale * (1.0 - fx) * fy,
            dx: -fy,
            dy: 1.0 - fx,
        },
        Tap {
            index: at(x0 + 1.0, y0 + 1.0),
            weight: scale * fx * fy,
            dx: fy,
            dy: fx,
        },
    ]
}

/// Bilinear interpolation of an `[H, W, d]` map at pixel coordinates `(x, y)`.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let s = map.shape();
    let (h, w, d) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; d];
    for tap in taps(h, w, x, y) {
        if let Some(i) = tap.index {
            for (o, v) in out.iter_mut().zip(&map.data()[i * d..(i + 1) * d]) {
                *o += tap.weight * v;
            }
        }
    }
    out
}

/// Differentiable bilinear sampling of `map: [H, W, d]` at `points: [P, 2]`
/// given as pixel `(x, y)`. Returns `[P, d]`.
pub fn sample_points<'t>(map: Var<'t>, points: Var<'t>) -> Result<Var<'t>> {
    let ms = map.shape();
    let ps = points.shape();
    if ms.len() != 3 || ps.len() != 2 || ps[1] != 2 {
        return Err(Error::shape("sample_points", &ms, &ps));
    }
    let (h, w, d) = (ms[0], ms[1], ms[2]);
    let p = ps[0];
    let out = {
        let m = map.value();
        let pts = points.value();
        let mut out = Vec::with_capacity(p * d);
        for i in 0..p {
            out.extend(bilinear_sample(&m, pts.data()[2 * i], pts.data()[2 * i + 1]));
        }
        Tensor::new([p, d], out)?
    };
    Ok(map.tape().custom(
        &[map, points],
        out,
        Box::new(move |ctx| {
            let (m, pts, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
            let mut dmap = ctx.needs[0].then(|| Tensor::zeros([h, w, d]));
            let mut dpts = Tensor::zeros([p, 2]);
            for i in 0..p {
                let gi = &g.data()[i * d..(i + 1) * d];
                for tap in taps(h, w, pts.data()[2 * i], pts.data()[2 * i + 1]) {
                    let Some(pix) = tap.index else { continue };
                    let v = &m.data()[pix * d..(pix + 1) * d];
                    let gv: f64 = gi.iter().zip(v).map(|(a, b)| a * b).sum();
                    dpts.data_mut()[2 * i] += tap.dx * gv;
                    dpts.data_mut()[2 * i + 1] += tap.dy * gv;
                    if let Some(dm) = dmap.as_mut() {
                        for (o, gc) in dm.data_mut()[pix * d..(pix + 1) * d].iter_mut().zip(gi) {
                            *o += tap.weight * gc;
                        }
                    }
                }
            }
            vec![dmap, Some(dpts)]
        }),
    ))
}

/// Spatial layout of a flattened multi-level sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelLayout {
    /// `(H_l, W_l)` per level.
    pub shapes: Vec<(usize, usize)>,
    /// Offset of each level in the flattened sequence.
    pub starts: Vec<usize>,
}

impl LevelLayout {
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut starts = Vec::with_capacity(shapes.len());
        let mut acc = 0;
        for &(h, w) in &shapes {
            starts.push(acc);
            acc += h * w;
        }
        Self { shapes, starts }
    }

    pub fn num_levels(&self) -> usize {
        self.shapes.len()
    }

    pub fn total_len(&self) -> usize {
        self.shapes.iter().map(|(h, w)| h * w).sum()
    }

    pub fn level_len(&self, l: usize) -> usize {
        self.shapes[l].0 * self.shapes[l].1
    }
}

/// Per-level feature maps flattened into one `[S, d]` sequence.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<'t> {
    pub flat: Var<'t>,
    pub layout: LevelLayout,
}

impl<'t> FeaturePyramid<'t> {
    /// Concatenate `[H_l, W_l, d]` (or `[H_l * W_l, d]`) maps.
    pub fn from_levels(levels: &[Var<'t>], shapes: Vec<(usize, usize)>) -> Result<Self> {
        if levels.len() != shapes.len() || levels.is_empty() {
            return Err(Error::contract("one shape per pyramid level required"));
        }
        let d = *levels[0].shape().last().unwrap();
        let flat: Vec<Var<'t>> = levels
            .iter()
            .zip(&shapes)
            .map(|(v, &(h, w))| v.reshape(&[h * w, d]))
            .collect::<Result<_>>()?;
        Ok(Self {
            flat: Var::concat(&flat, 0)?,
            layout: LevelLayout::new(shapes),
        })
    }

    pub fn channels(&self) -> usize {
        self.flat.shape()[1]
    }

    /// Level `l` as an `[H_l, W_l, d]` map.
    pub fn level(&self, l: usize) -> Result<Var<'t>> {
        let (h, w) = self.layout.shapes[l];
        self.flat
            .narrow(0, self.layout.starts[l], h * w)?
            .reshape(&[h, w, self.channels()])
    }
}

/// Core sampling step: for every query `n`, head `m`, level `l` and point
/// `k`, bilinearly sample `value[.., m, ..]` on level `l` at
/// `locations[n, m, l, k]` (level pixel coordinates) and accumulate with
/// weight `weights[n, m, l, k]`. Returns `[N, M * dh]`.
pub fn deform_sample<'t>(
    value: Var<'t>,
    layout: &LevelLayout,
    locations: Var<'t>,
    weights: Var<'t>,
) -> Result<Var<'t>> {
    let vs = value.shape();
    let ls = locations.shape();
    let ws = weights.shape();
    if vs.len() != 3 || vs[0] != layout.total_len() {
        return Err(Error::shape("deform_sample value", &vs, &[layout.total_len()]));
    }
    let (heads, dh) = (vs[1], vs[2]);
    let levels = layout.num_levels();
    if ls.len() != 5 || ls[1] != heads || ls[2] != levels || ls[4] != 2 || ws != ls[..4] {
        return Err(Error::shape("deform_sample", &ls, &ws));
    }
    let (n, points) = (ls[0], ls[3]);
    let layout = layout.clone();
    // flat offset of sample (q, m, l, k)
    let slot = move |q: usize, m: usize, l: usize, k: usize| ((q * heads + m) * levels + l) * points + k;
    let value_at = move |layout: &LevelLayout, l: usize, pix: usize, m: usize| ((layout.starts[l] + pix) * heads + m) * dh;

    let out = {
        let v = value.value();
        let loc = locations.value();
        let a = weights.value();
        let mut out = vec![0.0; n * heads * dh];
        for q in 0..n {
            for m in 0..heads {
                let o = &mut out[(q * heads + m) * dh..(q * heads + m + 1) * dh];
                for l in 0..levels {
                    let (h, w) = layout.shapes[l];
                    for k in 0..points {
                        let s = slot(q, m, l, k);
                        let aw = a.data()[s];
                        for tap in taps(h, w, loc.data()[2 * s], loc.data()[2 * s + 1]) {
                            let Some(pix) = tap.index else { continue };
                            let base = value_at(&layout, l, pix, m);
                            for (oc, vc) in o.iter_mut().zip(&v.data()[base..base + dh]) {
                                *oc += aw * tap.weight * vc;
                            }
                        }
                    }
                }
            }
        }
        SAMPLE_COUNT.with(|c| c.set(c.get() + (n * heads * levels * points) as u64));
        Tensor::new([n, heads * dh], out)?
    };

    Ok(value.tape().custom(
        &[value, locations, weights],
        out,
        Box::new(move |ctx| {
            let (v, loc, a, g) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.grad);
            let mut dv = ctx.needs[0].then(|| Tensor::zeros(v.shape().to_vec()));
            let mut dloc = Tensor::zeros(loc.shape().to_vec());
            let mut da = Tensor::zeros(a.shape().to_vec());
            for q in 0..n {
                for m in 0..heads {
                    let gq = &g.data()[(q * heads + m) * dh..(q * heads + m + 1) * dh];
                    for l in 0..levels {
                        let (h, w) = layout.shapes[l];
                        for k in 0..points {
                            let s = slot(q, m, l, k);
                            let aw = a.data()[s];
                            let (mut ga, mut gx, mut gy) = (0.0, 0.0, 0.0);
                            for tap in taps(h, w, loc.data()[2 * s], loc.data()[2 * s + 1]) {
                                let Some(pix) = tap.index else { continue };
                                let base = value_at(&layout, l, pix, m);
                                let vv = &v.data()[base..base + dh];
                                let gv: f64 = gq.iter().zip(vv).map(|(x, y)| x * y).sum();
                                ga += tap.weight * gv;
                                gx += tap.dx * gv;
                                gy += tap.dy * gv;
                                if let Some(dv) = dv.as_mut() {
                                    let c = aw * tap.weight;
                                    for (o, gc) in dv.data_mut()[base..base + dh].iter_mut().zip(gq) {
                                        *o += c * gc;
                                    }
                                }
                            }
                            da.data_mut()[s] = ga;
                            dloc.data_mut()[2 * s] = aw * gx;
                            dloc.data_mut()[2 * s + 1] = aw * gy;
                        }
                    }
                }
            }
            vec![dv, Some(dloc), Some(da)]
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsDeformAttnConfig {
    /// Width of the incoming queries.
    pub query_dim: usize,
    /// Width of the features being attended to.
    pub value_dim: usize,
    /// Total width of the projected values, split evenly across heads.
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

/// Learned projections for one multi-scale deformable attention block.
#[derive(Debug, Clone)]
pub struct MsDeformAttn {
    pub config: MsDeformAttnConfig,
    pub value_proj: Linear,
    pub offsets: Linear,
    pub attention: Linear,
    pub output_proj: Linear,
}

/// Intermediate quantities of one deformable attention evaluation.
pub struct DeformAttnTrace<'t> {
    pub output: Var<'t>,
    /// `[N, M, L, K]`, normalized jointly over `L * K` per head.
    pub weights: Var<'t>,
    /// `[N, M, L, K, 2]` in level pixel coordinates.
    pub locations: Var<'t>,
}

impl MsDeformAttn {
    /// Value/output projections get Xavier weights. Offset weights start at
    /// zero with biases on a ring of directions per head (point `k` at radius
    /// `k + 1`); attention logits start at zero.
    pub fn new(init: &mut Init, name: &str, config: MsDeformAttnConfig) -> Result<Self> {
        let MsDeformAttnConfig {
            query_dim,
            value_dim,
            hidden_dim,
            out_dim,
            heads,
            levels,
            points,
        } = config;
        if heads == 0 || hidden_dim % heads != 0 || levels == 0 || points == 0 {
            return Err(Error::contract(format!(
                "invalid deformable attention config {config:?}"
            )));
        }
        let n_off = heads * levels * points * 2;
        let offsets = Linear::zeroed(init, &format!("{name}.offsets"), query_dim, n_off);
        let ring = Tensor::from_fn([n_off], |i| {
            let c = i % 2;
            let k = (i / 2) % points;
            let m = i / (2 * points * levels);
            let theta = 2.0 * PI * m as f64 / heads as f64;
            let (s, co) = theta.sin_cos();
            let norm = co.abs().max(s.abs());
            let dir = if c == 0 { co } else { s } / norm;
            dir * (k + 1) as f64
        });
        *init.store.value_mut(offsets.bias) = ring;
        Ok(Self {
            config,
            value_proj: Linear::new(init, &format!("{name}.value"), value_dim, hidden_dim),
            offsets,
            attention: Linear::zeroed(init, &format!("{name}.attention"), query_dim, heads * levels * points),
            output_proj: Linear::new(init, &format!("{name}.output"), hidden_dim, out_dim),
        })
    }

    /// `query: [N, query_dim]`, `ref_points: [N, 2]` normalized,
    /// `values: [S, value_dim]` laid out by `layout`. Returns `[N, out_dim]`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        query: Var<'t>,
        ref_points: Var<'t>,
        values: Var<'t>,
        layout: &LevelLayout,
    ) -> Result<Var<'t>> {
        Ok(self.trace(ctx, query, ref_points, values, layout)?.output)
    }

    pub fn trace<'t>(
        &self,
        ctx: &Ctx<'t>,
        query: Var<'t>,
        ref_points: Var<'t>,
        values: Var<'t>,
        layout: &LevelLayout,
    ) -> Result<DeformAttnTrace<'t>> {
        let c = self.config;
        let qs = query.shape();
        if qs.len() != 2 || qs[1] != c.query_dim {
            return Err(Error::shape("ms_deform_attn query", &qs, &[c.query_dim]));
        }
        let n = qs[0];
        if ref_points.shape() != [n, 2] {
            return Err(Error::shape("ms_deform_attn reference points", &ref_points.shape(), &[n, 2]));
        }
        if layout.num_levels() != c.levels {
            return Err(Error::contract(format!(
                "ms_deform_attn expects {} levels, pyramid has {}",
                c.levels,
                layout.num_levels()
            )));
        }
        let vs = values.shape();
        if vs.len() != 2 || vs[0] != layout.total_len() || vs[1] != c.value_dim {
            return Err(Error::shape("ms_deform_attn values", &vs, &[layout.total_len(), c.value_dim]));
        }
        let (m, l, k) = (c.heads, c.levels, c.points);
        let dh = c.hidden_dim / m;

        let value = self
            .value_proj
            .forward(ctx, values)?
            .reshape(&[layout.total_len(), m, dh])?;
        let offsets = self.offsets.forward(ctx, query)?.reshape(&[n, m, l, k, 2])?;
        let weights = self
            .attention
            .forward(ctx, query)?
            .reshape(&[n, m, l * k])?
            .softmax(2)?
            .reshape(&[n, m, l, k])?;
        let level_scale = Tensor::from_fn([1, 1, l, 1, 2], |i| {
            let (h, w) = layout.shapes[i / 2];
            if i % 2 == 0 {
                w as f64
            } else {
                h as f64
            }
        });
        let anchors = ref_points
            .reshape(&[n, 1, 1, 1, 2])?
            .mul(ctx.constant(level_scale))?
            .add_scalar(-0.5);
        let locations = anchors.add(offsets)?;
        let sampled = deform_sample(value, layout, locations, weights)?;
        Ok(DeformAttnTrace {
            output: self.output_proj.forward(ctx, sampled)?,
            weights,
            locations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use crate::tensor::{ParamGroup, ParamStore, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map2x2() -> Tensor {
        Tensor::new([2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn bilinear_midpoint_lattice_and_outside() {
        assert_eq!(bilinear_sample(&map2x2(), 0.5, 0.5), vec![2.5]);
        assert_eq!(bilinear_sample(&map2x2(), 1.0, 0.0), vec![2.0]);
        assert_eq!(bilinear_sample(&map2x2(), -1.0, -1.0), vec![0.0]);
        assert_eq!(bilinear_sample(&map2x2(), f64::NAN, 0.0), vec![0.0]);
    }

    #[test]
    fn bilinear_zero_padding_at_border() {
        // half a pixel left of column 0 blends with a zero neighbour
        assert_eq!(bilinear_sample(&map2x2(), -0.5, 0.0), vec![0.5]);
    }

    #[test]
    fn sample_points_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = Tensor::from_fn([3, 4, 2], |_| rng.random_range(-1.0..1.0));
        let pts = Tensor::new([3, 2], vec![0.3, 0.7, 2.2, 1.6, -0.4, 1.1]).unwrap();
        let err = gradcheck::check(&[map, pts], |_, v| sample_points(v[0], v[1])).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn layout_offsets_partition() {
        let l = LevelLayout::new(vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
        assert_eq!(l.starts, vec![0, 64, 80, 84]);
        assert_eq!(l.total_len(), 85);
    }

    #[test]
    fn ring_bias_initialization() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Detector,
        };
        let cfg = MsDeformAttnConfig {
            query_dim: 8,
            value_dim: 8,
            hidden_dim: 8,
            out_dim: 8,
            heads: 4,
            levels: 2,
            points: 2,
        };
        let attn = MsDeformAttn::new(&mut init, "a", cfg).unwrap();
        let b = store.value(attn.offsets.bias).data().to_vec();
        // head 0 points along +x, head 1 along +y; point k at radius k+1
        assert_eq!(&b[0..4], &[1.0, 0.0, 2.0, 0.0]);
        let h1 = 2 * 2 * 2;
        assert!((b[h1] - 0.0).abs() < 1e-15 && (b[h1 + 1] - 1.0).abs() < 1e-15);
        assert!(store.value(attn.offsets.weight).data().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn rejects_wrong_level_count() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Detector,
        };
        let cfg = MsDeformAttnConfig {
            query_dim: 4,
            value_dim: 4,
            hidden_dim: 4,
            out_dim: 4,
            heads: 1,
            levels: 2,
            points: 1,
        };
        let attn = MsDeformAttn::new(&mut init, "a", cfg).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let layout = LevelLayout::new(vec![(2, 2)]);
        let r = attn.forward(
            &ctx,
            ctx.constant(Tensor::zeros([1, 4])),
            ctx.constant(Tensor::full([1, 2], 0.5)),
            ctx.constant(Tensor::zeros([4, 4])),
            &layout,
        );
        assert!(r.is_err());
    }
}
