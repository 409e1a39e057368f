//! Deliberately naive implementations used as test oracles. Each one is
//! written as explicit loops over plain values, independent of the tape.

#![allow(clippy::needless_range_loop)]

use crate::annotation::GrayImage;
use crate::deform::{LevelLayout, MsDeformAttn};
use crate::geometry::BoxXyWh;
use crate::matching::CostMatrix;
use crate::model::Detector;
use crate::nn::{LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::tensor::{ParamStore, Tensor, LAYER_NORM_EPS};

/// Exhaustive search over all injective assignments of the smaller side.
/// Returns the best total and one optimal pair list.
pub fn brute_force_assignment(cost: &CostMatrix) -> (f64, Vec<(usize, usize)>) {
    let (c, flipped) = if cost.rows > cost.cols {
        (cost.transposed(), true)
    } else {
        (cost.clone(), false)
    };
    let mut best = (f64::INFINITY, Vec::new());
    let mut used = vec![false; c.cols];
    let mut current = Vec::with_capacity(c.rows);
    fn rec(
        c: &CostMatrix,
        row: usize,
        acc: f64,
        used: &mut [bool],
        current: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        if row == c.rows {
            if acc < best.0 {
                *best = (acc, current.clone());
            }
            return;
        }
        for col in 0..c.cols {
            if !used[col] {
                used[col] = true;
                current.push(col);
                rec(c, row + 1, acc + c.at(row, col), used, current, best);
                current.pop();
                used[col] = false;
            }
        }
    }
    let mut raw = (f64::INFINITY, Vec::new());
    rec(&c, 0, 0.0, &mut used, &mut current, &mut raw);
    best.0 = raw.0;
    best.1 = raw
        .1
        .iter()
        .enumerate()
        .map(|(r, &col)| if flipped { (col, r) } else { (r, col) })
        .collect();
    best.1.sort_unstable();
    best
}

/// Mask made of separated random-walk blobs, plus each blob's box from a
/// direct min/max scan of the pixels painted for it. Blobs live in disjoint
/// cells of a grid with a one-pixel gutter, so distinct blobs never touch.
pub fn random_blob_mask(rng: &mut impl rand::Rng, width: usize, height: usize) -> (GrayImage, Vec<BoxXyWh>) {
    let cols = rng.random_range(1..=3usize);
    let rows = rng.random_range(1..=3usize);
    let (cw, ch) = (width / cols, height / rows);
    let mut data = vec![0u8; width * height];
    let mut boxes = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if cw < 3 || ch < 3 || rng.random_bool(0.3) {
                continue;
            }
            // usable cell interior leaves the last row/column as gutter
            let (x0, y0, x1, y1) = (c * cw, r * ch, c * cw + cw - 2, r * ch + ch - 2);
            let mut x = rng.random_range(x0..=x1);
            let mut y = rng.random_range(y0..=y1);
            let (mut bx0, mut by0, mut bx1, mut by1) = (x, y, x, y);
            for _ in 0..rng.random_range(1..60) {
                data[y * width + x] = rng.random_range(1..=255);
                bx0 = bx0.min(x);
                by0 = by0.min(y);
                bx1 = bx1.max(x);
                by1 = by1.max(y);
                x = (x as i64 + rng.random_range(-1..=1)).clamp(x0 as i64, x1 as i64) as usize;
                y = (y as i64 + rng.random_range(-1..=1)).clamp(y0 as i64, y1 as i64) as usize;
            }
            boxes.push(BoxXyWh::from_inclusive_span(bx0, by0, bx1, by1));
        }
    }
    (GrayImage { width, height, data }, boxes)
}

/// Box over every nonzero pixel, by a single scan.
pub fn scan_bbox(mask: &GrayImage) -> Option<BoxXyWh> {
    let mut span: Option<[usize; 4]> = None;
    for i in 0..mask.data.len() {
        if mask.data[i] == 0 {
            continue;
        }
        let (x, y) = (i % mask.width, i / mask.width);
        let s = span.get_or_insert([x, y, x, y]);
        *s = [s[0].min(x), s[1].min(y), s[2].max(x), s[3].max(y)];
    }
    span.map(|[a, b, c, d]| BoxXyWh::from_inclusive_span(a, b, c, d))
}

type Rows = Vec<Vec<f64>>;

fn rows_of(t: &Tensor) -> Rows {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn linear(x: &Rows, store: &ParamStore, layer: &Linear) -> Rows {
    let w = store.value(layer.weight);
    let b = store.value(layer.bias);
    x.iter()
        .map(|row| {
            (0..layer.out_dim)
                .map(|o| {
                    let mut acc = b.data()[o];
                    for (i, v) in row.iter().enumerate() {
                        acc += v * w.data()[i * layer.out_dim + o];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn mlp(x: &Rows, store: &ParamStore, m: &Mlp) -> Rows {
    let mut h = x.clone();
    for (i, layer) in m.layers.iter().enumerate() {
        h = linear(&h, store, layer);
        if i + 1 != m.layers.len() {
            for v in h.iter_mut().flatten() {
                *v = v.max(0.0);
            }
        }
    }
    h
}

fn layer_norm(x: &Rows, store: &ParamStore, ln: &LayerNorm) -> Rows {
    let g = store.value(ln.gamma).data();
    let b = store.value(ln.beta).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Bilinear sample of an `[H, W, d]` map at pixel `(x, y)`, pixel centers on
/// integers, zero outside.
pub fn bilinear(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (h, w, d) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = vec![0.0; d];
    if !x.is_finite() || !y.is_finite() {
        return out;
    }
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    for (cx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
        for (cy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
            if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
                continue;
            }
            let base = ((cy as usize) * w + cx as usize) * d;
            for c in 0..d {
                out[c] += wx * wy * map.data()[base + c];
            }
        }
    }
    out
}

/// Multi-scale deformable attention as nested loops over query, head,
/// level, point and channel. `values: [S, value_dim]`.
pub fn ms_deform_attn(
    store: &ParamStore,
    attn: &MsDeformAttn,
    query: &Tensor,
    ref_points: &Tensor,
    values: &Tensor,
    layout: &LevelLayout,
) -> Tensor {
    let c = attn.config;
    let (m_heads, levels, points) = (c.heads, c.levels, c.points);
    let dh = c.hidden_dim / m_heads;
    let q = rows_of(query);
    let value = linear(&rows_of(values), store, &attn.value_proj);
    let offsets = linear(&q, store, &attn.offsets);
    let logits = linear(&q, store, &attn.attention);
    let mut heads_out = Vec::with_capacity(q.len());
    for n in 0..q.len() {
        let mut row = vec![0.0; c.hidden_dim];
        for m in 0..m_heads {
            let lk = levels * points;
            let weights = softmax(&logits[n][m * lk..(m + 1) * lk]);
            for l in 0..levels {
                let (h, w) = layout.shapes[l];
                let mut level_map = Vec::with_capacity(h * w * dh);
                for p in 0..h * w {
                    level_map.extend_from_slice(&value[layout.starts[l] + p][m * dh..(m + 1) * dh]);
                }
                let level_map = Tensor::new([h, w, dh], level_map).unwrap();
                for k in 0..points {
                    let o = ((m * levels + l) * points + k) * 2;
                    let x = ref_points.data()[2 * n] * w as f64 - 0.5 + offsets[n][o];
                    let y = ref_points.data()[2 * n + 1] * h as f64 - 0.5 + offsets[n][o + 1];
                    let s = bilinear(&level_map, x, y);
                    for ch in 0..dh {
                        row[m * dh + ch] += weights[l * points + k] * s[ch];
                    }
                }
            }
        }
        heads_out.push(row);
    }
    let out = linear(&heads_out, store, &attn.output_proj);
    Tensor::new([q.len(), c.out_dim], out.concat()).unwrap()
}

/// ROIAlign with one sample per bin, looping over boxes and bins.
/// `level: [H, W, d]`, `boxes: [N, 4]` normalized cxcywh; returns `[N, G, G, d]`.
pub fn roi_align(level: &Tensor, boxes: &Tensor, grid: usize) -> Tensor {
    let (h, w, d) = (level.shape()[0], level.shape()[1], level.shape()[2]);
    let n = boxes.shape()[0];
    let mut out = Vec::with_capacity(n * grid * grid * d);
    for b in boxes.data().chunks(4) {
        let (x1, y1) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0);
        for i in 0..grid {
            for j in 0..grid {
                let u = x1 + b[2] * (j as f64 + 0.5) / grid as f64;
                let v = y1 + b[3] * (i as f64 + 0.5) / grid as f64;
                out.extend(bilinear(level, u * w as f64 - 0.5, v * h as f64 - 0.5));
            }
        }
    }
    Tensor::new([n, grid, grid, d], out).unwrap()
}

fn sinusoid(x: f64, y: f64, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for coord in [y, x] {
        for j in 0..half {
            let freq = 2.0 * std::f64::consts::PI / 10000f64.powf((2 * (j / 2)) as f64 / half as f64);
            out.push(if j % 2 == 0 { (coord * freq).sin() } else { (coord * freq).cos() });
        }
    }
    out
}

fn conv_stride2(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let co = weight.shape()[0];
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias.data()[o];
                for c in 0..ci {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let yy = (2 * i + ky) as i64 - 1;
                            let xx = (2 * j + kx) as i64 - 1;
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            acc += weight.data()[((o * ci + c) * 3 + ky) * 3 + kx]
                                * x.data()[(c * h + yy as usize) * w + xx as usize];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc.max(0.0);
            }
        }
    }
    Tensor::new([co, oh, ow], out).unwrap()
}

fn self_attention(store: &ParamStore, mha: &MultiHeadAttention, qk: &Rows, v: &Rows) -> Rows {
    let q = linear(qk, store, &mha.q);
    let k = linear(qk, store, &mha.k);
    let val = linear(v, store, &mha.v);
    let n = q.len();
    let d = q[0].len();
    let dh = d / mha.heads;
    let mut mixed = vec![vec![0.0; d]; n];
    for h in 0..mha.heads {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for j in 0..n {
                for c in 0..dh {
                    mixed[i][h * dh + c] += p[j] * val[j][h * dh + c];
                }
            }
        }
    }
    linear(&mixed, store, &mha.out)
}

/// Per-layer `(logits [N, C + 1], boxes [N, 4])` of the full detector,
/// computed without the tape or any module indirection.
pub fn detector_forward(det: &Detector, store: &ParamStore, image: &Tensor) -> Vec<(Tensor, Tensor)> {
    let cfg = &det.config;
    let d = cfg.d;
    let shapes = cfg.level_shapes();
    let layout = LevelLayout::new(shapes.clone());

    // backbone
    let mut x = image.clone();
    let first = cfg.backbone_channels.len() - cfg.levels;
    let mut tokens: Rows = Vec::new();
    for (s, stage) in det.backbone.stages.iter().enumerate() {
        x = conv_stride2(&x, store.value(stage.weight), store.value(stage.bias));
        if s >= first {
            let l = s - first;
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let pix: Rows = (0..h * w).map(|p| (0..c).map(|ch| x.data()[ch * h * w + p]).collect()).collect();
            let proj = linear(&pix, store, &det.backbone.projections[l]);
            tokens.extend(layer_norm(&proj, store, &det.backbone.norms[l]));
        }
    }

    // encoder
    if !det.encoder.layers.is_empty() {
        let embed = store.value(det.encoder.level_embed);
        let mut pos: Rows = Vec::new();
        let mut refs = Vec::new();
        for (l, &(h, w)) in shapes.iter().enumerate() {
            for i in 0..h {
                for j in 0..w {
                    let (px, py) = ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64);
                    let s = sinusoid(px, py, d);
                    pos.push((0..d).map(|c| s[c] + embed.data()[l * d + c]).collect());
                    refs.extend([px, py]);
                }
            }
        }
        let refs = Tensor::new([refs.len() / 2, 2], refs).unwrap();
        for layer in &det.encoder.layers {
            let q = add(&tokens, &pos);
            let qt = Tensor::new([q.len(), d], q.concat()).unwrap();
            let vt = Tensor::new([tokens.len(), d], tokens.concat()).unwrap();
            let a = rows_of(&ms_deform_attn(store, &layer.attn, &qt, &refs, &vt, &layout));
            let h1 = layer_norm(&add(&tokens, &a), store, &layer.norm_attn);
            let f = mlp(&h1, store, &layer.ffn);
            tokens = layer_norm(&add(&h1, &f), store, &layer.norm_ffn);
        }
    }
    let memory = Tensor::new([tokens.len(), d], tokens.concat()).unwrap();

    // decoder
    let mut content = rows_of(store.value(det.query_content));
    let pos = rows_of(store.value(det.query_pos));
    let n = content.len();
    let mut outputs = Vec::new();
    for layer in &det.decoder {
        let m = layer.aligner.heads;
        let boxes: Rows = linear(&pos, store, &layer.aligner.box_proj)
            .into_iter()
            .map(|r| r.into_iter().map(sigmoid).collect())
            .collect();
        let refs: Rows = linear(&boxes, store, &layer.aligner.point_proj)
            .into_iter()
            .map(|r| r.into_iter().map(sigmoid).collect())
            .collect();
        let cross_query: Rows = if layer.use_aligner {
            let (h, w) = shapes[layer.level];
            let start = layout.starts[layer.level];
            let level = Tensor::new([h, w, d], memory.data()[start * d..(start + h * w) * d].to_vec()).unwrap();
            let bt = Tensor::new([n, 4], boxes.concat()).unwrap();
            let regions = roi_align(&level, &bt, layer.aligner.grid);
            let flat: Rows = regions.data().chunks(regions.numel() / n).map(<[f64]>::to_vec).collect();
            let unit = mlp(&flat, store, &layer.aligner.resampler.predictor);
            let gates = linear(&content, store, &layer.aligner.reweight.gate);
            (0..n)
                .map(|q| {
                    let b = &boxes[q];
                    let mut row = Vec::with_capacity(m * d);
                    let mut prow = Vec::with_capacity(m * d);
                    for k in 0..m {
                        let px = b[0] - b[2] / 2.0 + sigmoid(unit[q][2 * k]) * b[2];
                        let py = b[1] - b[3] / 2.0 + sigmoid(unit[q][2 * k + 1]) * b[3];
                        let new_c = bilinear(&level, px * w as f64 - 0.5, py * h as f64 - 0.5);
                        let new_p = sinusoid(px, py, d);
                        for c in 0..d {
                            let gc = sigmoid(gates[q][k * d + c]);
                            let gp = sigmoid(gates[q][(m + k) * d + c]);
                            row.push(content[q][c] + gc * (new_c[c] - content[q][c]));
                            prow.push(pos[q][c] + gp * (new_p[c] - pos[q][c]));
                        }
                    }
                    row.iter().zip(&prow).map(|(a, b)| a + b).collect()
                })
                .collect()
        } else {
            (0..n)
                .map(|q| (0..m * d).map(|i| content[q][i % d] + pos[q][i % d]).collect())
                .collect()
        };
        let cq = Tensor::new([n, m * d], cross_query.concat()).unwrap();
        let rt = Tensor::new([n, 2], refs.concat()).unwrap();
        let cross = rows_of(&ms_deform_attn(store, &layer.cross_attn, &cq, &rt, &memory, &layout));
        let x1 = layer_norm(&add(&content, &cross), store, &layer.norm_cross);
        let sa = self_attention(store, &layer.self_attn, &add(&x1, &pos), &x1);
        let x2 = layer_norm(&add(&x1, &sa), store, &layer.norm_self);
        let f = mlp(&x2, store, &layer.ffn);
        content = layer_norm(&add(&x2, &f), store, &layer.norm_ffn);

        let logits = linear(&content, store, &det.heads.class);
        let bx: Rows = mlp(&content, store, &det.heads.boxes)
            .into_iter()
            .map(|r| r.into_iter().map(sigmoid).collect())
            .collect();
        outputs.push((
            Tensor::new([n, logits[0].len()], logits.concat()).unwrap(),
            Tensor::new([n, 4], bx.concat()).unwrap(),
        ));
    }
    outputs
}
