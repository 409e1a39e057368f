//! Numeric self-checks: finite-difference gradients, loop oracles, and
//! evaluator fixtures, each reported as a named pass/fail row.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::{roi_align, Reweight};
use crate::annotation::{CocoAnnotation, CocoCategory, CocoDataset, CocoImage};
use crate::deform::{sample_points, LevelLayout, MsDeformAttn, MsDeformAttnConfig};
use crate::error::Result;
use crate::eval::{evaluate, CocoResult};
use crate::geometry::{BoxCxCyWh, BoxXyWh};
use crate::loss::set_loss;
use crate::matching::{hungarian_match, CostMatrix, LossWeights, Targets};
use crate::model::{Heads, LayerPrediction};
use crate::nn::{Ctx, Init};
use crate::reference;
use crate::tensor::{gradcheck, ParamGroup, ParamStore, Tape, Tensor};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Worst error seen (relative for gradients, absolute for oracles).
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            instances,
            worst,
            tolerance,
            passed: worst.is_finite() && worst < tolerance,
        }
    }

    fn exact(name: &str, instances: usize, ok: bool) -> Self {
        Self {
            name: name.to_string(),
            instances,
            worst: if ok { 0.0 } else { 1.0 },
            tolerance: 0.0,
            passed: ok,
        }
    }
}

/// The checks as a fixed-width table, one row per check.
pub struct Report<'a>(pub &'a [CheckResult]);

impl fmt::Display for Report<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<28} {:>9} {:>12} {:>10}  result", "check", "instances", "worst", "tolerance")?;
        for c in self.0 {
            writeln!(
                f,
                "{:<28} {:>9} {:>12.3e} {:>10.0e}  {}",
                c.name,
                c.instances,
                c.worst,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn jittered_store(rng: &mut ChaCha8Rng, build: impl FnOnce(&mut Init)) -> ParamStore {
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.random());
    build(&mut Init {
        store: &mut store,
        rng: &mut init_rng,
        group: ParamGroup::Detector,
    });
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-0.5..0.5);
        }
    }
    store
}

fn random_attn_config(rng: &mut ChaCha8Rng) -> (MsDeformAttnConfig, LevelLayout) {
    let heads = rng.random_range(1..4);
    let levels = rng.random_range(1..4);
    let config = MsDeformAttnConfig {
        query_dim: rng.random_range(1..6),
        value_dim: rng.random_range(1..6),
        hidden_dim: heads * rng.random_range(1..4),
        out_dim: rng.random_range(1..5),
        heads,
        levels,
        points: rng.random_range(1..4),
    };
    let shapes = (0..levels)
        .map(|_| (rng.random_range(1..6), rng.random_range(1..6)))
        .collect();
    (config, LevelLayout::new(shapes))
}

fn worst_of(instances: usize, mut one: impl FnMut(&mut ChaCha8Rng) -> Result<f64>, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let e = one(&mut rng)?;
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
        if worst.is_nan() {
            break;
        }
    }
    Ok(worst)
}

/// Finite-difference gradient checks, `instances` random cases per operation.
pub fn gradient_checks(instances: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let mut push = |name: &str, worst: f64| out.push(CheckResult::new(name, instances, worst, GRAD_TOLERANCE));

    push(
        "grad/matmul",
        worst_of(instances, |rng| {
            let (n, k, m) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5));
            let a = uniform(rng, vec![n, k], -1.0, 1.0);
            let b = uniform(rng, vec![k, m], -1.0, 1.0);
            gradcheck::check(&[a, b], |_, v| v[0].matmul(v[1]))
        }, 1)?,
    );
    push(
        "grad/softmax",
        worst_of(instances, |rng| {
            let shape = vec![rng.random_range(1..4), rng.random_range(1..6)];
            let x = uniform(rng, shape, -3.0, 3.0);
            let axis = rng.random_range(0..2);
            gradcheck::check(&[x], |_, v| v[0].softmax(axis))
        }, 2)?,
    );
    push(
        "grad/sigmoid",
        worst_of(instances, |rng| {
            let len = rng.random_range(1..8);
            let x = uniform(rng, vec![len], -5.0, 5.0);
            gradcheck::check(&[x], |_, v| Ok(v[0].sigmoid()))
        }, 3)?,
    );
    push(
        "grad/layer_norm",
        worst_of(instances, |rng| {
            let d = rng.random_range(2..7);
            let n = rng.random_range(1..4);
            let x = uniform(rng, vec![n, d], -2.0, 2.0);
            let g = uniform(rng, vec![d], 0.5, 1.5);
            let b = uniform(rng, vec![d], -0.5, 0.5);
            gradcheck::check(&[x, g, b], |_, v| v[0].layer_norm(v[1], v[2], 1))
        }, 4)?,
    );
    push(
        "grad/bilinear_sample",
        worst_of(instances, |rng| {
            let (h, w, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..4));
            let map = uniform(rng, vec![h, w, d], -1.0, 1.0);
            let p = rng.random_range(1..6);
            let pts = Tensor::from_fn([p, 2], |i| {
                let extent = if i % 2 == 0 { w } else { h } as f64;
                rng.random_range(-1.5..extent + 0.5)
            });
            gradcheck::check(&[map, pts], |_, v| sample_points(v[0], v[1]))
        }, 5)?,
    );
    push(
        "grad/ms_deform_attn",
        worst_of(instances, |rng| {
            let (config, layout) = random_attn_config(rng);
            let mut attn = None;
            let store = jittered_store(rng, |init| attn = MsDeformAttn::new(init, "a", config).ok());
            let attn = attn.expect("valid random config");
            let n = rng.random_range(1..4);
            let q = uniform(rng, vec![n, config.query_dim], -1.0, 1.0);
            let r = uniform(rng, vec![n, 2], 0.0, 1.0);
            let v = uniform(rng, vec![layout.total_len(), config.value_dim], -1.0, 1.0);
            let params: Vec<_> = store.ids().collect();
            gradcheck::check_params(&store, &params, &[q, r, v], 12, |ctx, x| {
                attn.forward(ctx, x[0], x[1], x[2], &layout)
            })
        }, 6)?,
    );
    push(
        "grad/roi_align",
        worst_of(instances, |rng| {
            let (h, w, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..3));
            let level = uniform(rng, vec![h, w, d], -1.0, 1.0);
            let n = rng.random_range(1..3);
            let boxes = Tensor::from_fn([n, 4], |i| {
                if i % 4 < 2 {
                    rng.random_range(0.1..0.9)
                } else {
                    rng.random_range(0.1..0.6)
                }
            });
            let grid = rng.random_range(1..4);
            gradcheck::check(&[level, boxes], |_, v| roi_align(v[0], v[1], grid))
        }, 7)?,
    );
    push(
        "grad/reweight",
        worst_of(instances, |rng| {
            let (m, d, n) = (rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
            let mut rw = None;
            let store = jittered_store(rng, |init| rw = Some(Reweight::new(init, "g", d, m)));
            let rw = rw.expect("built");
            let inputs = [
                uniform(rng, vec![n, d], -1.0, 1.0),
                uniform(rng, vec![n, d], -1.0, 1.0),
                uniform(rng, vec![n, m, d], -1.0, 1.0),
                uniform(rng, vec![n, m, d], -1.0, 1.0),
            ];
            let params: Vec<_> = store.ids().collect();
            gradcheck::check_params(&store, &params, &inputs, 16, |ctx, x| {
                let (c, p) = rw.forward(ctx, x[0], x[1], x[2], x[3])?;
                crate::tensor::Var::concat(&[c, p], 2)
            })
        }, 8)?,
    );
    push(
        "grad/heads",
        worst_of(instances, |rng| {
            let (d, c, n) = (rng.random_range(2..6), rng.random_range(1..4), rng.random_range(1..4));
            let mut heads = None;
            let store = jittered_store(rng, |init| heads = Some(Heads::new(init, d, c)));
            let heads = heads.expect("built");
            let x = uniform(rng, vec![n, d], -1.0, 1.0);
            let params: Vec<_> = store.ids().collect();
            gradcheck::check_params(&store, &params, &[x], 16, |ctx, v| {
                let p = heads.forward(ctx, v[0])?;
                crate::tensor::Var::concat(&[p.logits, p.boxes], 1)
            })
        }, 9)?,
    );
    push(
        "grad/set_loss",
        worst_of(instances, |rng| {
            let (n, c) = (rng.random_range(2..6), rng.random_range(1..4));
            let layers = rng.random_range(1..3);
            let gt = rng.random_range(0..n);
            let targets = Targets {
                labels: (0..gt).map(|_| rng.random_range(0..c)).collect(),
                boxes: (0..gt)
                    .map(|_| BoxCxCyWh {
                        cx: rng.random_range(0.2..0.8),
                        cy: rng.random_range(0.2..0.8),
                        w: rng.random_range(0.05..0.4),
                        h: rng.random_range(0.05..0.4),
                    })
                    .collect(),
            };
            let inputs: Vec<Tensor> = (0..layers)
                .flat_map(|_| {
                    [
                        uniform(rng, vec![n, c + 1], -2.0, 2.0),
                        uniform(rng, vec![n, 4], -1.5, 1.5),
                    ]
                })
                .collect();
            let weights = LossWeights::default();
            gradcheck::check(&inputs, |_, v| {
                let preds: Vec<LayerPrediction> = v
                    .chunks(2)
                    .map(|p| LayerPrediction {
                        logits: p[0],
                        boxes: p[1].sigmoid(),
                    })
                    .collect();
                Ok(set_loss(&preds, &targets, c, &weights)?.total)
            })
        }, 10)?,
    );
    Ok(out)
}

/// Deformable attention against the loop oracle.
pub fn deform_oracle_check(configs: usize) -> Result<CheckResult> {
    let worst = worst_of(configs, |rng| {
        let (config, layout) = random_attn_config(rng);
        let mut attn = None;
        let store = jittered_store(rng, |init| attn = MsDeformAttn::new(init, "a", config).ok());
        let attn = attn.expect("valid random config");
        let n = rng.random_range(1..5);
        let q = uniform(rng, vec![n, config.query_dim], -1.0, 1.0);
        let r = uniform(rng, vec![n, 2], -0.1, 1.1);
        let v = uniform(rng, vec![layout.total_len(), config.value_dim], -1.0, 1.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store);
        let got = attn
            .forward(&ctx, ctx.constant(q.clone()), ctx.constant(r.clone()), ctx.constant(v.clone()), &layout)?
            .to_tensor();
        Ok(got.max_abs_diff(&reference::ms_deform_attn(&store, &attn, &q, &r, &v, &layout)))
    }, 21)?;
    Ok(CheckResult::new("oracle/ms_deform_attn", configs, worst, ORACLE_TOLERANCE))
}

/// ROIAlign against the per-bin loop oracle.
pub fn roi_oracle_check(configs: usize) -> Result<CheckResult> {
    let worst = worst_of(configs, |rng| {
        let (h, w, d) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..4));
        let grid = rng.random_range(1..5);
        let n = rng.random_range(1..4);
        let level = uniform(rng, vec![h, w, d], -1.0, 1.0);
        let boxes = Tensor::from_fn([n, 4], |i| {
            if i % 4 < 2 {
                rng.random_range(0.0..1.0)
            } else {
                rng.random_range(0.0..0.8)
            }
        });
        let tape = Tape::new();
        let got = roi_align(tape.constant(level.clone()), tape.constant(boxes.clone()), grid)?.to_tensor();
        Ok(got.max_abs_diff(&reference::roi_align(&level, &boxes, grid)))
    }, 22)?;
    Ok(CheckResult::new("oracle/roi_align", configs, worst, ORACLE_TOLERANCE))
}

/// Hungarian matching against exhaustive search on square and rectangular
/// matrices with up to six rows and columns.
pub fn hungarian_oracle_check(matrices: usize) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut ok = true;
    for _ in 0..matrices {
        let (r, c) = (rng.random_range(1..7), rng.random_range(1..7));
        let cost = CostMatrix::from_fn(r, c, |_, _| rng.random_range(-5.0..5.0));
        let got = hungarian_match(&cost)?;
        let (best, _) = reference::brute_force_assignment(&cost);
        ok &= got.len() == r.min(c) && (cost.total(&got) - best).abs() < 1e-9;
    }
    Ok(CheckResult::exact("oracle/hungarian", matrices, ok))
}

fn single_box_fixture(pred: [f64; 4]) -> Result<(f64, f64, f64)> {
    let gt = CocoDataset {
        images: vec![CocoImage {
            id: 1,
            file_name: "a.ppm".into(),
            width: 32,
            height: 32,
        }],
        annotations: vec![CocoAnnotation::from_box(
            1,
            1,
            1,
            BoxXyWh {
                x: 0.0,
                y: 0.0,
                w: 10.0,
                h: 10.0,
            },
        )],
        categories: vec![CocoCategory {
            id: 1,
            name: "object".into(),
        }],
    };
    let r = evaluate(
        &[CocoResult {
            image_id: 1,
            category_id: 1,
            bbox: pred,
            score: 1.0,
        }],
        &gt,
    )?;
    Ok((r.map, r.map50, r.map75))
}

/// Hand-derived evaluator fixtures: a perfect detection and one at IoU 0.6.
pub fn map_fixture_checks() -> Result<Vec<CheckResult>> {
    let perfect = single_box_fixture([0.0, 0.0, 10.0, 10.0])? == (1.0, 1.0, 1.0);
    let (map, map50, map75) = single_box_fixture([0.0, 0.0, 10.0, 6.0])?;
    let partial = (map - 0.3).abs() < 1e-12 && map50 == 1.0 && map75 == 0.0;
    Ok(vec![
        CheckResult::exact("map/perfect", 1, perfect),
        CheckResult::exact("map/iou_0.6", 1, partial),
    ])
}

/// The full suite with `instances` cases per gradient check and `configs`
/// cases per oracle.
pub fn run(instances: usize, configs: usize) -> Result<Vec<CheckResult>> {
    let mut checks = gradient_checks(instances)?;
    checks.push(deform_oracle_check(configs)?);
    checks.push(roi_oracle_check(configs)?);
    checks.push(hungarian_oracle_check(configs)?);
    checks.extend(map_fixture_checks()?);
    Ok(checks)
}
