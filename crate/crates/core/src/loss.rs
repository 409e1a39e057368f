//! Set-prediction loss: per-layer Hungarian matching, then cross-entropy,
//! L1 and GIoU terms on the matched pairs.

use crate::error::{Error, Result};
use crate::matching::{hungarian_match, match_cost, LossWeights, Targets};
use crate::model::LayerPrediction;
use crate::tensor::{Tensor, Var};

/// Loss terms of one decoder layer (unweighted) and its assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerLoss {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// `(query, target)` pairs.
    pub matches: Vec<(usize, usize)>,
}

pub struct SetLoss<'t> {
    /// Weighted sum over the included layers.
    pub total: Var<'t>,
    pub layers: Vec<LayerLoss>,
}

impl SetLoss<'_> {
    /// Unweighted terms summed over layers: `(class, l1, giou)`.
    pub fn components(&self) -> (f64, f64, f64) {
        self.layers
            .iter()
            .fold((0.0, 0.0, 0.0), |a, l| (a.0 + l.class, a.1 + l.l1, a.2 + l.giou))
    }
}

/// Generalized IoU of paired cxcywh boxes `[K, 4]`; returns `[K]`.
pub fn giou_pairs<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let corners = |x: Var<'t>| -> Result<[Var<'t>; 4]> {
        let c = x.narrow(1, 0, 2)?;
        let half = x.narrow(1, 2, 2)?.scale(0.5);
        let lo = c.sub(half)?;
        let hi = c.add(half)?;
        Ok([lo.narrow(1, 0, 1)?, lo.narrow(1, 1, 1)?, hi.narrow(1, 0, 1)?, hi.narrow(1, 1, 1)?])
    };
    let [ax1, ay1, ax2, ay2] = corners(a)?;
    let [bx1, by1, bx2, by2] = corners(b)?;
    let area = |x1: Var<'t>, y1: Var<'t>, x2: Var<'t>, y2: Var<'t>| -> Result<Var<'t>> {
        x2.sub(x1)?.clamp_min(0.0).mul(y2.sub(y1)?.clamp_min(0.0))
    };
    let area_a = area(ax1, ay1, ax2, ay2)?;
    let area_b = area(bx1, by1, bx2, by2)?;
    let inter = area(ax1.maximum(bx1)?, ay1.maximum(by1)?, ax2.minimum(bx2)?, ay2.minimum(by2)?)?;
    let union = area_a.add(area_b)?.sub(inter)?.clamp_min(1e-12);
    let enclosing = area(ax1.minimum(bx1)?, ay1.minimum(by1)?, ax2.maximum(bx2)?, ay2.maximum(by2)?)?.clamp_min(1e-12);
    let iou = inter.div(union)?;
    let k = a.shape()[0];
    iou.sub(enclosing.sub(union)?.div(enclosing)?)?.reshape(&[k])
}

fn layer_loss<'t>(
    pred: &LayerPrediction<'t>,
    targets: &Targets,
    num_classes: usize,
    weights: &LossWeights,
) -> Result<(Var<'t>, LayerLoss)> {
    let tape = pred.logits.tape();
    let ls = pred.logits.shape();
    if ls.len() != 2 || ls[1] != num_classes + 1 || pred.boxes.shape() != [ls[0], 4] {
        return Err(Error::shape("set_loss", &ls, &pred.boxes.shape()));
    }
    if targets.labels.len() != targets.boxes.len() {
        return Err(Error::contract("targets need one label per box"));
    }
    let n = ls[0];
    let probs = pred.logits.softmax(1)?.to_tensor();
    let boxes = pred.boxes.to_tensor();
    let cost = match_cost(probs.data(), boxes.data(), num_classes, targets, weights)?;
    let matches = hungarian_match(&cost)?;

    // weighted one-hot of each query's target class
    let mut onehot = Tensor::zeros([n, num_classes + 1]);
    let mut matched = vec![None; n];
    for &(q, t) in &matches {
        matched[q] = Some(targets.labels[t]);
    }
    for (q, m) in matched.iter().enumerate() {
        let (class, w) = match m {
            Some(c) => (*c, 1.0),
            None => (num_classes, weights.no_object),
        };
        onehot.data_mut()[q * (num_classes + 1) + class] = w;
    }
    let ce = pred
        .logits
        .log_softmax(1)?
        .mul(tape.constant(onehot))?
        .sum_all()
        .scale(-1.0 / n as f64);

    let num_gt = targets.labels.len().max(1) as f64;
    let (l1, giou) = if matches.is_empty() {
        (tape.constant(Tensor::scalar(0.0)), tape.constant(Tensor::scalar(0.0)))
    } else {
        let queries: Vec<usize> = matches.iter().map(|m| m.0).collect();
        let k = queries.len();
        let picked = pred.boxes.index_select(&queries)?;
        let target = Tensor::new(
            [k, 4],
            matches
                .iter()
                .flat_map(|&(_, t)| targets.boxes[t].to_array())
                .collect(),
        )?;
        let target = tape.constant(target);
        let l1 = picked.sub(target)?.abs().sum_all().scale(1.0 / num_gt);
        let g = giou_pairs(picked, target)?.neg().add_scalar(1.0).sum_all().scale(1.0 / num_gt);
        (l1, g)
    };
    let total = ce
        .scale(weights.class)
        .add(l1.scale(weights.l1))?
        .add(giou.scale(weights.giou))?;
    let record = LayerLoss {
        class: ce.item(),
        l1: l1.item(),
        giou: giou.item(),
        matches,
    };
    Ok((total, record))
}

/// Loss of one image. With `weights.aux` every layer contributes, otherwise
/// only the last.
pub fn set_loss<'t>(
    predictions: &[LayerPrediction<'t>],
    targets: &Targets,
    num_classes: usize,
    weights: &LossWeights,
) -> Result<SetLoss<'t>> {
    let Some(last) = predictions.last() else {
        return Err(Error::contract("set_loss needs at least one decoder layer"));
    };
    let included = if weights.aux { predictions } else { std::slice::from_ref(last) };
    let mut total: Option<Var<'t>> = None;
    let mut layers = Vec::with_capacity(included.len());
    for pred in included {
        let (loss, record) = layer_loss(pred, targets, num_classes, weights)?;
        total = Some(match total {
            Some(t) => t.add(loss)?,
            None => loss,
        });
        layers.push(record);
    }
    Ok(SetLoss {
        total: total.unwrap(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{giou, BoxCxCyWh};
    use crate::tensor::{gradcheck, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoxCxCyWh {
        BoxCxCyWh { cx, cy, w, h }
    }

    #[test]
    fn empty_targets_uniform_logits() {
        let tape = Tape::new();
        let pred = LayerPrediction {
            logits: tape.constant(Tensor::zeros([5, 3])),
            boxes: tape.constant(Tensor::full([5, 4], 0.5)),
        };
        let w = LossWeights::default();
        let loss = set_loss(&[pred], &Targets::default(), 2, &w).unwrap();
        assert!((loss.total.item() - 0.1 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let tape = Tape::new();
        let big = 1000.0;
        let logits = Tensor::new([2, 3], vec![-big, big, -big, -big, -big, big]).unwrap();
        let pred = LayerPrediction {
            logits: tape.constant(logits),
            boxes: tape.constant(Tensor::new([2, 4], vec![0.3, 0.4, 0.2, 0.1, 0.5, 0.5, 0.5, 0.5]).unwrap()),
        };
        let t = Targets {
            labels: vec![1],
            boxes: vec![bx(0.3, 0.4, 0.2, 0.1)],
        };
        let loss = set_loss(&[pred], &t, 2, &LossWeights::default()).unwrap();
        assert!(loss.total.item().abs() < 1e-12, "{}", loss.total.item());
    }

    #[test]
    fn tape_giou_matches_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..50 {
            a.extend([rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)]);
            b.extend([rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.4), rng.random_range(0.05..0.4)]);
        }
        let tape = Tape::new();
        let g = giou_pairs(
            tape.constant(Tensor::new([50, 4], a.clone()).unwrap()),
            tape.constant(Tensor::new([50, 4], b.clone()).unwrap()),
        )
        .unwrap()
        .to_tensor();
        for i in 0..50 {
            let p = bx(a[4 * i], a[4 * i + 1], a[4 * i + 2], a[4 * i + 3]);
            let q = bx(b[4 * i], b[4 * i + 1], b[4 * i + 2], b[4 * i + 3]);
            assert!((g.data()[i] - giou(&p.to_xyxy(), &q.to_xyxy())).abs() < 1e-12);
        }
    }

    #[test]
    fn invariant_to_target_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::from_fn([4, 3], |_| rng.random_range(-2.0..2.0));
        let boxes = Tensor::from_fn([4, 4], |_| rng.random_range(0.2..0.6));
        let t = Targets {
            labels: vec![0, 1, 1],
            boxes: vec![bx(0.3, 0.3, 0.2, 0.2), bx(0.6, 0.5, 0.3, 0.2), bx(0.5, 0.7, 0.1, 0.2)],
        };
        let rev = Targets {
            labels: t.labels.iter().rev().copied().collect(),
            boxes: t.boxes.iter().rev().copied().collect(),
        };
        let eval = |t: &Targets| {
            let tape = Tape::new();
            let pred = LayerPrediction {
                logits: tape.constant(logits.clone()),
                boxes: tape.constant(boxes.clone()),
            };
            set_loss(&[pred], t, 2, &LossWeights::default()).unwrap().total.item()
        };
        assert!((eval(&t) - eval(&rev)).abs() < 1e-12);
    }

    #[test]
    fn gradient_on_tiny_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Tensor::from_fn([3, 3], |_| rng.random_range(-1.0..1.0));
        let raw = Tensor::from_fn([3, 4], |_| rng.random_range(-1.0..1.0));
        let t = Targets {
            labels: vec![1],
            boxes: vec![bx(0.45, 0.55, 0.3, 0.25)],
        };
        let err = gradcheck::check(&[logits, raw], |_, v| {
            let pred = LayerPrediction {
                logits: v[0],
                boxes: v[1].sigmoid(),
            };
            Ok(set_loss(&[pred], &t, 2, &LossWeights::default())?.total)
        })
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn aux_flag_selects_layers() {
        let tape = Tape::new();
        let mk = || LayerPrediction {
            logits: tape.constant(Tensor::zeros([2, 2])),
            boxes: tape.constant(Tensor::full([2, 4], 0.5)),
        };
        let preds = [mk(), mk(), mk()];
        let mut w = LossWeights::default();
        let all = set_loss(&preds, &Targets::default(), 1, &w).unwrap();
        w.aux = false;
        let last = set_loss(&preds, &Targets::default(), 1, &w).unwrap();
        assert_eq!(all.layers.len(), 3);
        assert!((all.total.item() - 3.0 * last.total.item()).abs() < 1e-12);
    }
}
