//! Minimum-cost bipartite assignment and the detection matching cost.

use crate::error::{Error, Result};
use crate::geometry::{giou, BoxCxCyWh};

/// Row-major `rows x cols` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("cost matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transposed(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    /// Sum of the entries picked by `pairs`.
    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.at(r, c)).sum()
    }
}

/// Minimum-total-cost one-to-one assignment of `min(rows, cols)` pairs,
/// returned sorted by row.
///
/// Shortest augmenting paths with row/column potentials, O(n^2 m). Rows are
/// inserted in index order and columns scanned in index order with strict
/// improvement, so ties resolve toward lower indices.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    if let Some(i) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "cost entry ({}, {})",
            i / cost.cols.max(1),
            i % cost.cols.max(1)
        )));
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Vec::new());
    }
    if cost.rows > cost.cols {
        let mut pairs: Vec<(usize, usize)> = hungarian_match(&cost.transposed())?
            .into_iter()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        return Ok(pairs);
    }
    let (n, m) = (cost.rows, cost.cols);
    // 1-based potentials; column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

/// Weights of the matching cost and of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight of queries matched to nothing.
    pub no_object: f64,
    /// Add the loss of every intermediate decoder layer, not just the last.
    pub aux: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
            aux: true,
        }
    }
}

/// Ground truth of one image. Labels are zero-based class indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub labels: Vec<usize>,
    pub boxes: Vec<BoxCxCyWh>,
}

/// `cost(i, j) = -λ_cls p_i(label_j) + λ_L1 |b_i - b_j|_1 - λ_giou giou(b_i, b_j)`.
/// `probs` is `[N, C + 1]` row-major, `boxes` `[N, 4]` cxcywh.
pub fn match_cost(
    probs: &[f64],
    boxes: &[f64],
    num_classes: usize,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let stride = num_classes + 1;
    if !probs.len().is_multiple_of(stride) || boxes.len() * stride != probs.len() * 4 {
        return Err(Error::shape("match_cost", &[probs.len()], &[boxes.len()]));
    }
    if let Some(&bad) = targets.labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::contract(format!("label {bad} outside {num_classes} classes")));
    }
    let n = probs.len() / stride;
    Ok(CostMatrix::from_fn(n, targets.labels.len(), |i, j| {
        let b = &boxes[i * 4..i * 4 + 4];
        let t = targets.boxes[j];
        let pred = BoxCxCyWh {
            cx: b[0],
            cy: b[1],
            w: b[2],
            h: b[3],
        };
        let l1 = (b[0] - t.cx).abs() + (b[1] - t.cy).abs() + (b[2] - t.w).abs() + (b[3] - t.h).abs();
        let g = giou(&pred.to_xyxy(), &t.to_xyxy());
        -weights.class * probs[i * stride + targets.labels[j]] + weights.l1 * l1 - weights.giou * g
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::brute_force_assignment;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_and_anti_diagonal() {
        let a = CostMatrix::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert_eq!(hungarian_match(&a).unwrap(), vec![(0, 0), (1, 1)]);
        let b = CostMatrix::new(2, 2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let pairs = hungarian_match(&b).unwrap();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(b.total(&pairs), 2.0);
    }

    #[test]
    fn empty_matrix() {
        let c = CostMatrix::new(3, 0, vec![]).unwrap();
        assert!(hungarian_match(&c).unwrap().is_empty());
    }

    #[test]
    fn rejects_nan() {
        let c = CostMatrix::new(1, 2, vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(hungarian_match(&c), Err(Error::NonFinite(_))));
    }

    #[test]
    fn matches_exhaustive_search_on_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let rows = rng.random_range(1..=6);
            let cols = rng.random_range(1..=6);
            let c = CostMatrix::from_fn(rows, cols, |_, _| rng.random_range(-5.0..5.0));
            let pairs = hungarian_match(&c).unwrap();
            assert_eq!(pairs.len(), rows.min(cols));
            let (best, _) = brute_force_assignment(&c);
            assert!((c.total(&pairs) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_costs_pick_lowest_indices() {
        let c = CostMatrix::new(3, 3, vec![1.0; 9]).unwrap();
        assert_eq!(hungarian_match(&c).unwrap(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn perfect_prediction_cost() {
        let w = LossWeights::default();
        let t = Targets {
            labels: vec![1],
            boxes: vec![BoxCxCyWh { cx: 0.4, cy: 0.5, w: 0.2, h: 0.3 }],
        };
        let c = match_cost(&[0.0, 1.0, 0.0], &[0.4, 0.5, 0.2, 0.3], 2, &t, &w).unwrap();
        assert!((c.at(0, 0) - (-w.class - w.giou)).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_cost() {
        let w = LossWeights::default();
        let t = Targets {
            labels: vec![0],
            boxes: vec![BoxCxCyWh { cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 }],
        };
        // pred box [0.4, 0.6]x[0.4, 0.6] shifted right by 0.1: iou = 0.02/0.06,
        // enclosing 0.3 x 0.2 = union, so giou = iou = 1/3.
        let c = match_cost(&[0.7, 0.2, 0.1], &[0.6, 0.5, 0.2, 0.2], 2, &t, &w).unwrap();
        let expected = -0.7 + 5.0 * 0.1 - 2.0 / 3.0;
        assert!((c.at(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_identical_costs() {
        let w = LossWeights::default();
        let t = Targets {
            labels: vec![0, 1],
            boxes: vec![
                BoxCxCyWh { cx: 0.3, cy: 0.3, w: 0.1, h: 0.2 },
                BoxCxCyWh { cx: 0.7, cy: 0.6, w: 0.3, h: 0.2 },
            ],
        };
        let p = [0.2, 0.3, 0.5, 0.2, 0.3, 0.5];
        let b = [0.5, 0.5, 0.2, 0.2, 0.5, 0.5, 0.2, 0.2];
        let c = match_cost(&p, &b, 2, &t, &w).unwrap();
        assert_eq!(c.data[..2], c.data[2..]);
    }
}
