//! COCO-style box AP: IoU thresholds 0.50:0.05:0.95, 101-point
//! interpolated precision, mean over categories then thresholds.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::CocoDataset;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxXyWh};

pub const NUM_THRESHOLDS: usize = 10;
pub const NUM_RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`, each computed as an exact decimal quotient.
pub fn iou_thresholds() -> [f64; NUM_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

fn recall_points() -> [f64; NUM_RECALL_POINTS] {
    std::array::from_fn(|i| i as f64 / 100.0)
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, width, height]` in pixels.
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEval {
    pub category_id: u64,
    /// AP per IoU threshold.
    pub ap: Vec<f64>,
    /// Interpolated precision at the 101 recall points, per threshold.
    pub precision: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub thresholds: Vec<f64>,
    /// Categories with at least one ground-truth box; others are excluded.
    pub categories: Vec<CategoryEval>,
    /// Mean over categories, per threshold.
    pub ap_per_threshold: Vec<f64>,
    pub map: f64,
    pub map50: f64,
    pub map75: f64,
}

impl EvalResult {
    /// Three-column summary table.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4}\n",
            "mAP", "mAP@0.5", "mAP@0.75", self.map, self.map50, self.map75
        )
    }
}

/// Per-threshold TP flags and scores of one category across all images,
/// plus its ground-truth count.
struct CategoryMatches {
    scores: Vec<f64>,
    tp: Vec<[bool; NUM_THRESHOLDS]>,
    num_gt: usize,
}

fn validate_results(preds: &[CocoResult], gt: &CocoDataset) -> Result<()> {
    for (index, p) in preds.iter().enumerate() {
        let fail = |message: String| Err(Error::Validation { index, message });
        if gt.image(p.image_id).is_none() {
            return fail(format!("prediction image_id {} does not exist", p.image_id));
        }
        if !gt.categories.iter().any(|c| c.id == p.category_id) {
            return fail(format!("prediction category_id {} does not exist", p.category_id));
        }
        if !p.score.is_finite() || p.bbox.iter().any(|v| !v.is_finite()) {
            return fail("prediction has a non-finite score or box".into());
        }
        if p.bbox[2] < 0.0 || p.bbox[3] < 0.0 {
            return fail(format!("prediction bbox {:?} has negative extent", p.bbox));
        }
    }
    Ok(())
}

fn xywh(b: [f64; 4]) -> BoxXyWh {
    BoxXyWh::new(b[0], b[1], b[2], b[3])
}

/// Greedy per-image matching: detections in descending score order each
/// take the unmatched ground truth with the highest IoU at or above the
/// threshold, ties going to the lower ground-truth index.
/// Returns the matched ground-truth index per detection and threshold.
fn match_image(dets: &[&CocoResult], gts: &[BoxXyWh]) -> Vec<[Option<usize>; NUM_THRESHOLDS]> {
    let thresholds = iou_thresholds();
    let ious: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|g| iou(&xywh(d.bbox).to_xyxy(), &g.to_xyxy())).collect())
        .collect();
    let mut flags = vec![[None; NUM_THRESHOLDS]; dets.len()];
    for (t, &thr) in thresholds.iter().enumerate() {
        let mut taken = vec![false; gts.len()];
        for (d, row) in ious.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if taken[g] || v < thr {
                    continue;
                }
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                flags[d][t] = Some(g);
            }
        }
    }
    flags
}

/// Interpolated precision at the recall points, given detections sorted by
/// descending score.
fn interpolated_precision(tp: &[bool], num_gt: usize) -> Vec<f64> {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut ctp, mut cfp) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            ctp += 1;
        } else {
            cfp += 1;
        }
        recall.push(ctp as f64 / num_gt as f64);
        precision.push(ctp as f64 / (ctp + cfp) as f64);
    }
    // precision envelope, non-increasing in rank
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    recall_points()
        .iter()
        .map(|&r| {
            let idx = recall.partition_point(|&v| v < r);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .collect()
}

pub fn evaluate(preds: &[CocoResult], gt: &CocoDataset) -> Result<EvalResult> {
    gt.validate()?;
    validate_results(preds, gt)?;
    let thresholds = iou_thresholds();
    let mut by_cat: HashMap<u64, CategoryMatches> = gt
        .categories
        .iter()
        .map(|c| {
            (
                c.id,
                CategoryMatches {
                    scores: Vec::new(),
                    tp: Vec::new(),
                    num_gt: 0,
                },
            )
        })
        .collect();
    for img in &gt.images {
        for cat in &gt.categories {
            let gts: Vec<BoxXyWh> = gt
                .annotations_for(img.id)
                .filter(|a| a.category_id == cat.id)
                .map(|a| a.bbox())
                .collect();
            let mut dets: Vec<&CocoResult> = preds
                .iter()
                .filter(|p| p.image_id == img.id && p.category_id == cat.id)
                .collect();
            // stable: equal scores keep file order
            dets.sort_by(|a, b| b.score.total_cmp(&a.score));
            let flags = match_image(&dets, &gts);
            let entry = by_cat.get_mut(&cat.id).unwrap();
            entry.num_gt += gts.len();
            entry.scores.extend(dets.iter().map(|d| d.score));
            entry.tp.extend(flags.iter().map(|f| f.map(|g| g.is_some())));
        }
    }

    let mut categories = Vec::new();
    for cat in &gt.categories {
        let m = &by_cat[&cat.id];
        if m.num_gt == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..m.scores.len()).collect();
        order.sort_by(|&a, &b| m.scores[b].total_cmp(&m.scores[a]));
        let mut ap = Vec::with_capacity(NUM_THRESHOLDS);
        let mut precision = Vec::with_capacity(NUM_THRESHOLDS);
        for t in 0..NUM_THRESHOLDS {
            let tp: Vec<bool> = order.iter().map(|&i| m.tp[i][t]).collect();
            let p = interpolated_precision(&tp, m.num_gt);
            ap.push(p.iter().sum::<f64>() / NUM_RECALL_POINTS as f64);
            precision.push(p);
        }
        categories.push(CategoryEval {
            category_id: cat.id,
            ap,
            precision,
        });
    }

    let ap_per_threshold: Vec<f64> = (0..NUM_THRESHOLDS)
        .map(|t| {
            if categories.is_empty() {
                0.0
            } else {
                categories.iter().map(|c| c.ap[t]).sum::<f64>() / categories.len() as f64
            }
        })
        .collect();
    let map = ap_per_threshold.iter().sum::<f64>() / NUM_THRESHOLDS as f64;
    Ok(EvalResult {
        thresholds: thresholds.to_vec(),
        map50: ap_per_threshold[0],
        map75: ap_per_threshold[5],
        map,
        ap_per_threshold,
        categories,
    })
}

pub fn write_results(preds: &[CocoResult], path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(preds)?).map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<CocoResult>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_eval(result: &EvalResult, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(result)?).map_err(|e| Error::io(path, e))
}

pub fn read_eval(path: &Path) -> Result<EvalResult> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Ground truth restated as perfect predictions with score 1.
pub fn ground_truth_as_results(gt: &CocoDataset) -> Vec<CocoResult> {
    gt.annotations
        .iter()
        .map(|a| CocoResult {
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox,
            score: 1.0,
        })
        .collect()
}
