//! Box detection precision and recall with greedy confidence-ordered matching.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::geometry::{box_iou_3d, Box3D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub category: String,
    pub bbox: Box3D,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub category: String,
    pub bbox: Box3D,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionEval {
    pub scenes: Vec<SceneDetections>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryResult {
    pub ap: f64,
    pub matched: usize,
    pub n_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub threshold: f64,
    pub map: f64,
    pub ar: f64,
    pub n_gt: usize,
    pub per_category: BTreeMap<String, CategoryResult>,
}

/// Predictions of one category in descending confidence; ties keep scene
/// and input order.
fn ranked<'a>(eval: &'a DetectionEval, category: &str) -> Vec<(usize, &'a Detection)> {
    let mut preds: Vec<(usize, &Detection)> = eval
        .scenes
        .iter()
        .enumerate()
        .flat_map(|(s, sc)| sc.predictions.iter().filter(|d| d.category == category).map(move |d| (s, d)))
        .collect();
    preds.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
    preds
}

/// All-point interpolated AP from a ranked true-positive sequence.
pub fn average_precision(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for i in 0..tp.len() {
        if rec[i] > last {
            ap += (rec[i] - last) * prec[i];
            last = rec[i];
        }
    }
    ap
}

/// Greedy matching: each prediction, in confidence order, takes the unmatched
/// same-scene ground truth of its category with the highest IoU, if that IoU
/// reaches `threshold`.
pub fn match_category(eval: &DetectionEval, category: &str, threshold: f64) -> (Vec<bool>, usize) {
    let mut used: Vec<Vec<bool>> = eval.scenes.iter().map(|s| vec![false; s.ground_truth.len()]).collect();
    let tp = ranked(eval, category)
        .into_iter()
        .map(|(s, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in eval.scenes[s].ground_truth.iter().enumerate() {
                if used[s][j] || g.category != category {
                    continue;
                }
                let iou = box_iou_3d(&d.bbox, &g.bbox);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[s][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    let n_gt = eval
        .scenes
        .iter()
        .map(|s| s.ground_truth.iter().filter(|g| g.category == category).count())
        .sum();
    (tp, n_gt)
}

pub fn detection_pr(eval: &DetectionEval, thresholds: &[f64]) -> Vec<DetectionResult> {
    let categories: BTreeSet<&str> = eval
        .scenes
        .iter()
        .flat_map(|s| s.ground_truth.iter().map(|g| g.category.as_str()))
        .collect();
    thresholds
        .iter()
        .map(|&thr| {
            let mut per_category = BTreeMap::new();
            for &c in &categories {
                let (tp, n_gt) = match_category(eval, c, thr);
                per_category.insert(
                    c.to_string(),
                    CategoryResult {
                        ap: average_precision(&tp, n_gt),
                        matched: tp.iter().filter(|&&t| t).count(),
                        n_gt,
                    },
                );
            }
            let n_gt: usize = per_category.values().map(|r| r.n_gt).sum();
            let matched: usize = per_category.values().map(|r| r.matched).sum();
            let map = if per_category.is_empty() {
                0.0
            } else {
                per_category.values().map(|r| r.ap).sum::<f64>() / per_category.len() as f64
            };
            DetectionResult {
                threshold: thr,
                map,
                ar: if n_gt == 0 { 0.0 } else { matched as f64 / n_gt as f64 },
                n_gt,
                per_category,
            }
        })
        .collect()
}
