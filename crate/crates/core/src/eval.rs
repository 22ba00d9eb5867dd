//! COCO-style average precision: greedy matching per image, 101-point
//! interpolated precision, thresholds 0.50:0.05:0.95.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoxFormat, BoxSet};
use crate::model::Detection;

pub const MAX_DETECTIONS: usize = 100;

pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Class-averaged AP at each IoU threshold.
    pub ap_per_threshold: Vec<f64>,
    pub mean_ap: f64,
    /// Threshold-averaged AP per class; `None` for classes without ground truth.
    pub per_class_ap: Vec<Option<f64>>,
}

impl EvalResult {
    pub fn ap50(&self) -> f64 {
        self.ap_per_threshold[0]
    }
}

/// Ground truth of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub boxes: BoxSet,
    pub labels: Vec<usize>,
}

/// Area under the 101-point interpolated PR curve of a ranked TP/FP list.
pub fn interpolated_ap(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    let (mut tp, mut fp) = (0.0, 0.0);
    for &t in is_tp {
        if t {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = if k == 100 { 1.0 } else { k as f64 * 0.01 };
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// Evaluates per-image detections against ground truth over `n_classes`.
pub fn evaluate_ap(predictions: &[Vec<Detection>], truth: &[GroundTruth], n_classes: usize) -> EvalResult {
    assert_eq!(predictions.len(), truth.len(), "one prediction list per image");
    let thresholds = iou_thresholds();
    let gts: Vec<BoxSet> = truth.iter().map(|t| t.boxes.convert(BoxFormat::Corner)).collect();
    // Keep the top detections of each image (ties: lower index).
    let kept: Vec<Vec<(usize, Detection)>> = predictions
        .iter()
        .map(|dets| {
            let mut d: Vec<(usize, Detection)> = dets.iter().copied().enumerate().collect();
            d.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
            d.truncate(MAX_DETECTIONS);
            d
        })
        .collect();

    let mut table = vec![vec![None; n_classes]; thresholds.len()];
    for class in 0..n_classes {
        let n_gt: usize = truth.iter().map(|t| t.labels.iter().filter(|&&l| l == class).count()).sum();
        if n_gt == 0 {
            continue;
        }
        for (ti, &thr) in thresholds.iter().enumerate() {
            // (score, image, prediction index, is true positive)
            let mut ranked: Vec<(f64, usize, usize, bool)> = Vec::new();
            for (img, dets) in kept.iter().enumerate() {
                let mut taken = vec![false; truth[img].labels.len()];
                for &(pi, d) in dets.iter().filter(|(_, d)| d.label == class) {
                    let mut best: Option<(f64, usize)> = None;
                    for (gi, &gl) in truth[img].labels.iter().enumerate() {
                        if gl != class || taken[gi] {
                            continue;
                        }
                        let v = iou(&d.bbox, &gts[img].get(gi));
                        if v >= thr && best.is_none_or(|(bv, _)| v > bv) {
                            best = Some((v, gi));
                        }
                    }
                    if let Some((_, gi)) = best {
                        taken[gi] = true;
                    }
                    ranked.push((d.score, img, pi, best.is_some()));
                }
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = ranked.iter().map(|r| r.3).collect();
            table[ti][class] = Some(interpolated_ap(&flags, n_gt));
        }
    }

    let mean = |xs: Vec<f64>| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let ap_per_threshold: Vec<f64> = table.iter().map(|row| mean(row.iter().flatten().copied().collect())).collect();
    let per_class_ap: Vec<Option<f64>> = (0..n_classes)
        .map(|c| table[0][c].map(|_| mean(table.iter().map(|row| row[c].unwrap()).collect())))
        .collect();
    let mean_ap = mean(table.iter().flat_map(|row| row.iter().flatten().copied()).collect());
    EvalResult {
        ap_per_threshold,
        mean_ap,
        per_class_ap,
    }
}
