use densup_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::atss::center_inside;
use super::{AssignmentResult, Strategy};
use crate::error::{Error, Result};
use crate::geometry::{iou, BoxFormat, BoxSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskAlignedParams {
    pub alpha: f64,
    pub beta: f64,
    pub top_q: usize,
}

impl Default for TaskAlignedParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 6.0,
            top_q: 13,
        }
    }
}

/// Task-aligned assignment.
///
/// The alignment metric of prediction `i` for ground truth `j` is
/// `s^alpha * u^beta` with `s` the predicted probability of the gt class and
/// `u` the IoU. Each gt takes its `top_q` predictions with positive metric
/// (restricted to anchor centers inside the gt when `centers` is given); a
/// prediction wanted by several gts goes to the larger metric.
pub fn task_aligned_assign(
    scores: &Tensor,
    pred: &BoxSet,
    gt: &BoxSet,
    gt_labels: &[usize],
    params: &TaskAlignedParams,
    centers: Option<&[[f64; 2]]>,
) -> Result<AssignmentResult> {
    let p = pred.len();
    if scores.rank() != 2 || scores.shape()[0] != p || gt_labels.len() != gt.len() {
        return Err(Error::Shape(format!(
            "scores {:?} for {p} predictions, {} gts with {} labels",
            scores.shape(),
            gt.len(),
            gt_labels.len()
        )));
    }
    if let Some(c) = centers {
        if c.len() != p {
            return Err(Error::Shape(format!("{} centers for {p} predictions", c.len())));
        }
    }
    if scores.data().iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Invalid("scores must lie in [0, 1]".into()));
    }
    let mut result = AssignmentResult::background(p, Strategy::TaskAligned);
    let mut best_metric = vec![0.0f64; p];
    let pred = pred.convert(BoxFormat::Corner);
    let gt = gt.convert(BoxFormat::Corner);

    for (g, gbox) in gt.coords().iter().enumerate() {
        let label = gt_labels[g];
        let mut ranked: Vec<(f64, f64, usize)> = (0..p)
            .filter(|&i| centers.is_none_or(|c| center_inside(c[i], gbox)))
            .map(|i| {
                let u = iou(&pred.get(i), gbox);
                let s = scores.at(i, label);
                (s.powf(params.alpha) * u.powf(params.beta), u, i)
            })
            .filter(|(t, _, _)| *t > 0.0)
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
        for &(t, u, i) in ranked.iter().take(params.top_q) {
            if result.assignment[i].is_none() || t > best_metric[i] {
                result.assignment[i] = Some(g);
                result.quality[i] = u;
                best_metric[i] = t;
            }
        }
    }
    Ok(result)
}
