//! Label assignment: one-to-one Hungarian matching, ATSS, task-aligned
//! assignment, and one-to-many matching against replicated targets.
//!
//! Every strategy is deterministic; ties go to the lowest prediction index
//! (and then the lowest ground-truth index).

mod atss;
mod hungarian;
mod task_aligned;

pub use atss::{atss_assign, AnchorPoint};
pub use hungarian::{hungarian_match, linear_sum_assignment, replicate_o2m_match};
pub use task_aligned::{task_aligned_assign, TaskAlignedParams};

use densup_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{l1_distance, pairwise_giou, pairwise_iou, BoxFormat, BoxSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    Hungarian,
    Atss,
    TaskAligned,
    ReplicatedO2m,
}

/// Per-prediction assignment to a ground-truth index (or background).
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub assignment: Vec<Option<usize>>,
    /// IoU of each assigned pair; 0 for background.
    pub quality: Vec<f64>,
    pub strategy: Strategy,
    /// Replicas that could not be matched for lack of predictions.
    pub unmatched_replicas: usize,
}

impl AssignmentResult {
    pub fn background(n_pred: usize, strategy: Strategy) -> Self {
        Self {
            assignment: vec![None; n_pred],
            quality: vec![0.0; n_pred],
            strategy,
            unmatched_replicas: 0,
        }
    }

    /// (prediction, ground truth) pairs in prediction order.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(p, g)| g.map(|g| (p, g)))
            .collect()
    }

    pub fn positives(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_some()).count()
    }

    /// How many predictions each ground truth received.
    pub fn counts_per_gt(&self, n_gt: usize) -> Vec<usize> {
        let mut c = vec![0; n_gt];
        for g in self.assignment.iter().flatten() {
            c[*g] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchCostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for MatchCostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// `p x g` matching cost with its components kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub values: Tensor,
    pub class: Tensor,
    pub l1: Tensor,
    pub giou: Tensor,
    /// Prediction/ground-truth IoU, used as match quality when present.
    pub iou: Option<Tensor>,
}

impl CostMatrix {
    pub fn from_values(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Shape(format!("cost must be p x g, got {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(Error::Invalid("cost matrix has non-finite entries".into()));
        }
        let zeros = Tensor::zeros(values.shape().to_vec());
        Ok(Self {
            class: zeros.clone(),
            l1: zeros.clone(),
            giou: zeros,
            values,
            iou: None,
        })
    }

    /// DETR-style cost: focal class cost on sigmoid probabilities, L1 in
    /// center-size form, and negative GIoU.
    pub fn detection(
        probs: &Tensor,
        pred: &BoxSet,
        gt: &BoxSet,
        gt_labels: &[usize],
        w: &MatchCostWeights,
    ) -> Result<Self> {
        let (p, g) = (pred.len(), gt.len());
        if probs.rank() != 2 || probs.shape()[0] != p || gt_labels.len() != g {
            return Err(Error::Shape(format!(
                "probs {:?}, {p} predictions, {g} gts, {} labels",
                probs.shape(),
                gt_labels.len()
            )));
        }
        let pred_cs = pred.convert(BoxFormat::CenterSize);
        let gt_cs = gt.convert(BoxFormat::CenterSize);
        let l1 = l1_distance(&pred_cs, &gt_cs)?;
        let giou = pairwise_giou(pred, gt).map(|v| -v);
        let iou = pairwise_iou(pred, gt);
        let mut class = Vec::with_capacity(p * g);
        for i in 0..p {
            for &label in gt_labels {
                let pr = probs.at(i, label);
                let neg = (1.0 - w.focal_alpha) * pr.powf(w.focal_gamma) * -(1.0 - pr + 1e-8).ln();
                let pos = w.focal_alpha * (1.0 - pr).powf(w.focal_gamma) * -(pr + 1e-8).ln();
                class.push(pos - neg);
            }
        }
        let class = Tensor::new(vec![p, g], class)?;
        let values: Vec<f64> = (0..p * g)
            .map(|k| w.class * class.data()[k] + w.l1 * l1.data()[k] + w.giou * giou.data()[k])
            .collect();
        let values = Tensor::new(vec![p, g], values)?;
        if !values.is_finite() {
            return Err(Error::Invalid("cost matrix has non-finite entries".into()));
        }
        Ok(Self {
            values,
            class,
            l1,
            giou,
            iou: Some(iou),
        })
    }

    pub fn n_pred(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_gt(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn at(&self, pred: usize, gt: usize) -> f64 {
        self.values.at(pred, gt)
    }

    fn quality(&self, pred: usize, gt: usize) -> f64 {
        self.iou.as_ref().map_or(0.0, |t| t.at(pred, gt))
    }

    /// Total cost of an assignment.
    pub fn total(&self, result: &AssignmentResult) -> f64 {
        result.pairs().iter().map(|&(p, g)| self.at(p, g)).sum()
    }
}
