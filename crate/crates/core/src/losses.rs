//! Training losses and the weighted composite objective.

use densup_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{diff, iou, BoxFormat, BoxSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarifocalParams {
    /// Weight on the negative branch.
    pub alpha: f64,
    /// Focusing exponent on the negative branch.
    pub gamma: f64,
}

impl Default for VarifocalParams {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            gamma: 2.0,
        }
    }
}

fn zero(tape: &mut Tape) -> Result<Var> {
    Ok(tape.constant(Tensor::scalar(0.0))?)
}

/// Varifocal loss over `p x C` logits.
///
/// Entries with target `q > 0` are positives and contribute
/// `-q (q ln p + (1 - q) ln(1 - p))`; all others contribute
/// `-alpha p^gamma ln(1 - p)`. The sum is divided by `max(positives, 1)`.
pub fn varifocal_loss(
    tape: &mut Tape,
    logits: Var,
    target: &Tensor,
    positives: usize,
    params: &VarifocalParams,
) -> Result<Var> {
    let shape = tape.shape(logits)?.to_vec();
    if target.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "varifocal target {:?} vs logits {:?}",
            target.shape(),
            shape
        )));
    }
    if target.data().iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::Invalid("varifocal target outside [0, 1]".into()));
    }
    let pos_mask = target.map(|q| if q > 0.0 { 1.0 } else { 0.0 });
    // Positives: -q * (q log p + (1 - q) log(1 - p)).
    let w_log_p = tape.constant(target.map(|q| -q * q))?;
    let w_log_1mp = tape.constant(target.map(|q| if q > 0.0 { -q * (1.0 - q) } else { 0.0 }))?;
    let neg_w = tape.constant(pos_mask.map(|m| -(1.0 - m) * params.alpha))?;

    let log_p = tape.log_sigmoid(logits)?;
    let neg_logits = tape.neg(logits)?;
    let log_1mp = tape.log_sigmoid(neg_logits)?;

    let a = tape.mul(w_log_p, log_p)?;
    let b = tape.mul(w_log_1mp, log_1mp)?;
    let scaled = tape.scale(log_p, params.gamma)?;
    let p_gamma = tape.exp(scaled)?;
    let c = tape.mul(p_gamma, log_1mp)?;
    let c = tape.mul(neg_w, c)?;
    let ab = tape.add(a, b)?;
    let all = tape.add(ab, c)?;
    let s = tape.sum(all)?;
    Ok(tape.scale(s, 1.0 / positives.max(1) as f64)?)
}

/// Distribution focal loss, averaged over sides.
///
/// `side_logits` has `R + 1` bins on its last axis (any leading shape);
/// `targets` holds one continuous target per side, clipped to `[0, R]`.
pub fn distribution_focal_loss(tape: &mut Tape, side_logits: Var, targets: &[f64]) -> Result<Var> {
    let shape = tape.shape(side_logits)?.to_vec();
    let bins = *shape.last().unwrap_or(&0);
    if bins < 2 {
        return Err(Error::Invalid(format!("need at least 2 bins, got {bins}")));
    }
    let n: usize = shape.iter().product::<usize>() / bins;
    if n != targets.len() {
        return Err(Error::Shape(format!("{} targets for {n} sides", targets.len())));
    }
    if n == 0 {
        return zero(tape);
    }
    let r = (bins - 1) as f64;
    let mut weights = vec![0.0; n * bins];
    for (k, &y) in targets.iter().enumerate() {
        let y = y.clamp(0.0, r);
        let i = (y.floor() as usize).min(bins - 2);
        weights[k * bins + i] = (i + 1) as f64 - y;
        weights[k * bins + i + 1] = y - i as f64;
    }
    let flat = tape.reshape(side_logits, vec![n, bins])?;
    let log_s = tape.log_softmax(flat, 1)?;
    let w = tape.constant(Tensor::new(vec![n, bins], weights)?)?;
    let prod = tape.mul(log_s, w)?;
    let s = tape.sum(prod)?;
    Ok(tape.scale(s, -1.0 / n as f64)?)
}

/// Expected bin index under the softmax of each row: `[n, R+1] -> [n, 1]`.
pub fn decode_distribution(tape: &mut Tape, side_logits: Var) -> Result<Var> {
    let bins = *tape.shape(side_logits)?.last().unwrap_or(&0);
    let probs = tape.softmax(side_logits, 1)?;
    let idx = tape.constant(Tensor::new(vec![bins, 1], (0..bins).map(|i| i as f64).collect())?)?;
    Ok(tape.matmul(probs, idx)?)
}

/// Mean L1 (center-size) and mean `1 - GIoU` over matched pairs.
/// `pred` is `n x 4` center-size; `target` holds the matched boxes.
pub fn box_regression_loss(tape: &mut Tape, pred: Var, target: &BoxSet) -> Result<(Var, Var)> {
    let n = target.len();
    if n == 0 {
        return Ok((zero(tape)?, zero(tape)?));
    }
    if tape.shape(pred)? != [n, 4] {
        return Err(Error::Shape(format!(
            "pred {:?} vs {n} targets",
            tape.shape(pred)?
        )));
    }
    let t_cs = tape.constant(target.convert(BoxFormat::CenterSize).to_tensor())?;
    let d = tape.sub(pred, t_cs)?;
    let d = tape.abs(d)?;
    let s = tape.sum(d)?;
    let l1 = tape.scale(s, 1.0 / n as f64)?;

    let p_xy = diff::center_to_corner(tape, pred)?;
    let t_xy = tape.constant(target.convert(BoxFormat::Corner).to_tensor())?;
    let g = diff::giou_rows(tape, p_xy, t_xy)?;
    let one_minus = tape.one_minus(g)?;
    let giou = tape.mean(one_minus)?;
    Ok((l1, giou))
}

/// Arithmetic mean of per-group scalar losses.
pub fn group_mean(tape: &mut Tape, per_group: &[Var]) -> Result<Var> {
    if per_group.is_empty() {
        return Err(Error::Invalid("group mean over zero groups".into()));
    }
    let flat = per_group
        .iter()
        .map(|&v| tape.reshape(v, vec![1]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let all = tape.concat(&flat, 0)?;
    Ok(tape.mean(all)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionLossWeights {
    pub vfl: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for DetectionLossWeights {
    fn default() -> Self {
        Self {
            vfl: 1.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// Set-prediction loss for one group of decoder (or selection) outputs given
/// (prediction, ground truth) pairs: VFL with IoU targets plus weighted L1
/// and GIoU on the matched boxes.
#[allow(clippy::too_many_arguments)]
pub fn detection_loss(
    tape: &mut Tape,
    logits: Var,
    boxes: Var,
    pairs: &[(usize, usize)],
    gt: &BoxSet,
    gt_labels: &[usize],
    weights: &DetectionLossWeights,
    vfl: &VarifocalParams,
) -> Result<Var> {
    let shape = tape.shape(logits)?.to_vec();
    let gt_xy = gt.convert(BoxFormat::Corner);
    let pred_xy = BoxSet::from_tensor(tape.value(boxes)?, BoxFormat::CenterSize)?.convert(BoxFormat::Corner);
    let mut target = Tensor::zeros(shape.clone());
    let classes = shape[1];
    for &(p, g) in pairs {
        target.data_mut()[p * classes + gt_labels[g]] = iou(&pred_xy.get(p), &gt_xy.get(g));
    }
    let cls = varifocal_loss(tape, logits, &target, pairs.len(), vfl)?;
    let pred_idx: Vec<usize> = pairs.iter().map(|&(p, _)| p).collect();
    let gt_idx: Vec<usize> = pairs.iter().map(|&(_, g)| g).collect();
    let matched = tape.gather_rows(boxes, &pred_idx)?;
    let (l1, giou) = box_regression_loss(tape, matched, &gt.select(&gt_idx))?;
    let cls = tape.scale(cls, weights.vfl)?;
    let l1 = tape.scale(l1, weights.l1)?;
    let giou = tape.scale(giou, weights.giou)?;
    let s = tape.add(cls, l1)?;
    Ok(tape.add(s, giou)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid(format!("loss weights must be >= 0, got {all:?}")));
        }
        Ok(())
    }
}

/// Named scalar losses of one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_aux: f64,
    pub l_o2o_per_group: Vec<f64>,
    pub l_o2o: f64,
    pub l_o2m: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_aux, self.l_o2o, self.l_o2m, self.total]
            .iter()
            .chain(&self.l_o2o_per_group)
            .all(|v| v.is_finite())
    }

    /// Largest deviation from the group-mean and weighted-sum identities.
    pub fn invariant_error(&self) -> f64 {
        let n = self.l_o2o_per_group.len().max(1) as f64;
        let mean = self.l_o2o_per_group.iter().sum::<f64>() / n;
        let w = &self.weights;
        let total = w.alpha * self.l_aux + w.beta * self.l_o2o + w.gamma * self.l_o2m;
        (self.l_o2o - mean).abs().max((self.total - total).abs())
    }

    pub fn csv_header(n_groups: usize) -> String {
        let mut cols = vec!["step".to_string(), "l_aux".into()];
        cols.extend((0..n_groups).map(|g| format!("l_o2o_g{g}")));
        cols.extend(["l_o2o".into(), "l_o2m".into(), "total".into()]);
        cols.join(",")
    }

    /// One CSV row; floats use the shortest round-trip representation.
    pub fn csv_row(&self, step: usize) -> String {
        let mut cols = vec![step.to_string(), self.l_aux.to_string()];
        cols.extend(self.l_o2o_per_group.iter().map(|v| v.to_string()));
        cols.extend([self.l_o2o.to_string(), self.l_o2m.to_string(), self.total.to_string()]);
        cols.join(",")
    }

    /// Mean of several reports (same group count and weights).
    pub fn average(reports: &[LossReport]) -> Option<LossReport> {
        let first = reports.first()?;
        let n = reports.len() as f64;
        let avg = |f: &dyn Fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let groups = first.l_o2o_per_group.len();
        let per_group: Vec<f64> = (0..groups)
            .map(|g| avg(&|r: &LossReport| r.l_o2o_per_group[g]))
            .collect();
        let w = first.weights;
        let l_aux = avg(&|r| r.l_aux);
        let l_o2m = avg(&|r| r.l_o2m);
        let l_o2o = per_group.iter().sum::<f64>() / groups.max(1) as f64;
        Some(LossReport {
            l_aux,
            l_o2o_per_group: per_group,
            l_o2o,
            l_o2m,
            total: w.alpha * l_aux + w.beta * l_o2o + w.gamma * l_o2m,
            weights: w,
        })
    }
}

/// Tape handles of the composite objective's parts.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub total: Var,
    pub o2o: Var,
    pub report: LossReport,
}

/// `alpha * aux + beta * mean(o2o groups) + gamma * o2m`.
pub fn total_loss(
    tape: &mut Tape,
    aux: Var,
    o2o_groups: &[Var],
    o2m: Var,
    weights: LossWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    let o2o = group_mean(tape, o2o_groups)?;
    let a = tape.scale(aux, weights.alpha)?;
    let b = tape.scale(o2o, weights.beta)?;
    let c = tape.scale(o2m, weights.gamma)?;
    let ab = tape.add(a, b)?;
    let total = tape.add(ab, c)?;
    let item = |tape: &Tape, v: Var| -> Result<f64> { Ok(tape.value(v)?.item()) };
    let report = LossReport {
        l_aux: item(tape, aux)?,
        l_o2o_per_group: o2o_groups
            .iter()
            .map(|&v| item(tape, v))
            .collect::<Result<_>>()?,
        l_o2o: item(tape, o2o)?,
        l_o2m: item(tape, o2m)?,
        total: item(tape, total)?,
        weights,
    };
    Ok(TotalLoss { total, o2o, report })
}
