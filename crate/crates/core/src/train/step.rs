//! Loss of one training step: every enabled branch for every image of a
//! batch, combined by the weighted objective.

use densup_tensor::{sigmoid, Tape, Tensor, TensorError, Var};

use super::config::RunConfig;
use crate::assign::{
    atss_assign, hungarian_match, replicate_o2m_match, task_aligned_assign, AssignmentResult, CostMatrix,
};
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{diff, iou, BoxFormat, BoxSet};
use crate::losses::{detection_loss, distribution_focal_loss, total_loss, varifocal_loss, TotalLoss};
use crate::model::{Detector, ForwardOptions, ForwardOutput, AUX_SCOPE};

/// Tape scope of every loss computation.
pub const LOSS_SCOPE: &str = "loss";

/// Per-image branch losses.
#[derive(Debug, Clone)]
pub struct ImageLosses {
    pub aux: Var,
    pub o2o_groups: Vec<Var>,
    pub o2m: Var,
}

/// Forward options a config implies at a given step.
pub fn forward_options(cfg: &RunConfig, step: u64) -> ForwardOptions {
    ForwardOptions {
        n_groups: cfg.active_groups(),
        keep_probability: cfg.active_keep_probability(),
        mask_mode: cfg.mask_mode,
        o2m: cfg.branches.o2m,
        aux: cfg.branches.aux_cnn,
        mask_seed: cfg.seed,
        step,
    }
}

fn zero(tape: &mut Tape) -> Result<Var> {
    Ok(tape.constant(Tensor::scalar(0.0))?)
}

fn probs_and_boxes(tape: &Tape, logits: Var, boxes: Var) -> Result<(Tensor, BoxSet)> {
    let probs = tape.value(logits)?.map(sigmoid);
    let b = BoxSet::from_tensor(tape.value(boxes)?, BoxFormat::CenterSize)?;
    Ok((probs, b))
}

/// Matched set loss on the given rows of one prediction set.
fn set_loss(
    tape: &mut Tape,
    cfg: &RunConfig,
    logits: Var,
    boxes: Var,
    scene: &Scene,
    replication: Option<usize>,
) -> Result<Var> {
    let (probs, pred) = probs_and_boxes(tape, logits, boxes)?;
    let cost = CostMatrix::detection(&probs, &pred, &scene.boxes, &scene.labels, &cfg.assignment.match_costs)?;
    let result = match replication {
        None => hungarian_match(&cost)?,
        Some(m) => replicate_o2m_match(&cost, m)?,
    };
    detection_loss(
        tape,
        logits,
        boxes,
        &result.pairs(),
        &scene.boxes,
        &scene.labels,
        &cfg.detection_loss,
        &cfg.varifocal,
    )
}

fn layer_rows(tape: &mut Tape, out: &ForwardOutput, layer: usize, group: usize) -> Result<(Var, Var)> {
    let (start, q) = out.group_rows(group);
    let l = out.layers[layer];
    Ok((tape.narrow(l.logits, 0, start, q)?, tape.narrow(l.boxes, 0, start, q)?))
}

/// Sum over decoder layers of the matched loss of one group.
fn group_loss(tape: &mut Tape, cfg: &RunConfig, out: &ForwardOutput, scene: &Scene, group: usize, replication: Option<usize>) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for layer in 0..out.layers.len() {
        let (logits, boxes) = layer_rows(tape, out, layer, group)?;
        let l = set_loss(tape, cfg, logits, boxes, scene, replication)?;
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(acc.expect("at least one decoder layer"))
}

/// Loss of the token-level proposals that seeded the queries.
fn selection_loss(tape: &mut Tape, cfg: &RunConfig, out: &ForwardOutput, scene: &Scene) -> Result<Var> {
    let logits = tape.gather_rows(out.tokens.logits, &out.selected)?;
    let boxes = tape.gather_rows(out.tokens.boxes, &out.selected)?;
    set_loss(tape, cfg, logits, boxes, scene, None)
}

/// Dense-head assignment for the current epoch.
pub fn aux_assignment(cfg: &RunConfig, tape: &Tape, out: &ForwardOutput, scene: &Scene, epoch: usize) -> Result<AssignmentResult> {
    let aux = out.aux.as_ref().expect("aux head output");
    if epoch < cfg.atss_epochs() {
        let anchors = aux.anchors(cfg.model.anchor_scale);
        Ok(atss_assign(&anchors, &scene.boxes, cfg.assignment.atss_top_k))
    } else {
        let scores = tape.value(aux.logits)?.map(sigmoid);
        let pred = aux.decoded(tape)?;
        task_aligned_assign(
            &scores,
            &pred,
            &scene.boxes,
            &scene.labels,
            &cfg.assignment.task_aligned,
            Some(&aux.centers),
        )
    }
}

fn aux_loss(tape: &mut Tape, cfg: &RunConfig, out: &ForwardOutput, scene: &Scene, epoch: usize) -> Result<Var> {
    let aux = out.aux.as_ref().expect("aux head output");
    let result = aux_assignment(cfg, tape, out, scene, epoch)?;
    let pairs = result.pairs();
    let gt = scene.boxes.convert(BoxFormat::Corner);
    let decoded = aux.decoded(tape)?;

    let c = cfg.model.n_classes;
    let mut target = Tensor::zeros(vec![aux.n_tokens(), c]);
    for &(t, g) in &pairs {
        target.data_mut()[t * c + scene.labels[g]] = iou(&decoded.get(t), &gt.get(g));
    }
    let vfl = varifocal_loss(tape, aux.logits, &target, pairs.len(), &cfg.varifocal)?;
    let vfl = tape.scale(vfl, cfg.aux_loss.vfl)?;
    if pairs.is_empty() {
        return Ok(vfl);
    }
    let tokens: Vec<usize> = pairs.iter().map(|&(t, _)| t).collect();
    let gt_idx: Vec<usize> = pairs.iter().map(|&(_, g)| g).collect();

    let pred = aux.decode_tokens(tape, &tokens)?;
    let target_boxes = tape.constant(gt.select(&gt_idx).to_tensor())?;
    let g = diff::giou_rows(tape, pred, target_boxes)?;
    let g = tape.one_minus(g)?;
    let giou = tape.mean(g)?;
    let giou = tape.scale(giou, cfg.aux_loss.giou)?;

    let r = cfg.model.dfl_bins as f64;
    let rows: Vec<usize> = tokens.iter().flat_map(|&t| (0..4).map(move |s| t * 4 + s)).collect();
    let sides: Vec<f64> = pairs
        .iter()
        .flat_map(|&(t, g)| aux.side_targets(t, &gt.get(g)))
        .map(|y| y.clamp(0.0, r - 0.01))
        .collect();
    let logits = tape.gather_rows(aux.sides, &rows)?;
    let dfl = distribution_focal_loss(tape, logits, &sides)?;
    let dfl = tape.scale(dfl, cfg.aux_loss.dfl)?;

    let s = tape.add(vfl, giou)?;
    Ok(tape.add(s, dfl)?)
}

/// Branch losses for one image given its forward output.
pub fn image_losses(tape: &mut Tape, cfg: &RunConfig, out: &ForwardOutput, scene: &Scene, epoch: usize) -> Result<ImageLosses> {
    let prev = tape.set_scope(LOSS_SCOPE);
    let result = (|| {
        let enc = selection_loss(tape, cfg, out, scene)?;
        let mut o2o_groups = Vec::with_capacity(out.n_o2o_groups);
        for g in 0..out.n_o2o_groups {
            let l = group_loss(tape, cfg, out, scene, g, None)?;
            o2o_groups.push(tape.add(l, enc)?);
        }
        let o2m = match out.o2m_group() {
            Some(g) => group_loss(tape, cfg, out, scene, g, Some(cfg.replication))?,
            None => zero(tape)?,
        };
        let aux = if out.aux.is_some() {
            tape.set_scope(AUX_SCOPE);
            let l = aux_loss(tape, cfg, out, scene, epoch);
            tape.set_scope(LOSS_SCOPE);
            l?
        } else {
            zero(tape)?
        };
        Ok(ImageLosses { aux, o2o_groups, o2m })
    })();
    tape.set_scope(prev);
    result
}

fn batch_mean(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let all = tape.concat(vars, 0)?;
    Ok(tape.mean(all)?)
}

/// Builds the whole objective of one batch on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    model: &Detector,
    params: &[Var],
    cfg: &RunConfig,
    batch: &[&Scene],
    step: u64,
    epoch: usize,
) -> Result<TotalLoss> {
    let opts = forward_options(cfg, step);
    let mut per_image = Vec::with_capacity(batch.len());
    for scene in batch {
        let out = model.forward(tape, params, &scene.image, &opts)?;
        per_image.push(image_losses(tape, cfg, &out, scene, epoch)?);
    }
    let prev = tape.set_scope(LOSS_SCOPE);
    let result = (|| {
        let aux: Vec<Var> = per_image.iter().map(|l| l.aux).collect();
        let aux = batch_mean(tape, &aux)?;
        let o2m: Vec<Var> = per_image.iter().map(|l| l.o2m).collect();
        let o2m = batch_mean(tape, &o2m)?;
        let groups = (0..opts.n_groups)
            .map(|g| {
                let v: Vec<Var> = per_image.iter().map(|l| l.o2o_groups[g]).collect();
                batch_mean(tape, &v)
            })
            .collect::<Result<Vec<_>>>()?;
        total_loss(tape, aux, &groups, o2m, cfg.loss_weights)
    })();
    tape.set_scope(prev);
    result
}

/// Maps a non-finite forward value to the training abort error.
pub fn non_finite(step: usize, err: Error) -> Error {
    match err {
        Error::Tensor(TensorError::NonFinite { op }) => Error::NonFiniteLoss {
            step,
            report: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}
