//! Independent reference implementations shared by the integration tests.
//! They favour the most literal formulation over speed.

#![allow(dead_code)]

use densup::assign::{AnchorPoint, TaskAlignedParams};
use densup::geometry::{BoxFormat, BoxSet};
use densup_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// IoU written out from first principles.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union.max(1e-12)
}

/// Minimum total cost over every injective map from the smaller side into
/// the larger one.
pub fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    let p = cost.len();
    let g = cost.first().map_or(0, Vec::len);
    let (rows, cols, at): (usize, usize, Box<dyn Fn(usize, usize) -> f64>) = if g <= p {
        (g, p, Box::new(|r, c| cost[c][r]))
    } else {
        (p, g, Box::new(|r, c| cost[r][c]))
    };
    let mut best = f64::INFINITY;
    let mut perm: Vec<usize> = Vec::with_capacity(rows);
    fn go(rows: usize, cols: usize, at: &dyn Fn(usize, usize) -> f64, perm: &mut Vec<usize>, best: &mut f64) {
        if perm.len() == rows {
            let total: f64 = perm.iter().enumerate().map(|(r, &c)| at(r, c)).sum();
            *best = best.min(total);
            return;
        }
        for c in 0..cols {
            if !perm.contains(&c) {
                perm.push(c);
                go(rows, cols, at, perm, best);
                perm.pop();
            }
        }
    }
    go(rows, cols, &*at, &mut perm, &mut best);
    if rows == 0 {
        0.0
    } else {
        best
    }
}

fn strictly_inside(c: [f64; 2], b: [f64; 4]) -> bool {
    c[0] - b[0] > 1e-9 && c[1] - b[1] > 1e-9 && b[2] - c[0] > 1e-9 && b[3] - c[1] > 1e-9
}

/// ATSS positives: for each anchor, the gts whose candidate set contains it
/// (rank by squared center distance on its own level, index breaking ties),
/// whose IoU reaches mean + population std of the candidate IoUs, and whose
/// box contains the anchor center. The anchor keeps the highest-IoU such gt,
/// the lower gt index on ties.
pub fn atss_oracle(anchors: &[AnchorPoint], gt: &[[f64; 4]], top_k: usize) -> Vec<Option<usize>> {
    let dist = |a: &AnchorPoint, g: &[f64; 4]| {
        let cx = (g[0] + g[2]) / 2.0;
        let cy = (g[1] + g[3]) / 2.0;
        (a.center[0] - cx).powi(2) + (a.center[1] - cy).powi(2)
    };
    let is_candidate = |i: usize, g: &[f64; 4]| {
        let a = &anchors[i];
        let d = dist(a, g);
        let closer = anchors
            .iter()
            .enumerate()
            .filter(|(j, b)| b.level == a.level && (dist(b, g) < d || (dist(b, g) == d && *j < i)))
            .count();
        closer < top_k
    };
    let thresholds: Vec<f64> = gt
        .iter()
        .map(|g| {
            let ious: Vec<f64> = (0..anchors.len())
                .filter(|&i| is_candidate(i, g))
                .map(|i| iou(anchors[i].corner_box(), *g))
                .collect();
            if ious.is_empty() {
                return f64::INFINITY;
            }
            let n = ious.len() as f64;
            let mean = ious.iter().sum::<f64>() / n;
            let var = ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            mean + var.sqrt()
        })
        .collect();
    (0..anchors.len())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (g, b) in gt.iter().enumerate() {
                let v = iou(anchors[i].corner_box(), *b);
                let ok = is_candidate(i, b) && v >= thresholds[g] - 1e-12 && strictly_inside(anchors[i].center, *b);
                if ok && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            best.map(|(g, _)| g)
        })
        .collect()
}

/// Task-aligned positives: prediction `i` is among gt `g`'s top-q when fewer
/// than q eligible predictions rank ahead of it (metric descending, index
/// ascending); it keeps the gt with the largest metric, the lower gt index on
/// ties.
pub fn tal_oracle(
    scores: &Tensor,
    pred: &[[f64; 4]],
    gt: &[[f64; 4]],
    labels: &[usize],
    params: &TaskAlignedParams,
    centers: Option<&[[f64; 2]]>,
) -> Vec<Option<usize>> {
    let metric = |i: usize, g: usize| -> Option<f64> {
        if let Some(c) = centers {
            if !strictly_inside(c[i], gt[g]) {
                return None;
            }
        }
        let t = scores.at(i, labels[g]).powf(params.alpha) * iou(pred[i], gt[g]).powf(params.beta);
        (t > 0.0).then_some(t)
    };
    let in_top = |i: usize, g: usize| -> Option<f64> {
        let t = metric(i, g)?;
        let ahead = (0..pred.len())
            .filter(|&j| metric(j, g).is_some_and(|u| u > t || (u == t && j < i)))
            .count();
        (ahead < params.top_q).then_some(t)
    };
    (0..pred.len())
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for g in 0..gt.len() {
                if let Some(t) = in_top(i, g) {
                    if best.is_none_or(|(_, bt)| t > bt) {
                        best = Some((g, t));
                    }
                }
            }
            best.map(|(g, _)| g)
        })
        .collect()
}

/// A random corner box inside the unit square, coordinates on a grid of
/// `1 / steps` so that ties occur.
pub fn grid_box(rng: &mut ChaCha8Rng, steps: u32) -> [f64; 4] {
    loop {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0..=steps) as f64 / steps as f64);
        let b = [v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]), v[1].max(v[3])];
        if b[2] > b[0] && b[3] > b[1] {
            return b;
        }
    }
}

pub fn corner_set(boxes: &[[f64; 4]]) -> BoxSet {
    BoxSet::new(boxes.to_vec(), BoxFormat::Corner).unwrap()
}

/// Square anchors on `levels` regular grids of side 2, 4, 8, ... cells.
pub fn anchor_grid(levels: usize, scale: f64) -> Vec<AnchorPoint> {
    let mut out = Vec::new();
    for level in 0..levels {
        let n = 8 >> level;
        let half = scale * 0.5 / n as f64;
        for y in 0..n {
            for x in 0..n {
                out.push(AnchorPoint {
                    center: [(x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64],
                    half_extent: [half, half],
                    level,
                });
            }
        }
    }
    out
}
