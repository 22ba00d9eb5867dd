use super::{AssignmentResult, Strategy};
use crate::geometry::{iou, BoxFormat, BoxSet};

/// Dense-head anchor: a point on a pyramid level plus the square anchor box
/// used for IoU during ATSS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPoint {
    pub center: [f64; 2],
    pub half_extent: [f64; 2],
    pub level: usize,
}

impl AnchorPoint {
    pub fn corner_box(&self) -> [f64; 4] {
        [
            self.center[0] - self.half_extent[0],
            self.center[1] - self.half_extent[1],
            self.center[0] + self.half_extent[0],
            self.center[1] + self.half_extent[1],
        ]
    }
}

/// Minimum margin for an anchor center to count as inside a box.
pub(crate) const INSIDE_EPS: f64 = 1e-9;

pub(crate) fn center_inside(c: [f64; 2], b: &[f64; 4]) -> bool {
    let m = (c[0] - b[0]).min(c[1] - b[1]).min(b[2] - c[0]).min(b[3] - c[1]);
    m > INSIDE_EPS
}

/// Adaptive training sample selection.
///
/// Per ground truth: the `top_k` anchors nearest its center on every level
/// become candidates; the IoU threshold is the candidates' mean plus
/// (population) standard deviation; candidates at or above it whose centers
/// lie inside the box are positive. An anchor claimed by several ground
/// truths keeps the one it overlaps most.
pub fn atss_assign(anchors: &[AnchorPoint], gt: &BoxSet, top_k: usize) -> AssignmentResult {
    let mut result = AssignmentResult::background(anchors.len(), Strategy::Atss);
    if anchors.is_empty() || gt.is_empty() || top_k == 0 {
        return result;
    }
    let gt = gt.convert(BoxFormat::Corner);
    let n_levels = anchors.iter().map(|a| a.level).max().unwrap_or(0) + 1;

    for (g, gbox) in gt.coords().iter().enumerate() {
        let gc = [0.5 * (gbox[0] + gbox[2]), 0.5 * (gbox[1] + gbox[3])];
        let mut candidates = Vec::new();
        for level in 0..n_levels {
            let mut on_level: Vec<(f64, usize)> = anchors
                .iter()
                .enumerate()
                .filter(|(_, a)| a.level == level)
                .map(|(i, a)| {
                    let dx = a.center[0] - gc[0];
                    let dy = a.center[1] - gc[1];
                    (dx * dx + dy * dy, i)
                })
                .collect();
            on_level.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            candidates.extend(on_level.into_iter().take(top_k).map(|(_, i)| i));
        }
        if candidates.is_empty() {
            continue;
        }
        let ious: Vec<f64> = candidates
            .iter()
            .map(|&i| iou(&anchors[i].corner_box(), gbox))
            .collect();
        let n = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / n;
        let std = (ious.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let threshold = mean + std;
        for (&i, &v) in candidates.iter().zip(&ious) {
            if v < threshold - 1e-12 || !center_inside(anchors[i].center, gbox) {
                continue;
            }
            let better = match result.assignment[i] {
                None => true,
                Some(_) => v > result.quality[i],
            };
            if better {
                result.assignment[i] = Some(g);
                result.quality[i] = v;
            }
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, level: usize, half: f64) -> Vec<AnchorPoint> {
        let mut out = Vec::new();
        for y in 0..n {
            for x in 0..n {
                out.push(AnchorPoint {
                    center: [(x as f64 + 0.5) / n as f64, (y as f64 + 0.5) / n as f64],
                    half_extent: [half, half],
                    level,
                });
            }
        }
        out
    }

    #[test]
    fn identical_anchors_all_positive() {
        let anchors = vec![
            AnchorPoint {
                center: [0.5, 0.5],
                half_extent: [0.2, 0.2],
                level: 0
            };
            5
        ];
        let gt = BoxSet::corner(vec![[0.0, 0.0, 1.0, 1.0]]).unwrap();
        let r = atss_assign(&anchors, &gt, 5);
        assert_eq!(r.positives(), 5);
    }

    #[test]
    fn whole_image_gt_thresholds_at_mean_plus_std() {
        let anchors = grid(4, 0, 0.125);
        let gt = BoxSet::corner(vec![[0.0, 0.0, 1.0, 1.0]]).unwrap();
        let r = atss_assign(&anchors, &gt, anchors.len());
        // Every anchor has the same IoU with the image box.
        assert_eq!(r.positives(), 16);
    }

    #[test]
    fn gt_away_from_all_centers_gets_nothing() {
        let anchors = grid(4, 0, 0.125);
        let gt = BoxSet::corner(vec![[0.0, 0.0, 0.1, 0.1]]).unwrap();
        let r = atss_assign(&anchors, &gt, 9);
        assert_eq!(r.positives(), 0);
    }

    #[test]
    fn no_anchors_is_background() {
        let gt = BoxSet::corner(vec![[0.0, 0.0, 0.5, 0.5]]).unwrap();
        assert!(atss_assign(&[], &gt, 9).assignment.is_empty());
    }

    #[test]
    fn conflicting_claim_goes_to_higher_iou() {
        let mut anchors = grid(4, 0, 0.125);
        anchors.extend(grid(2, 1, 0.25));
        let gt = BoxSet::corner(vec![[0.2, 0.2, 0.6, 0.6], [0.25, 0.25, 0.75, 0.75]]).unwrap();
        let r = atss_assign(&anchors, &gt, 2);
        let solo: Vec<AssignmentResult> = (0..2)
            .map(|g| atss_assign(&anchors, &gt.select(&[g]), 2))
            .collect();
        for (i, got) in r.assignment.iter().enumerate() {
            let claimants: Vec<usize> = (0..2).filter(|&g| solo[g].assignment[i].is_some()).collect();
            let best = claimants.iter().copied().fold(None, |acc: Option<usize>, g| match acc {
                Some(b) if solo[b].quality[i] >= solo[g].quality[i] => Some(b),
                _ => Some(g),
            });
            assert_eq!(*got, best, "anchor {i}");
        }
        assert!(r.positives() > 0);
    }
}
