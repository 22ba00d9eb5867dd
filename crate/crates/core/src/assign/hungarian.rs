use densup_tensor::Tensor;

use super::{AssignmentResult, CostMatrix, Strategy};
use crate::error::{Error, Result};

/// Minimum-cost assignment of every row to a distinct column for an
/// `n x m` cost with `n <= m` (shortest augmenting paths with potentials).
/// Returns the column chosen for each row.
pub fn linear_sum_assignment(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    assert!(n <= m, "rows ({n}) must not exceed columns ({m})");
    if n == 0 {
        return Vec::new();
    }
    // 1-based; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

fn match_columns(values: &Tensor, cols: usize, col_gt: impl Fn(usize) -> usize) -> Vec<Option<usize>> {
    let p = values.shape()[0];
    let mut assignment = vec![None; p];
    if cols == 0 || p == 0 {
        return assignment;
    }
    let g = values.shape()[1];
    let cost = |pred: usize, col: usize| values.data()[pred * g + col_gt(col)];
    if cols <= p {
        let chosen = linear_sum_assignment(cols, p, |col, pred| cost(pred, col));
        for (col, pred) in chosen.into_iter().enumerate() {
            assignment[pred] = Some(col_gt(col));
        }
    } else {
        let chosen = linear_sum_assignment(p, cols, cost);
        for (pred, col) in chosen.into_iter().enumerate() {
            assignment[pred] = Some(col_gt(col));
        }
    }
    assignment
}

fn finish(cost: &CostMatrix, assignment: Vec<Option<usize>>, strategy: Strategy, unmatched: usize) -> AssignmentResult {
    let quality = assignment
        .iter()
        .enumerate()
        .map(|(p, g)| g.map_or(0.0, |g| cost.quality(p, g)))
        .collect();
    AssignmentResult {
        assignment,
        quality,
        strategy,
        unmatched_replicas: unmatched,
    }
}

/// One-to-one matching minimizing total cost. With more ground truths than
/// predictions, every prediction is matched and the surplus gts stay unmatched.
pub fn hungarian_match(cost: &CostMatrix) -> Result<AssignmentResult> {
    if !cost.values.is_finite() {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }
    let assignment = match_columns(&cost.values, cost.n_gt(), |c| c);
    Ok(finish(cost, assignment, Strategy::Hungarian, 0))
}

/// Hungarian matching against the ground-truth set tiled `m` times. When
/// there are fewer predictions than replicas, whole replica rounds are kept
/// in order and the remainder is reported in `unmatched_replicas`.
pub fn replicate_o2m_match(cost: &CostMatrix, m: usize) -> Result<AssignmentResult> {
    if m == 0 {
        return Err(Error::Invalid("replication factor must be >= 1".into()));
    }
    if !cost.values.is_finite() {
        return Err(Error::Invalid("cost matrix has non-finite entries".into()));
    }
    let (p, g) = (cost.n_pred(), cost.n_gt());
    let wanted = m * g;
    let cols = wanted.min(p);
    if cols < wanted {
        log::warn!("replicated matching: {p} predictions for {wanted} replicas, {} unmatched", wanted - cols);
    }
    let assignment = match_columns(&cost.values, cols, |c| c % g.max(1));
    Ok(finish(cost, assignment, Strategy::ReplicatedO2m, wanted - cols))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_values(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    /// Exhaustive minimum over injective gt -> prediction maps.
    fn brute_force(c: &CostMatrix) -> f64 {
        fn go(c: &CostMatrix, gt: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if gt == c.n_gt() {
                *best = best.min(acc);
                return;
            }
            for p in 0..c.n_pred() {
                if !used[p] {
                    used[p] = true;
                    go(c, gt + 1, used, acc + c.at(p, gt), best);
                    used[p] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        go(c, 0, &mut vec![false; c.n_pred()], 0.0, &mut best);
        best
    }

    #[test]
    fn identity_cost() {
        let c = cost(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        let r = hungarian_match(&c).unwrap();
        assert_eq!(r.assignment, vec![Some(0), Some(1), Some(2)]);
        assert_eq!(c.total(&r), 0.0);
    }

    #[test]
    fn two_by_two() {
        let c = cost(&[&[1.0, 2.0], &[2.0, 1.0]]);
        let r = hungarian_match(&c).unwrap();
        assert_eq!(r.assignment, vec![Some(0), Some(1)]);
        assert_eq!(c.total(&r), 2.0);
    }

    #[test]
    fn empty_ground_truth_is_all_background() {
        let c = CostMatrix::from_values(Tensor::zeros(vec![4, 0])).unwrap();
        let r = hungarian_match(&c).unwrap();
        assert_eq!(r.assignment, vec![None; 4]);
    }

    #[test]
    fn more_gts_than_predictions() {
        let c = cost(&[&[5.0, 1.0, 3.0]]);
        let r = hungarian_match(&c).unwrap();
        assert_eq!(r.assignment, vec![Some(1)]);
    }

    #[test]
    fn random_six_by_four_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..4).map(|_| rng.gen_range(0..512) as f64 / 64.0).collect())
                .collect();
            let c = CostMatrix::from_values(Tensor::from_rows(&rows).unwrap()).unwrap();
            let r = hungarian_match(&c).unwrap();
            assert_eq!(c.total(&r), brute_force(&c));
            assert!(r.counts_per_gt(4).iter().all(|&n| n == 1));
        }
    }

    #[test]
    fn replication_of_one_equals_hungarian() {
        let c = cost(&[&[0.3, 0.9], &[0.8, 0.1], &[0.5, 0.6]]);
        let a = hungarian_match(&c).unwrap();
        let b = replicate_o2m_match(&c, 1).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    #[test]
    fn replication_picks_cheapest_four() {
        let c = cost(&[&[0.6], &[0.1], &[0.9], &[0.3], &[0.2], &[0.5]]);
        let r = replicate_o2m_match(&c, 4).unwrap();
        assert_eq!(
            r.assignment,
            vec![None, Some(0), None, Some(0), Some(0), Some(0)]
        );
        assert_eq!(r.unmatched_replicas, 0);
    }

    #[test]
    fn replication_shortfall_is_reported() {
        let c = cost(&[&[0.1, 0.2], &[0.3, 0.1], &[0.2, 0.2]]);
        let r = replicate_o2m_match(&c, 4).unwrap();
        assert_eq!(r.positives(), 3);
        assert_eq!(r.unmatched_replicas, 5);
        assert!(r.counts_per_gt(2).iter().all(|&n| n >= 1));
        assert!(replicate_o2m_match(&c, 0).is_err());
    }
}
