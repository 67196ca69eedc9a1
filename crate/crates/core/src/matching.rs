//! Minimum-cost bipartite matching between padded ground-truth slots and
//! predicted plane instances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PlaneParam;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cost matrix has non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("{planes} ground-truth planes exceed {queries} queries; use a larger query count")]
    TooManyPlanes { planes: usize, queries: usize },
}

/// One padded ground-truth slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GtSlot {
    Plane { param: PlaneParam, center: [f64; 2] },
    NonPlane,
}

impl GtSlot {
    pub fn is_plane(&self) -> bool {
        matches!(self, GtSlot::Plane { .. })
    }
}

/// Pads `M` ground-truth planes to `k` slots; slots `M..k` are non-plane.
pub fn pad_ground_truth(planes: &[PlaneParam], centers: &[[f64; 2]], k: usize) -> Result<Vec<GtSlot>, MatchError> {
    assert_eq!(planes.len(), centers.len(), "one center per plane");
    if planes.len() > k {
        return Err(MatchError::TooManyPlanes {
            planes: planes.len(),
            queries: k,
        });
    }
    let mut slots: Vec<GtSlot> = planes
        .iter()
        .zip(centers)
        .map(|(&param, &center)| GtSlot::Plane { param, center })
        .collect();
    slots.resize(k, GtSlot::NonPlane);
    Ok(slots)
}

/// Plain values of one predicted instance used by the matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedSlot {
    pub prob_plane: f64,
    pub param: [f64; 3],
    pub center: Option<[f64; 2]>,
}

/// Matching cost between a ground-truth slot and a prediction: the negative
/// probability of the slot's class, plus (for plane slots) the L1 distance
/// between plane parameters and `omega` times the Euclidean center
/// distance. Without predicted centers the center term is dropped.
pub fn matching_cost(gt: &GtSlot, pred: &PredictedSlot, omega: f64) -> f64 {
    match gt {
        GtSlot::NonPlane => -(1.0 - pred.prob_plane),
        GtSlot::Plane { param, center } => {
            let l1: f64 = (0..3).map(|i| (param.0[i] - pred.param[i]).abs()).sum();
            let c = pred
                .center
                .map_or(0.0, |pc| omega * (center[0] - pc[0]).hypot(center[1] - pc[1]));
            -pred.prob_plane + l1 + c
        }
    }
}

/// `[K, K]` cost matrix, rows are ground-truth slots, columns predictions.
pub fn cost_matrix(gt: &[GtSlot], preds: &[PredictedSlot], omega: f64) -> Tensor {
    let k = gt.len();
    assert_eq!(preds.len(), k, "one prediction per slot");
    let mut data = Vec::with_capacity(k * k);
    for g in gt {
        for p in preds {
            data.push(matching_cost(g, p, omega));
        }
    }
    Tensor::new([k, k], data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `sigma[i]` is the prediction matched to ground-truth slot `i`.
    pub sigma: Vec<usize>,
    pub cost_matrix: Tensor,
    pub total_cost: f64,
}

/// Exact minimum-cost perfect matching (shortest augmenting paths with
/// potentials, O(K³)). Among equal-cost choices the lowest column index
/// wins.
pub fn solve_matching(cost: &Tensor) -> Result<MatchResult, MatchError> {
    let (n, m) = (cost.rows(), cost.cols());
    if cost.shape().len() != 2 || n != m {
        return Err(MatchError::NotSquare { rows: n, cols: m });
    }
    if let Some(pos) = cost.data().iter().position(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite {
            row: pos / n,
            col: pos % n,
        });
    }
    let a = |i: usize, j: usize| cost.data()[(i - 1) * n + (j - 1)];
    // 1-based arrays; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            sigma[p[j] - 1] = j - 1;
        }
    }
    let total_cost = (0..n).map(|i| cost.data()[i * n + sigma[i]]).sum();
    Ok(MatchResult {
        sigma,
        cost_matrix: cost.clone(),
        total_cost,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum total cost over all permutations, by Heap's algorithm.
    fn brute_force(cost: &Tensor) -> f64 {
        let n = cost.rows();
        let mut perm: Vec<usize> = (0..n).collect();
        let total = |p: &[usize]| (0..n).map(|i| cost.at(i, p[i])).sum::<f64>();
        let mut best = total(&perm);
        let mut c = vec![0; n];
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    perm.swap(0, i);
                } else {
                    perm.swap(c[i], i);
                }
                best = best.min(total(&perm));
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        best
    }

    #[test]
    fn single_slot_is_identity() {
        let r = solve_matching(&Tensor::new([1, 1], vec![3.5])).unwrap();
        assert_eq!(r.sigma, vec![0]);
        assert_eq!(r.total_cost, 3.5);
    }

    #[test]
    fn diagonal_dominant_gives_identity() {
        let n = 7;
        let data = (0..n * n).map(|p| if p / n == p % n { -10.0 } else { (p % 5) as f64 }).collect();
        let r = solve_matching(&Tensor::new([n, n], data)).unwrap();
        assert_eq!(r.sigma, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let data = (0..36).map(|_| rng.random_range(-3.0..3.0)).collect();
            let cost = Tensor::new([6, 6], data);
            let r = solve_matching(&cost).unwrap();
            assert_eq!(r.total_cost, brute_force(&cost));
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let r = solve_matching(&Tensor::full([4, 4], 1.0)).unwrap();
        assert_eq!(r.sigma, vec![0, 1, 2, 3]);
        let again = solve_matching(&Tensor::full([4, 4], 1.0)).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn rejects_non_finite_and_non_square() {
        let mut t = Tensor::zeros([3, 3]);
        t.data_mut()[5] = f64::NAN;
        assert_eq!(solve_matching(&t).unwrap_err(), MatchError::NonFinite { row: 1, col: 2 });
        assert!(matches!(
            solve_matching(&Tensor::zeros([2, 3])),
            Err(MatchError::NotSquare { .. })
        ));
    }

    #[test]
    fn padding() {
        let p = PlaneParam([0.0, 0.0, 0.5]);
        let slots = pad_ground_truth(&[p; 3], &[[0.5, 0.5]; 3], 20).unwrap();
        assert_eq!(slots.iter().filter(|s| !s.is_plane()).count(), 17);
        assert!(pad_ground_truth(&[p; 4], &[[0.5, 0.5]; 4], 4).unwrap().iter().all(GtSlot::is_plane));
        assert!(pad_ground_truth(&[], &[], 5).unwrap().iter().all(|s| !s.is_plane()));
        assert_eq!(
            pad_ground_truth(&[p; 5], &[[0.5, 0.5]; 5], 4).unwrap_err(),
            MatchError::TooManyPlanes { planes: 5, queries: 4 }
        );
    }

    #[test]
    fn cost_examples() {
        let pred = |prob: f64, n: [f64; 3], c: [f64; 2]| PredictedSlot {
            prob_plane: prob,
            param: n,
            center: Some(c),
        };
        assert_eq!(matching_cost(&GtSlot::NonPlane, &pred(0.1, [1.0; 3], [0.0; 2]), 2.0), -0.9);
        let gt = GtSlot::Plane {
            param: PlaneParam([0.0, 0.0, 0.5]),
            center: [0.3, 0.6],
        };
        assert_eq!(matching_cost(&gt, &pred(1.0, [0.0, 0.0, 0.5], [0.3, 0.6]), 2.0), -1.0);
        assert_eq!(matching_cost(&gt, &pred(0.5, [0.0, 0.0, 1.0], [0.3, 0.6]), 2.0), 0.0);
        // center term: 3-4-5 triangle scaled by 0.1, weight 2
        let c = matching_cost(&gt, &pred(1.0, [0.0, 0.0, 0.5], [0.6, 1.0]), 2.0);
        assert!((c - (-1.0 + 1.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn permuting_predictions_permutes_sigma(seed in 0u64..1000, shift in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let data: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect();
            let cost = Tensor::new([n, n], data.clone());
            // column j of the permuted matrix is column (j + shift) % n
            let perm: Vec<usize> = (0..n).map(|j| (j + shift) % n).collect();
            let mut pd = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    pd[i * n + j] = data[i * n + perm[j]];
                }
            }
            let a = solve_matching(&cost).unwrap();
            let b = solve_matching(&Tensor::new([n, n], pd)).unwrap();
            prop_assert!((a.total_cost - b.total_cost).abs() < 1e-12);
            for i in 0..n {
                prop_assert_eq!(perm[b.sigma[i]], a.sigma[i]);
            }
        }
    }
}
