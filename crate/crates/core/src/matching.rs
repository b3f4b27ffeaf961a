//! Optimal one-to-one assignment of queries to ground truths.

use crate::geometry::{box2d_corners, giou2d, GroundTruthObject};
use crate::model::Prediction;

/// Matched `(query, ground_truth)` pairs sorted by query index.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self { pairs: Vec::new(), total_cost: 0.0 }
    }

    /// Ground truth matched to `query`, if any.
    pub fn gt_for(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }
}

/// Row-major `rows x cols` cost matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self::new(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn transposed(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.at(r, c);
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }
}

/// Minimum-cost assignment covering the smaller side of `cost`.
///
/// Shortest-augmenting-path Hungarian method with row/column potentials,
/// `O(n^2 m)`. Candidate columns are scanned in increasing index order and
/// only replaced on a strictly smaller reduced cost, so among equally cheap
/// options the lowest index wins and the result is a pure function of the
/// matrix.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    if cost.rows == 0 || cost.cols == 0 {
        return Assignment::empty();
    }
    if cost.rows > cost.cols {
        let t = hungarian(&cost.transposed());
        let mut pairs: Vec<(usize, usize)> = t.pairs.into_iter().map(|(g, q)| (q, g)).collect();
        pairs.sort_unstable();
        return Assignment { pairs, total_cost: t.total_cost };
    }
    let (n, m) = (cost.rows, cost.cols);
    // 1-based potentials; index 0 is the virtual source column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let reduced = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost.at(r, c)).sum();
    Assignment { pairs, total_cost }
}

/// Weights of the three matching-cost terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatcherWeights {
    pub class: f64,
    pub center: f64,
    pub giou: f64,
}

impl Default for MatcherWeights {
    fn default() -> Self {
        Self { class: 2.0, center: 5.0, giou: 2.0 }
    }
}

/// `w_cls (1 - p_class) + w_center |center error|_1 + w_giou (1 - GIoU)`
/// for every query/ground-truth pair.
pub fn matching_cost(predictions: &[Prediction], gts: &[GroundTruthObject], w: &MatcherWeights) -> CostMatrix {
    let mut data = Vec::with_capacity(predictions.len() * gts.len());
    for p in predictions {
        let pc = box2d_corners(&p.anchor());
        for gt in gts {
            let prob = p.class_probs[gt.category];
            let center = (p.center[0] - gt.xc).abs() + (p.center[1] - gt.yc).abs();
            let giou = giou2d(&pc, &box2d_corners(&gt.anchor()));
            data.push(w.class * (1.0 - prob) + w.center * center + w.giou * (1.0 - giou));
        }
    }
    CostMatrix::new(predictions.len(), gts.len(), data)
}

/// Independent one-to-one matching per query group. With `G` groups each
/// ground truth receives up to `G` positive queries.
pub fn groupwise_match(per_group: &[Vec<Prediction>], gts: &[GroundTruthObject], w: &MatcherWeights) -> Vec<Assignment> {
    per_group.iter().map(|preds| hungarian(&matching_cost(preds, gts, w))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_examples() {
        let a = hungarian(&CostMatrix::from_rows(&[vec![0.0, 9.0], vec![9.0, 0.0]]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
        let a = hungarian(&CostMatrix::from_rows(&[vec![5.0]]));
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(hungarian(&CostMatrix::new(0, 0, vec![])), Assignment::empty());
        assert_eq!(hungarian(&CostMatrix::new(3, 0, vec![])), Assignment::empty());
    }

    #[test]
    fn rectangular_both_ways() {
        let wide = CostMatrix::from_rows(&[vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0]]);
        let a = hungarian(&wide);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 3.0);
        let tall = wide.transposed();
        let b = hungarian(&tall);
        assert_eq!(b.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(b.total_cost, 3.0);
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let a = hungarian(&CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        let a = hungarian(&CostMatrix::from_rows(&[vec![2.0], vec![2.0], vec![2.0]]));
        assert_eq!(a.pairs, vec![(0, 0)]);
    }

    #[test]
    fn negative_costs() {
        let a = hungarian(&CostMatrix::from_rows(&[vec![-1.0, -5.0], vec![-3.0, -2.0]]));
        assert_eq!(a.total_cost, -8.0);
    }
}
