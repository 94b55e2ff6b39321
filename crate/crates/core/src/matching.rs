//! Per-stage bipartite matching between ground truths and query predictions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{giou, BoxXYXY, GroundTruth, ImageSize};
use crate::numerics::{Matrix, Vector};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("{gts} ground truths cannot be matched one-to-one with {queries} queries")]
    TooManyObjects { gts: usize, queries: usize },
    #[error("prediction for query {query} belongs to stage {found}, expected stage {expected}")]
    MixedStages {
        query: usize,
        expected: usize,
        found: usize,
    },
    #[error("ground truth {gt} has category {category} but predictions carry {classes} classes")]
    CategoryOutOfRange {
        gt: usize,
        category: usize,
        classes: usize,
    },
    #[error("cost matrix contains a non-finite entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
}

/// One query's output at one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_index: usize,
    /// 1-based decoder stage.
    pub stage: usize,
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    /// Per-class probabilities after the sigmoid.
    pub class_scores: Vector,
}

/// Weights of the three matching-cost terms plus the focal parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    /// `n_gt × n_query`.
    pub costs: Matrix,
    pub weights: CostWeights,
}

impl CostMatrix {
    pub fn from_matrix(costs: Matrix) -> Result<Self, MatchingError> {
        for r in 0..costs.rows() {
            for c in 0..costs.cols() {
                if !costs[(r, c)].is_finite() {
                    return Err(MatchingError::NonFiniteCost { row: r, col: c });
                }
            }
        }
        Ok(CostMatrix {
            costs,
            weights: CostWeights::default(),
        })
    }

    pub fn num_gts(&self) -> usize {
        self.costs.rows()
    }

    pub fn num_queries(&self) -> usize {
        self.costs.cols()
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Focal classification cost of assigning a class with probability `p`.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p);
    let pos = alpha * (1.0 - p).powf(gamma) * -p.ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln();
    pos - neg
}

/// L1 distance between corners normalized by the image extent.
pub fn normalized_l1(a: &BoxXYXY, b: &BoxXYXY, image: &ImageSize) -> f64 {
    let na = image.normalize(a);
    let nb = image.normalize(b);
    na.iter().zip(&nb).map(|(x, y)| (x - y).abs()).sum()
}

/// Cost matrix between the ground truths and the predictions of one stage.
/// Column `q` corresponds to `predictions[q]`.
pub fn build_cost_matrix(
    predictions: &[Prediction],
    gts: &[GroundTruth],
    weights: &CostWeights,
    image: &ImageSize,
) -> Result<CostMatrix, MatchingError> {
    if let Some(first) = predictions.first() {
        if let Some(p) = predictions.iter().find(|p| p.stage != first.stage) {
            return Err(MatchingError::MixedStages {
                query: p.query_index,
                expected: first.stage,
                found: p.stage,
            });
        }
    }
    let mut costs = Matrix::zeros(gts.len(), predictions.len());
    for (g, gt) in gts.iter().enumerate() {
        for (q, pred) in predictions.iter().enumerate() {
            let p = *pred
                .class_scores
                .get(gt.category)
                .ok_or(MatchingError::CategoryOutOfRange {
                    gt: g,
                    category: gt.category,
                    classes: pred.class_scores.len(),
                })?;
            let c = weights.class * focal_cost(p, weights.alpha, weights.gamma)
                + weights.l1 * normalized_l1(&pred.bbox, &gt.bbox, image)
                + weights.giou * (1.0 - giou(&pred.bbox, &gt.bbox));
            if !c.is_finite() {
                return Err(MatchingError::NonFiniteCost { row: g, col: q });
            }
            costs[(g, q)] = c;
        }
    }
    Ok(CostMatrix {
        costs,
        weights: *weights,
    })
}

/// One stage of a match trace: which query each ground truth went to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageMatch {
    pub gt_to_query: Vec<Option<usize>>,
    pub num_queries: usize,
}

impl StageMatch {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.gt_to_query
            .iter()
            .enumerate()
            .filter_map(|(g, q)| q.map(|q| (g, q)))
    }

    /// Inverse map: the ground truth matched to each query, if any.
    pub fn query_to_gt(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.num_queries];
        for (g, q) in self.pairs() {
            out[q] = Some(g);
        }
        out
    }

    pub fn unmatched_queries(&self) -> Vec<usize> {
        self.query_to_gt()
            .iter()
            .enumerate()
            .filter_map(|(q, g)| g.is_none().then_some(q))
            .collect()
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs().map(|(g, q)| cost.costs[(g, q)]).sum()
    }
}

/// Matches for stages `1..=L`, stored 0-based.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchTrace {
    pub stages: Vec<StageMatch>,
}

impl MatchTrace {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Stage by 1-based index.
    pub fn stage(&self, stage: usize) -> Option<&StageMatch> {
        stage.checked_sub(1).and_then(|s| self.stages.get(s))
    }
}

/// Shortest augmenting path with row/column potentials. Requires
/// `rows <= cols`; returns the column of each row.
fn solve_potentials(cost: &Matrix, rows: &[usize], cols: &[usize]) -> (Vec<usize>, f64) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let at = |i: usize, j: usize| cost[(rows[i - 1], cols[j - 1])];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    // row_of[j]: row (1-based) assigned to column j, 0 for none.
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
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
    let mut col_of_row = vec![0usize; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            col_of_row[row_of[j] - 1] = j - 1;
        }
    }
    let total = col_of_row
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[(rows[i], cols[j])])
        .sum();
    (col_of_row, total)
}

fn tie_tolerance(total: f64) -> f64 {
    1e-12 * total.abs().max(1.0)
}

/// Exact minimum-cost injection of ground truths into queries. Among
/// optimal assignments the lexicographically smallest one (by gt index,
/// then query index) is returned.
pub fn hungarian_solve(cost: &CostMatrix) -> Result<StageMatch, MatchingError> {
    let n = cost.num_gts();
    let m = cost.num_queries();
    if n > m {
        return Err(MatchingError::TooManyObjects { gts: n, queries: m });
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let (_, optimum) = solve_potentials(&cost.costs, &all_rows, &all_cols);
    let tol = tie_tolerance(optimum);

    // Fix rows in order, each to the smallest column that still admits an
    // optimal completion.
    let mut fixed = 0.0;
    let mut used = vec![false; m];
    let mut assignment = Vec::with_capacity(n);
    for g in 0..n {
        let rest: Vec<usize> = (g + 1..n).collect();
        let mut chosen = None;
        for q in 0..m {
            if used[q] {
                continue;
            }
            let free: Vec<usize> = (0..m).filter(|&c| !used[c] && c != q).collect();
            let (_, sub) = solve_potentials(&cost.costs, &rest, &free);
            if fixed + cost.costs[(g, q)] + sub <= optimum + tol {
                chosen = Some(q);
                break;
            }
        }
        // The optimal column itself always qualifies, so a choice exists.
        let q = chosen.expect("optimal completion exists");
        used[q] = true;
        fixed += cost.costs[(g, q)];
        assignment.push(Some(q));
    }
    Ok(StageMatch {
        gt_to_query: assignment,
        num_queries: m,
    })
}

/// Matching for one stage straight from predictions.
pub fn match_stage(
    predictions: &[Prediction],
    gts: &[GroundTruth],
    weights: &CostWeights,
    image: &ImageSize,
) -> Result<StageMatch, MatchingError> {
    let cost = build_cost_matrix(predictions, gts, weights, image)?;
    let columns = hungarian_solve(&cost)?;
    // Columns are positions in `predictions`; translate to query indexes.
    Ok(StageMatch {
        gt_to_query: columns
            .gt_to_query
            .iter()
            .map(|c| c.map(|c| predictions[c].query_index))
            .collect(),
        num_queries: predictions.len(),
    })
}

#[cfg(test)]
pub(crate) mod oracle {
    use super::*;

    /// Minimum over every injection, enumerated with lexicographic order so
    /// the first minimum found is the lexicographically smallest.
    pub fn brute_force(cost: &Matrix) -> (Vec<usize>, f64) {
        fn rec(
            cost: &Matrix,
            g: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<usize>,
            best: &mut Option<(Vec<usize>, f64)>,
        ) {
            if g == cost.rows() {
                let total: f64 = cur.iter().enumerate().map(|(r, &c)| cost[(r, c)]).sum();
                if best.as_ref().map_or(true, |(_, b)| total < *b) {
                    *best = Some((cur.clone(), total));
                }
                return;
            }
            for q in 0..cost.cols() {
                if !used[q] {
                    used[q] = true;
                    cur.push(q);
                    rec(cost, g + 1, used, cur, best);
                    cur.pop();
                    used[q] = false;
                }
            }
        }
        let mut best = None;
        rec(cost, 0, &mut vec![false; cost.cols()], &mut Vec::new(), &mut best);
        best.unwrap_or((Vec::new(), 0.0))
    }
}
