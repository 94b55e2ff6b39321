//! Focal classification loss over multi-hot targets and the L1 + GIoU
//! localization losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assigner::ClassTarget;
use crate::geometry::{giou, giou_grad, BoxXYXY, GroundTruth, ImageSize};
use crate::matching::{clamp_prob, normalized_l1, CostWeights, Prediction, PROB_CLAMP};
use crate::numerics::Vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{what}: expected length {expected}, got {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("query {query} is matched to ground truth {gt}, which does not exist")]
    UnknownGroundTruth { query: usize, gt: usize },
}

/// How per-stage sums are scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Divide by `max(1, own-stage matched queries)`.
    #[default]
    MatchedQueries,
    /// Plain sums.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: CostWeights,
    pub normalization: Normalization,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
    /// (classification, l1, giou)
    pub weights: (f64, f64, f64),
}

pub fn focal_loss_multihot(scores: &[f64], target: &[f64], alpha: f64, gamma: f64) -> Result<f64, LossError> {
    if scores.len() != target.len() {
        return Err(LossError::LengthMismatch {
            what: "focal target",
            expected: scores.len(),
            found: target.len(),
        });
    }
    Ok(scores
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            t * alpha * (1.0 - p).powf(gamma) * -p.ln()
                + (1.0 - t) * (1.0 - alpha) * p.powf(gamma) * -(1.0 - p).ln()
        })
        .sum())
}

/// Derivative of [`focal_loss_multihot`] with respect to the scores. Zero
/// where the clamp is active.
pub fn focal_loss_grad(scores: &[f64], target: &[f64], alpha: f64, gamma: f64) -> Result<Vector, LossError> {
    if scores.len() != target.len() {
        return Err(LossError::LengthMismatch {
            what: "focal target",
            expected: scores.len(),
            found: target.len(),
        });
    }
    Ok(scores
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                return 0.0;
            }
            let q = 1.0 - p;
            let pos = alpha * (-gamma * q.powf(gamma - 1.0) * -p.ln() - q.powf(gamma) / p);
            let neg = (1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * -q.ln() + p.powf(gamma) / q);
            t * pos + (1.0 - t) * neg
        })
        .collect())
}

/// `(normalized L1, 1 - GIoU)` between a prediction and its target.
pub fn localization_loss(pred: &BoxXYXY, target: &BoxXYXY, image: &ImageSize) -> (f64, f64) {
    (normalized_l1(pred, target, image), 1.0 - giou(pred, target))
}

/// Corner gradients of both localization terms, `[x1, y1, x2, y2]` order.
pub fn localization_grad(pred: &BoxXYXY, target: &BoxXYXY, image: &ImageSize) -> ([f64; 4], [f64; 4]) {
    let p = pred.to_array();
    let t = target.to_array();
    let scale = [image.width, image.height, image.width, image.height];
    let mut l1 = [0.0; 4];
    for k in 0..4 {
        let diff = p[k] / scale[k] - t[k] / scale[k];
        l1[k] = if diff > 0.0 {
            1.0 / scale[k]
        } else if diff < 0.0 {
            -1.0 / scale[k]
        } else {
            0.0
        };
    }
    let g = giou_grad(pred, target);
    (l1, [-g[0], -g[1], -g[2], -g[3]])
}

/// Loss of one stage. `predictions[q]` and `targets[q]` describe query `q`.
pub fn stage_loss(
    predictions: &[Prediction],
    targets: &[ClassTarget],
    gts: &[GroundTruth],
    config: &LossConfig,
    image: &ImageSize,
) -> Result<LossBreakdown, LossError> {
    if predictions.len() != targets.len() {
        return Err(LossError::LengthMismatch {
            what: "targets",
            expected: predictions.len(),
            found: targets.len(),
        });
    }
    let w = &config.weights;
    let mut classification = 0.0;
    let mut l1 = 0.0;
    let mut giou_loss = 0.0;
    let mut matched = 0usize;
    for (pred, target) in predictions.iter().zip(targets) {
        classification += focal_loss_multihot(&pred.class_scores, &target.multi_hot, w.alpha, w.gamma)?;
        if let Some(g) = target.matched_gt {
            let gt = gts.get(g).ok_or(LossError::UnknownGroundTruth {
                query: pred.query_index,
                gt: g,
            })?;
            let (a, b) = localization_loss(&pred.bbox, &gt.bbox, image);
            l1 += a;
            giou_loss += b;
            matched += 1;
        }
    }
    let norm = match config.normalization {
        Normalization::MatchedQueries => matched.max(1) as f64,
        Normalization::None => 1.0,
    };
    let (classification, l1, giou_loss) = (classification / norm, l1 / norm, giou_loss / norm);
    Ok(LossBreakdown {
        classification,
        l1,
        giou: giou_loss,
        total: w.class * classification + w.l1 * l1 + w.giou * giou_loss,
        weights: (w.class, w.l1, w.giou),
    })
}
