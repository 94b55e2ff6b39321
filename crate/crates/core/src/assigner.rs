//! Cross-stage label assignment.
//!
//! For a receiving stage `i`, every bipartite match `(t -> q)` found at a
//! stage `j` inside the window `[α_i, β_i]` is offered to the prediction of
//! query `q` at stage `i`. It is admitted into that prediction's candidate
//! bag when the stage-`i` box overlaps `t` with IoU at least `η_i`. Bags are
//! then merged into multi-hot classification targets. Localization keeps
//! using the stage's own bipartite match.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, GroundTruth, ImageSize};
use crate::matching::{match_stage, CostWeights, MatchTrace, MatchingError, Prediction};
use crate::numerics::Vector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignError {
    #[error("scope [{from}, {to}] for stage {stage} is outside [1, {num_stages}]")]
    ScopeOutOfRange {
        stage: usize,
        from: usize,
        to: usize,
        num_stages: usize,
    },
    #[error("stage {stage} is missing from the match trace")]
    MissingStage { stage: usize },
    #[error("threshold {eta} for stage {stage} must lie in [0, 1]")]
    InvalidThreshold { stage: usize, eta: f64 },
    #[error("expected {expected} thresholds, got {found}")]
    ThresholdCount { expected: usize, found: usize },
    #[error("prediction set: {0}")]
    Predictions(String),
    #[error("ground truth {gt} has category {category}, class count is {classes}")]
    CategoryOutOfRange {
        gt: usize,
        category: usize,
        classes: usize,
    },
    #[error("instability needs at least two stages over the same ground truths")]
    InstabilityUndefined,
    #[error(transparent)]
    Matching(#[from] MatchingError),
}

/// How the window `[α_i, β_i]` of source stages is chosen for stage `i`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeRule {
    /// `[max(1, i-1), L]`
    PrevToLast,
    /// `[i, i]`: vanilla one-to-one matching.
    OwnStage,
    /// `[1, L]`
    AllStages,
    /// `[max(1, i-before), min(L, i+after)]`
    Window { before: usize, after: usize },
    /// One explicit `(α_i, β_i)` per stage.
    Explicit(Vec<(usize, usize)>),
}

impl ScopeRule {
    /// Window for 1-based `stage` out of `num_stages`.
    pub fn window(&self, stage: usize, num_stages: usize) -> Result<(usize, usize), AssignError> {
        let (from, to) = match self {
            ScopeRule::PrevToLast => (stage.saturating_sub(1).max(1), num_stages),
            ScopeRule::OwnStage => (stage, stage),
            ScopeRule::AllStages => (1, num_stages),
            ScopeRule::Window { before, after } => (
                stage.saturating_sub(*before).max(1),
                (stage + after).min(num_stages),
            ),
            ScopeRule::Explicit(windows) => windows
                .get(stage.wrapping_sub(1))
                .copied()
                .unwrap_or((0, 0)),
        };
        if stage == 0 || stage > num_stages || from == 0 || from > to || to > num_stages {
            return Err(AssignError::ScopeOutOfRange {
                stage,
                from,
                to,
                num_stages,
            });
        }
        Ok((from, to))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignerConfig {
    pub num_stages: usize,
    pub num_classes: usize,
    pub scope: ScopeRule,
    /// IoU threshold per stage (index 0 is stage 1).
    pub eta: Vec<f64>,
}

impl AssignerConfig {
    /// Window `[i-1, L]` and threshold 0.5 on every stage.
    pub fn new(num_stages: usize, num_classes: usize) -> Self {
        AssignerConfig {
            num_stages,
            num_classes,
            scope: ScopeRule::PrevToLast,
            eta: vec![0.5; num_stages],
        }
    }

    pub fn with_scope(mut self, scope: ScopeRule) -> Self {
        self.scope = scope;
        self
    }

    pub fn with_uniform_eta(mut self, eta: f64) -> Self {
        self.eta = vec![eta; self.num_stages];
        self
    }

    pub fn validate(&self) -> Result<(), AssignError> {
        if self.eta.len() != self.num_stages {
            return Err(AssignError::ThresholdCount {
                expected: self.num_stages,
                found: self.eta.len(),
            });
        }
        for (s, &eta) in self.eta.iter().enumerate() {
            if !(0.0..=1.0).contains(&eta) {
                return Err(AssignError::InvalidThreshold { stage: s + 1, eta });
            }
        }
        for stage in 1..=self.num_stages {
            self.scope.window(stage, self.num_stages)?;
        }
        Ok(())
    }

    pub fn eta_for(&self, stage: usize) -> f64 {
        self.eta[stage - 1]
    }
}

/// Predictions of every (stage, query), stored stage-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    num_stages: usize,
    num_queries: usize,
    num_classes: usize,
    predictions: Vec<Prediction>,
}

impl PredictionSet {
    /// Accepts predictions in any order; requires exactly one per
    /// (stage, query) and a common class count.
    pub fn new(
        num_stages: usize,
        num_queries: usize,
        num_classes: usize,
        predictions: Vec<Prediction>,
    ) -> Result<Self, AssignError> {
        let mut slots: Vec<Option<Prediction>> = vec![None; num_stages * num_queries];
        for p in predictions {
            if p.stage == 0 || p.stage > num_stages || p.query_index >= num_queries {
                return Err(AssignError::Predictions(format!(
                    "(stage {}, query {}) outside {num_stages} stages x {num_queries} queries",
                    p.stage, p.query_index
                )));
            }
            if p.class_scores.len() != num_classes {
                return Err(AssignError::Predictions(format!(
                    "(stage {}, query {}) has {} class scores, expected {num_classes}",
                    p.stage,
                    p.query_index,
                    p.class_scores.len()
                )));
            }
            if p.class_scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(AssignError::Predictions(format!(
                    "(stage {}, query {}) has a probability outside [0, 1]",
                    p.stage, p.query_index
                )));
            }
            let slot = &mut slots[(p.stage - 1) * num_queries + p.query_index];
            if slot.is_some() {
                return Err(AssignError::Predictions(format!(
                    "duplicate prediction for (stage {}, query {})",
                    p.stage, p.query_index
                )));
            }
            *slot = Some(p);
        }
        let mut out = Vec::with_capacity(slots.len());
        for (k, slot) in slots.into_iter().enumerate() {
            match slot {
                Some(p) => out.push(p),
                None => {
                    return Err(AssignError::Predictions(format!(
                        "missing prediction for (stage {}, query {})",
                        k / num_queries + 1,
                        k % num_queries
                    )))
                }
            }
        }
        Ok(PredictionSet {
            num_stages,
            num_queries,
            num_classes,
            predictions: out,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.num_stages
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// All predictions of 1-based `stage`, ordered by query index.
    pub fn stage(&self, stage: usize) -> &[Prediction] {
        let start = (stage - 1) * self.num_queries;
        &self.predictions[start..start + self.num_queries]
    }

    pub fn get(&self, stage: usize, query: usize) -> &Prediction {
        &self.stage(stage)[query]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prediction> {
        self.predictions.iter()
    }
}

/// Admitted ground-truth indexes per query for one receiving stage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateBags {
    pub stage: usize,
    pub bags: Vec<BTreeSet<usize>>,
}

/// Supervision for one (stage, query).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassTarget {
    pub multi_hot: Vector,
    /// Own-stage bipartite match, used for localization.
    pub matched_gt: Option<usize>,
}

impl ClassTarget {
    pub fn is_positive(&self) -> bool {
        self.multi_hot.iter().any(|&v| v > 0.0)
    }
}

pub fn gather_bags(
    stage: usize,
    trace: &MatchTrace,
    predictions: &PredictionSet,
    gts: &[GroundTruth],
    config: &AssignerConfig,
) -> Result<CandidateBags, AssignError> {
    let (from, to) = config.scope.window(stage, config.num_stages)?;
    let eta = config.eta_for(stage);
    let mut bags = vec![BTreeSet::new(); predictions.num_queries()];
    for source in from..=to {
        let matches = trace
            .stage(source)
            .ok_or(AssignError::MissingStage { stage: source })?;
        for (t, q) in matches.pairs() {
            let receiver = &predictions.get(stage, q).bbox;
            if iou(receiver, &gts[t].bbox) >= eta {
                bags[q].insert(t);
            }
        }
    }
    Ok(CandidateBags { stage, bags })
}

/// Union of the bag categories per query; localization target from the
/// stage's own match.
pub fn merge_targets(
    bags: &CandidateBags,
    trace: &MatchTrace,
    gts: &[GroundTruth],
    num_classes: usize,
) -> Result<Vec<ClassTarget>, AssignError> {
    let own = trace
        .stage(bags.stage)
        .ok_or(AssignError::MissingStage { stage: bags.stage })?
        .query_to_gt();
    bags.bags
        .iter()
        .enumerate()
        .map(|(q, bag)| {
            let mut multi_hot = Vector::zeros(num_classes);
            for &t in bag {
                let category = gts[t].category;
                if category >= num_classes {
                    return Err(AssignError::CategoryOutOfRange {
                        gt: t,
                        category,
                        classes: num_classes,
                    });
                }
                multi_hot[category] = 1.0;
            }
            Ok(ClassTarget {
                multi_hot,
                matched_gt: own.get(q).copied().flatten(),
            })
        })
        .collect()
}

/// Matches, bags and targets for every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub trace: MatchTrace,
    pub bags: Vec<CandidateBags>,
    /// `targets[s][q]` supervises query `q` at stage `s + 1`.
    pub targets: Vec<Vec<ClassTarget>>,
}

impl Assignment {
    /// Number of queries with at least one positive category at 1-based `stage`.
    pub fn positive_count(&self, stage: usize) -> usize {
        self.targets[stage - 1].iter().filter(|t| t.is_positive()).count()
    }
}

pub fn match_all_stages(
    predictions: &PredictionSet,
    gts: &[GroundTruth],
    weights: &CostWeights,
    image: &ImageSize,
) -> Result<MatchTrace, AssignError> {
    let stages = (1..=predictions.num_stages())
        .map(|s| match_stage(predictions.stage(s), gts, weights, image))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MatchTrace { stages })
}

pub fn assign_all_stages(
    predictions: &PredictionSet,
    gts: &[GroundTruth],
    config: &AssignerConfig,
    weights: &CostWeights,
    image: &ImageSize,
) -> Result<Assignment, AssignError> {
    config.validate()?;
    if predictions.num_stages() != config.num_stages {
        return Err(AssignError::Predictions(format!(
            "{} stages of predictions for a {}-stage assigner",
            predictions.num_stages(),
            config.num_stages
        )));
    }
    if let Some((g, gt)) = gts.iter().enumerate().find(|(_, gt)| gt.category >= config.num_classes) {
        return Err(AssignError::CategoryOutOfRange {
            gt: g,
            category: gt.category,
            classes: config.num_classes,
        });
    }
    let trace = match_all_stages(predictions, gts, weights, image)?;
    assign_from_trace(trace, predictions, gts, config)
}

/// Gather and merge for every stage given precomputed matches.
pub fn assign_from_trace(
    trace: MatchTrace,
    predictions: &PredictionSet,
    gts: &[GroundTruth],
    config: &AssignerConfig,
) -> Result<Assignment, AssignError> {
    let mut bags = Vec::with_capacity(config.num_stages);
    let mut targets = Vec::with_capacity(config.num_stages);
    for stage in 1..=config.num_stages {
        let b = gather_bags(stage, &trace, predictions, gts, config)?;
        targets.push(merge_targets(&b, &trace, gts, config.num_classes)?);
        bags.push(b);
    }
    Ok(Assignment {
        trace,
        bags,
        targets,
    })
}

/// Which stage pairs [`instability`] compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstabilityMode {
    /// `(i, i+1)` for every consecutive pair.
    #[default]
    Consecutive,
    /// `(i, L)` for every earlier stage.
    AgainstFinal,
}

/// Fraction of (gt, stage pair) combinations whose matched query changes.
pub fn instability(trace: &MatchTrace, mode: InstabilityMode) -> Result<f64, AssignError> {
    let stages = &trace.stages;
    if stages.len() < 2 {
        return Err(AssignError::InstabilityUndefined);
    }
    let n_gt = stages[0].gt_to_query.len();
    if stages.iter().any(|s| s.gt_to_query.len() != n_gt) {
        return Err(AssignError::InstabilityUndefined);
    }
    if n_gt == 0 {
        return Ok(0.0);
    }
    let last = stages.len() - 1;
    let pairs: Vec<(usize, usize)> = match mode {
        InstabilityMode::Consecutive => (0..last).map(|s| (s, s + 1)).collect(),
        InstabilityMode::AgainstFinal => (0..last).map(|s| (s, last)).collect(),
    };
    let mut transfers = 0usize;
    for &(a, b) in &pairs {
        for g in 0..n_gt {
            if stages[a].gt_to_query[g] != stages[b].gt_to_query[g] {
                transfers += 1;
            }
        }
    }
    Ok(transfers as f64 / (pairs.len() * n_gt) as f64)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoxXYXY;
    use crate::matching::StageMatch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoxXYXY {
        BoxXYXY::new(x1, y1, x2, y2).unwrap()
    }

    fn trace(stages: &[&[Option<usize>]], n_q: usize) -> MatchTrace {
        MatchTrace {
            stages: stages
                .iter()
                .map(|s| StageMatch { gt_to_query: s.to_vec(), num_queries: n_q })
                .collect(),
        }
    }

    fn preds(boxes: &[&[BoxXYXY]], classes: usize) -> PredictionSet {
        let n_q = boxes[0].len();
        let all = boxes
            .iter()
            .enumerate()
            .flat_map(|(s, row)| {
                row.iter().enumerate().map(move |(q, b)| Prediction {
                    query_index: q,
                    stage: s + 1,
                    bbox: *b,
                    class_scores: Vector::filled(classes, 0.1),
                })
            })
            .collect();
        PredictionSet::new(boxes.len(), n_q, classes, all).unwrap()
    }

    #[test]
    fn scope_windows() {
        assert_eq!(ScopeRule::PrevToLast.window(3, 6).unwrap(), (2, 6));
        assert_eq!(ScopeRule::PrevToLast.window(1, 6).unwrap(), (1, 6));
        assert_eq!(ScopeRule::OwnStage.window(4, 6).unwrap(), (4, 4));
        assert_eq!(ScopeRule::Window { before: 2, after: 1 }.window(2, 6).unwrap(), (1, 3));
        assert!(matches!(
            ScopeRule::Explicit(vec![(1, 7)]).window(1, 6),
            Err(AssignError::ScopeOutOfRange { .. })
        ));
        assert!(ScopeRule::OwnStage.window(7, 6).is_err());
    }

    #[test]
    fn late_match_reaches_early_stage() {
        // gt matched to A (query 0) at stage 1 and to B (query 1) at stage 2.
        // B's stage-1 box overlaps the gt with IoU 0.8.
        let gt = GroundTruth { bbox: bx(0.0, 0.0, 10.0, 10.0), category: 2 };
        let b_stage1 = bx(0.0, 0.0, 10.0, 8.0);
        assert!((iou(&b_stage1, &gt.bbox) - 0.8).abs() < 1e-12);
        let p = preds(
            &[&[bx(0.0, 0.0, 9.0, 10.0), b_stage1], &[bx(1.0, 1.0, 10.0, 10.0), gt.bbox]],
            3,
        );
        let t = trace(&[&[Some(0)], &[Some(1)]], 2);
        let config = AssignerConfig::new(2, 3);
        let bags = gather_bags(1, &t, &p, &[gt], &config).unwrap();
        assert!(bags.bags[1].contains(&0));
        assert!(bags.bags[0].contains(&0));
        let targets = merge_targets(&bags, &t, &[gt], 3).unwrap();
        assert_eq!(&*targets[1].multi_hot, &[0.0, 0.0, 1.0]);
        assert_eq!(targets[1].matched_gt, None);
        assert_eq!(targets[0].matched_gt, Some(0));
    }

    #[test]
    fn own_stage_window_reduces_to_one_to_one() {
        let gts = [
            GroundTruth { bbox: bx(0.0, 0.0, 10.0, 10.0), category: 0 },
            GroundTruth { bbox: bx(20.0, 20.0, 30.0, 30.0), category: 1 },
        ];
        let p = preds(&[&[gts[1].bbox, bx(40.0, 40.0, 41.0, 41.0), gts[0].bbox]], 2);
        let t = trace(&[&[Some(2), Some(0)]], 3);
        let config = AssignerConfig::new(1, 2).with_scope(ScopeRule::OwnStage);
        let bags = gather_bags(1, &t, &p, &gts, &config).unwrap();
        let expected: Vec<BTreeSet<usize>> =
            vec![[1].into_iter().collect(), BTreeSet::new(), [0].into_iter().collect()];
        assert_eq!(bags.bags, expected);
    }

    #[test]
    fn merge_examples() {
        let gts = [
            GroundTruth { bbox: bx(0.0, 0.0, 1.0, 1.0), category: 3 },
            GroundTruth { bbox: bx(0.0, 0.0, 1.0, 1.0), category: 7 },
            GroundTruth { bbox: bx(0.0, 0.0, 1.0, 1.0), category: 3 },
        ];
        let t = trace(&[&[None, None, None]], 3);
        let bags = CandidateBags {
            stage: 1,
            bags: vec![
                [0, 1].into_iter().collect(),
                BTreeSet::new(),
                [0, 2].into_iter().collect(),
            ],
        };
        let out = merge_targets(&bags, &t, &gts, 8).unwrap();
        let hot = |v: &Vector| v.iter().enumerate().filter(|(_, &x)| x == 1.0).map(|(c, _)| c).collect::<Vec<_>>();
        assert_eq!(hot(&out[0].multi_hot), vec![3, 7]);
        assert!(out[1].multi_hot.iter().all(|&x| x == 0.0));
        assert_eq!(hot(&out[2].multi_hot), vec![3]);
    }

    #[test]
    fn missing_stage_and_bad_scope_are_errors() {
        let p = preds(&[&[bx(0.0, 0.0, 1.0, 1.0)], &[bx(0.0, 0.0, 1.0, 1.0)]], 1);
        let t = trace(&[&[]], 1);
        let config = AssignerConfig::new(2, 1);
        assert_eq!(
            gather_bags(1, &t, &p, &[], &config).unwrap_err(),
            AssignError::MissingStage { stage: 2 }
        );
        let config = AssignerConfig::new(2, 1).with_scope(ScopeRule::Explicit(vec![(0, 1), (1, 2)]));
        assert!(matches!(config.validate(), Err(AssignError::ScopeOutOfRange { stage: 1, .. })));
    }

    #[test]
    fn prediction_set_rejects_gaps_and_duplicates() {
        let mk = |s, q| Prediction {
            query_index: q,
            stage: s,
            bbox: bx(0.0, 0.0, 1.0, 1.0),
            class_scores: vec![0.2].into(),
        };
        let err = PredictionSet::new(1, 2, 1, vec![mk(1, 0)]).unwrap_err();
        assert!(err.to_string().contains("missing prediction for (stage 1, query 1)"));
        let err = PredictionSet::new(1, 1, 1, vec![mk(1, 0), mk(1, 0)]).unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn instability_examples() {
        let constant = trace(&[&[Some(1), Some(2)], &[Some(1), Some(2)], &[Some(1), Some(2)]], 4);
        assert_eq!(instability(&constant, InstabilityMode::Consecutive).unwrap(), 0.0);

        let alternating = trace(&[&[Some(0)], &[Some(1)], &[Some(0)]], 2);
        assert_eq!(instability(&alternating, InstabilityMode::Consecutive).unwrap(), 1.0);
        // Against the final stage only stage 2 differs.
        assert_eq!(instability(&alternating, InstabilityMode::AgainstFinal).unwrap(), 0.5);

        // Two gts over three stages: four pairs, one transfer.
        let mixed = trace(&[&[Some(0), Some(3)], &[Some(0), Some(3)], &[Some(0), Some(2)]], 4);
        assert_eq!(instability(&mixed, InstabilityMode::Consecutive).unwrap(), 0.25);

        let unmatched = trace(&[&[Some(0)], &[None]], 2);
        assert_eq!(instability(&unmatched, InstabilityMode::Consecutive).unwrap(), 1.0);

        assert!(instability(&trace(&[&[Some(0)]], 1), InstabilityMode::Consecutive).is_err());
    }

    #[test]
    fn zero_threshold_full_scope_marks_every_matched_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n_s, n_q, n_c) = (3, 6, 4);
        let rand_box = |rng: &mut ChaCha8Rng| {
            let x = rng.gen_range(0.0..40.0);
            let y = rng.gen_range(0.0..40.0);
            bx(x, y, x + rng.gen_range(2.0..20.0), y + rng.gen_range(2.0..20.0))
        };
        let gts: Vec<_> = (0..3)
            .map(|_| GroundTruth { bbox: rand_box(&mut rng), category: rng.gen_range(0..n_c) })
            .collect();
        let all: Vec<_> = (1..=n_s)
            .flat_map(|s| (0..n_q).map(move |q| (s, q)))
            .map(|(s, q)| Prediction {
                query_index: q,
                stage: s,
                bbox: rand_box(&mut rng),
                class_scores: (0..n_c).map(|_| rng.gen()).collect(),
            })
            .collect();
        let p = PredictionSet::new(n_s, n_q, n_c, all).unwrap();
        let config = AssignerConfig::new(n_s, n_c)
            .with_scope(ScopeRule::AllStages)
            .with_uniform_eta(0.0);
        let image = ImageSize::new(64.0, 64.0).unwrap();
        let a = assign_all_stages(&p, &gts, &config, &CostWeights::default(), &image).unwrap();
        for stage in 1..=n_s {
            for q in 0..n_q {
                for (t, gt) in gts.iter().enumerate() {
                    let ever = a.trace.stages.iter().any(|m| m.gt_to_query[t] == Some(q));
                    if ever {
                        assert_eq!(a.targets[stage - 1][q].multi_hot[gt.category], 1.0);
                    }
                }
                let any_match = a.trace.stages.iter().any(|m| m.gt_to_query.contains(&Some(q)));
                assert_eq!(a.targets[stage - 1][q].is_positive(), any_match);
            }
        }
    }

    #[test]
    fn brute_force_agreement_on_random_traces() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (n_s, n_q, n_g) = (3, 8, 3);
            let rand_box = |rng: &mut ChaCha8Rng| {
                let x = rng.gen_range(0.0..30.0);
                let y = rng.gen_range(0.0..30.0);
                bx(x, y, x + rng.gen_range(5.0..25.0), y + rng.gen_range(5.0..25.0))
            };
            let gts: Vec<_> = (0..n_g)
                .map(|_| GroundTruth { bbox: rand_box(&mut rng), category: rng.gen_range(0..3) })
                .collect();
            let boxes: Vec<Vec<BoxXYXY>> =
                (0..n_s).map(|_| (0..n_q).map(|_| rand_box(&mut rng)).collect()).collect();
            let rows: Vec<&[BoxXYXY]> = boxes.iter().map(|r| r.as_slice()).collect();
            let p = preds(&rows, 3);
            let stages: Vec<Vec<Option<usize>>> = (0..n_s)
                .map(|_| {
                    let mut qs: Vec<usize> = (0..n_q).collect();
                    rand::seq::SliceRandom::shuffle(qs.as_mut_slice(), &mut rng);
                    qs[..n_g].iter().map(|&q| Some(q)).collect()
                })
                .collect();
            let refs: Vec<&[Option<usize>]> = stages.iter().map(|s| s.as_slice()).collect();
            let t = trace(&refs, n_q);
            let eta = rng.gen_range(0.0..0.6);
            let config = AssignerConfig::new(n_s, 3).with_uniform_eta(eta);
            for stage in 1..=n_s {
                let got = gather_bags(stage, &t, &p, &gts, &config).unwrap();
                let window = config.scope.window(stage, n_s).unwrap();
                let want = oracle::brute_force_bags(stage, &t, &p, &gts, window, eta);
                assert_eq!(got.bags, want);
            }
        }
    }
}
