use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use super::report::Report;
use super::scenario::{Scenario, SyntheticSpec};
use super::{invalid, HarnessError, Result};
use crate::assigner::{assign_all_stages, instability, AssignerConfig, InstabilityMode, PredictionSet, ScopeRule};
use crate::decoder::gradcheck::{check_all, check_op, GradOp, GRAD_TOLERANCE};
use crate::decoder::{closed_form_params, flops_report, Adapter, DecoderConfig, FilterGenerator, StaticMixParams};
use crate::geometry::{nms, BoxXYXY, GroundTruth, ImageSize, ScoredBox};
use crate::losses::{stage_loss, LossBreakdown, LossConfig, Normalization};
use crate::matching::CostWeights;
use crate::numerics::GradCheckReport;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssignOptions {
    pub scope: ScopeRule,
    /// One threshold for every stage, or one per stage.
    pub eta: Vec<f64>,
    pub instability_mode: InstabilityMode,
    pub loss: LossConfig,
}

impl Default for AssignOptions {
    fn default() -> Self {
        AssignOptions {
            scope: ScopeRule::PrevToLast,
            eta: vec![0.5],
            instability_mode: InstabilityMode::Consecutive,
            loss: LossConfig::default(),
        }
    }
}

impl AssignOptions {
    pub fn assigner_config(&self, num_stages: usize, num_classes: usize) -> Result<AssignerConfig> {
        let eta = match self.eta.len() {
            1 => vec![self.eta[0]; num_stages],
            n if n == num_stages => self.eta.clone(),
            n => return Err(invalid("eta", format!("{n} thresholds for {num_stages} stages"))),
        };
        let config = AssignerConfig {
            num_stages,
            num_classes,
            scope: self.scope.clone(),
            eta,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Serialize)]
struct BagDetail {
    query: usize,
    gts: Vec<usize>,
}

#[derive(Serialize)]
struct TargetDetail {
    query: usize,
    categories: Vec<usize>,
    matched_gt: Option<usize>,
}

#[derive(Serialize)]
struct StageDetail {
    stage: usize,
    window: (usize, usize),
    eta: f64,
    /// (gt, query)
    matches: Vec<(usize, usize)>,
    bags: Vec<BagDetail>,
    targets: Vec<TargetDetail>,
    loss: LossBreakdown,
}

#[derive(Serialize)]
struct AssignDetails {
    scope: ScopeRule,
    eta: Vec<f64>,
    instability_mode: InstabilityMode,
    weights: CostWeights,
    normalization: Normalization,
    num_ground_truths: usize,
    num_queries: usize,
    stages: Vec<StageDetail>,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| HarnessError::Report(e.to_string()))
}

fn assign_report(command: &str, scenario: &Scenario, predictions: &PredictionSet, opts: &AssignOptions) -> Result<Report> {
    let config = opts.assigner_config(predictions.num_stages(), scenario.num_classes)?;
    let gts = &scenario.ground_truths;
    let image = &scenario.image_size;
    let assignment = assign_all_stages(predictions, gts, &config, &opts.loss.weights, image)?;
    let mut report = Report::new(command);
    if config.num_stages >= 2 {
        report.set("instability", instability(&assignment.trace, opts.instability_mode)?);
    }
    let mut stages = Vec::with_capacity(config.num_stages);
    for stage in 1..=config.num_stages {
        let targets = &assignment.targets[stage - 1];
        let loss = stage_loss(predictions.stage(stage), targets, gts, &opts.loss, image)?;
        report.set_staged("pos_count", stage, assignment.positive_count(stage) as f64);
        report.set_staged("loss.cls", stage, loss.classification);
        report.set_staged("loss.l1", stage, loss.l1);
        report.set_staged("loss.giou", stage, loss.giou);
        report.set_staged("loss.total", stage, loss.total);
        let bags = assignment.bags[stage - 1]
            .bags
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty())
            .map(|(query, b)| BagDetail {
                query,
                gts: b.iter().copied().collect(),
            })
            .collect();
        let targets = targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.is_positive() || t.matched_gt.is_some())
            .map(|(query, t)| TargetDetail {
                query,
                categories: (0..t.multi_hot.len()).filter(|&c| t.multi_hot[c] > 0.0).collect(),
                matched_gt: t.matched_gt,
            })
            .collect();
        let matches = assignment.trace.stages[stage - 1].pairs().collect();
        stages.push(StageDetail {
            stage,
            window: config.scope.window(stage, config.num_stages)?,
            eta: config.eta_for(stage),
            matches,
            bags,
            targets,
            loss,
        });
    }
    report.details = to_value(&AssignDetails {
        scope: config.scope.clone(),
        eta: config.eta.clone(),
        instability_mode: opts.instability_mode,
        weights: opts.loss.weights,
        normalization: opts.loss.normalization,
        num_ground_truths: gts.len(),
        num_queries: predictions.num_queries(),
        stages,
    })?;
    report.validate()?;
    Ok(report)
}

/// Matches, bags, targets, losses and instability of every stage.
pub fn run_assign(scenario: &Scenario, opts: &AssignOptions) -> Result<Report> {
    let predictions = scenario.predictions()?;
    assign_report("assign", scenario, &predictions, opts)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulateOptions {
    pub seed: u64,
    pub decoder: DecoderConfig,
    pub image_size: ImageSize,
    pub num_ground_truths: usize,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            seed: 0,
            decoder: DecoderConfig::desk(),
            image_size: ImageSize::new(128.0, 128.0).expect("positive extent"),
            num_ground_truths: 3,
        }
    }
}

/// Boxes whose sides span 10% to 50% of the image, placed fully inside it.
fn random_ground_truths(count: usize, num_classes: usize, image: &ImageSize, rng: &mut ChaCha8Rng) -> Result<Vec<GroundTruth>> {
    let frac = Uniform::new_inclusive(0.1, 0.5);
    let mut gts = Vec::with_capacity(count);
    for _ in 0..count {
        let w = frac.sample(rng) * image.width;
        let h = frac.sample(rng) * image.height;
        let x1 = rng.gen_range(0.0..=image.width - w);
        let y1 = rng.gen_range(0.0..=image.height - h);
        gts.push(GroundTruth {
            bbox: BoxXYXY::new(x1, y1, x1 + w, y1 + h)?,
            category: rng.gen_range(0..num_classes),
        });
    }
    Ok(gts)
}

/// Draws ground truths from `seed`, runs the decoder from the same seed and
/// assigns its predictions. Returns the scenario so it can be replayed.
pub fn run_simulate(opts: &SimulateOptions, assign: &AssignOptions) -> Result<(Scenario, Report)> {
    let classes = opts.decoder.num_classes;
    if classes == 0 {
        return Err(invalid("num_classes", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let gts = random_ground_truths(opts.num_ground_truths, classes, &opts.image_size, &mut rng)?;
    let spec = SyntheticSpec {
        seed: opts.seed,
        decoder: opts.decoder.clone(),
    };
    let scenario = Scenario::synthetic(opts.image_size, classes, gts, spec)?;
    let predictions = scenario.predictions()?;
    let mut report = assign_report("simulate", &scenario, &predictions, assign)?;
    if let Value::Object(map) = &mut report.details {
        map.insert("seed".to_string(), Value::from(opts.seed));
        map.insert("decoder".to_string(), to_value(&opts.decoder)?);
        map.insert("ground_truths".to_string(), to_value(&scenario.ground_truths)?);
    }
    Ok((scenario, report))
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub report: Report,
    pub passed: bool,
}

#[derive(Serialize)]
struct GradcheckEntry<'a> {
    seed: u64,
    #[serde(flatten)]
    check: &'a GradCheckReport,
    passed: bool,
}

/// Runs the op named by `selector` (every op for `all`) over `seeds`
/// consecutive seeds starting at `seed`. Each block's metric is its worst
/// error over seeds.
pub fn run_gradcheck(selector: &str, seed: u64, seeds: usize, step: f64) -> Result<GradcheckOutcome> {
    let op = match selector {
        "all" => None,
        name => Some(name.parse::<GradOp>().map_err(|_| {
            let names: Vec<&str> = GradOp::ALL.iter().map(|o| o.name()).collect();
            invalid("op", format!("unknown op {name:?}; expected all, {}", names.join(", ")))
        })?),
    };
    if seeds == 0 {
        return Err(invalid("seeds", "must be at least 1"));
    }
    let mut report = Report::new("gradcheck");
    let mut runs = Vec::new();
    for s in seed..seed + seeds as u64 {
        let checks = match op {
            Some(op) => check_op(op, s, step)?,
            None => check_all(s, step)?,
        };
        runs.extend(checks.into_iter().map(|c| (s, c)));
    }
    let mut worst = 0.0f64;
    for (_, c) in &runs {
        let key = format!("gradcheck.{}", c.op);
        let prev = report.metric(&key).unwrap_or(0.0);
        report.set(key, prev.max(c.max_rel_error));
        worst = worst.max(c.max_rel_error);
    }
    let passed = runs.iter().all(|(_, c)| c.passes(GRAD_TOLERANCE));
    report.set("gradcheck.max", worst);
    report.set("gradcheck.tolerance", GRAD_TOLERANCE);
    report.set("gradcheck.step", step);
    report.set("gradcheck.seeds", seeds as f64);
    let entries: Vec<GradcheckEntry> = runs
        .iter()
        .map(|(s, c)| GradcheckEntry {
            seed: *s,
            check: c,
            passed: c.passes(GRAD_TOLERANCE),
        })
        .collect();
    report.details = serde_json::json!({
        "op": op.map(|o| o.name()).unwrap_or("all"),
        "first_seed": seed,
        "passed": passed,
        "checks": to_value(&entries)?,
    });
    report.validate()?;
    Ok(GradcheckOutcome { report, passed })
}

#[derive(Serialize)]
struct FlopsRow {
    stage: usize,
    points_in: usize,
    spatial_groups: usize,
    mixing: u128,
    generation: u128,
    ratio: f64,
    static_params: usize,
    static_bound: usize,
}

/// FLOP and parameter tables of every stage. The unindexed metrics describe
/// `stage`, or the last stage when `None`.
pub fn run_flops(config: &DecoderConfig, stage: Option<usize>) -> Result<Report> {
    config.validate()?;
    let focus = stage.unwrap_or(config.num_stages);
    if focus == 0 || focus > config.num_stages {
        return Err(invalid("stage", format!("stage {focus} outside 1..={}", config.num_stages)));
    }
    let (d, dc) = (config.content_dim, config.group_dim);
    let mut report = Report::new("flops");
    let mut rows = Vec::with_capacity(config.num_stages);
    for s in 1..=config.num_stages {
        let f = flops_report(config, s);
        let p = config.points_in(s);
        let k = config.spatial_groups(s);
        let counted = StaticMixParams::identity(p, k, dc).spatial_param_count();
        let closed = closed_form_params(config, s);
        if counted != closed.static_mix {
            return Err(HarnessError::Report(format!(
                "stage {s}: counted {counted} static parameters, closed form gives {}",
                closed.static_mix
            )));
        }
        report.set_staged("flops.mix", s, f.mixing as f64);
        report.set_staged("flops.gen", s, f.generation as f64);
        report.set_staged("flops.ratio", s, f.ratio);
        report.set_staged("params.static", s, counted as f64);
        report.set_staged("params.static_bound", s, (3 * p * dc * dc) as f64);
        rows.push(FlopsRow {
            stage: s,
            points_in: p,
            spatial_groups: k,
            mixing: f.mixing,
            generation: f.generation,
            ratio: f.ratio,
            static_params: counted,
            static_bound: 3 * p * dc * dc,
        });
    }
    let focus_row = &rows[focus - 1];
    let adapter = Adapter::zeros(dc, dc, dc).param_count();
    let generator = FilterGenerator::zeros(dc, dc, d).param_count();
    let closed = closed_form_params(config, focus);
    if adapter != closed.adapter || generator != closed.generator {
        return Err(HarnessError::Report(format!(
            "counted adapter/generator parameters {adapter}/{generator} differ from closed forms {}/{}",
            closed.adapter, closed.generator
        )));
    }
    report.set("flops.stage", focus as f64);
    report.set("flops.mix", focus_row.mixing as f64);
    report.set("flops.gen", focus_row.generation as f64);
    report.set("flops.ratio", focus_row.ratio);
    report.set("params.adapter", adapter as f64);
    report.set("params.generator", generator as f64);
    report.set("params.static", focus_row.static_params as f64);
    report.set("params.static_bound", focus_row.static_bound as f64);
    report.details = serde_json::json!({
        "content_dim": d,
        "group_dim": dc,
        "groups": config.groups,
        "batch_size": config.batch_size,
        "num_queries": config.num_queries,
        "stages": to_value(&rows)?,
    });
    report.validate()?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NmsOptions {
    pub iou_threshold: f64,
    /// Queries whose best class score is below this are dropped before NMS.
    pub score_threshold: f64,
}

impl Default for NmsOptions {
    fn default() -> Self {
        NmsOptions {
            iou_threshold: 0.5,
            score_threshold: 0.0,
        }
    }
}

#[derive(Serialize)]
struct NmsStage {
    stage: usize,
    candidates: Vec<usize>,
    kept: Vec<usize>,
}

/// Per-stage detection counts before and after suppression. Each query
/// contributes its best-scoring class. Unindexed metrics describe the last
/// stage.
pub fn run_nms(scenario: &Scenario, opts: &NmsOptions) -> Result<Report> {
    if !(0.0..=1.0).contains(&opts.iou_threshold) {
        return Err(invalid("iou_threshold", format!("{} is outside [0, 1]", opts.iou_threshold)));
    }
    if !opts.score_threshold.is_finite() {
        return Err(invalid("score_threshold", "must be finite"));
    }
    let predictions = scenario.predictions()?;
    let mut report = Report::new("nms");
    let mut stages = Vec::with_capacity(predictions.num_stages());
    for stage in 1..=predictions.num_stages() {
        let mut candidates = Vec::new();
        let mut boxes = Vec::new();
        for p in predictions.stage(stage) {
            let (category, score) = p
                .class_scores
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best });
            if score >= opts.score_threshold {
                candidates.push(p.query_index);
                boxes.push(ScoredBox {
                    bbox: p.bbox,
                    category,
                    score,
                });
            }
        }
        let kept: Vec<usize> = nms(&boxes, opts.iou_threshold).into_iter().map(|i| candidates[i]).collect();
        report.set_staged("nms.pre", stage, candidates.len() as f64);
        report.set_staged("nms.post", stage, kept.len() as f64);
        stages.push(NmsStage { stage, candidates, kept });
    }
    let last = stages.last().expect("at least one stage");
    report.set("nms.pre", last.candidates.len() as f64);
    report.set("nms.post", last.kept.len() as f64);
    report.details = serde_json::json!({
        "iou_threshold": opts.iou_threshold,
        "score_threshold": opts.score_threshold,
        "stages": to_value(&stages)?,
    });
    report.validate()?;
    Ok(report)
}
