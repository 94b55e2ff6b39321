use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{invalid, HarnessError, Result};
use crate::assigner::PredictionSet;
use crate::decoder::{init_parameters, initial_queries, run_decoder, DecoderConfig, Pyramid, PyramidLevel};
use crate::geometry::{BoxXYXY, GroundTruth, ImageSize};
use crate::matching::Prediction;
use crate::numerics::FeatureGrid;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

/// Pyramid strides used for synthetic scenarios: 4, 8, 16, 32.
const SYNTHETIC_LOG2_STRIDES: [u32; 4] = [2, 3, 4, 5];

/// Seed and decoder configuration from which predictions are computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub decoder: DecoderConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PredictionSource {
    Explicit(PredictionSet),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub image_size: ImageSize,
    pub num_classes: usize,
    pub ground_truths: Vec<GroundTruth>,
    pub source: PredictionSource,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    schema_version: u32,
    image_size: ImageSize,
    num_classes: usize,
    ground_truths: Vec<GroundTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stages: Option<Vec<StageFile>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    synthetic: Option<SyntheticSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(try_from = "RawStage")]
struct StageFile {
    stage: usize,
    predictions: Vec<PredictionFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage {
    stage: usize,
    predictions: Vec<PredictionFile>,
}

impl TryFrom<RawStage> for StageFile {
    type Error = String;
    fn try_from(raw: RawStage) -> std::result::Result<Self, String> {
        if raw.predictions.is_empty() {
            return Err(format!("stage {} has no predictions", raw.stage));
        }
        for (k, p) in raw.predictions.iter().enumerate() {
            if p.query != k {
                return Err(format!(
                    "predictions[{k}] has query {}, expected {k} (queries are listed 0, 1, 2, ... without gaps)",
                    p.query
                ));
            }
        }
        Ok(StageFile {
            stage: raw.stage,
            predictions: raw.predictions,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(try_from = "RawPrediction")]
struct PredictionFile {
    query: usize,
    #[serde(rename = "box")]
    bbox: BoxXYXY,
    scores: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrediction {
    query: usize,
    #[serde(rename = "box")]
    bbox: BoxXYXY,
    scores: Vec<f64>,
}

impl TryFrom<RawPrediction> for PredictionFile {
    type Error = String;
    fn try_from(raw: RawPrediction) -> std::result::Result<Self, String> {
        if let Some((c, s)) = raw.scores.iter().enumerate().find(|(_, s)| !(0.0..=1.0).contains(*s)) {
            return Err(format!("scores[{c}] = {s} is not a probability"));
        }
        Ok(PredictionFile {
            query: raw.query,
            bbox: raw.bbox,
            scores: raw.scores,
        })
    }
}

fn check_ground_truths(gts: &[GroundTruth], num_classes: usize) -> Result<()> {
    if num_classes == 0 {
        return Err(invalid("num_classes", "must be at least 1"));
    }
    for (i, gt) in gts.iter().enumerate() {
        if gt.category >= num_classes {
            return Err(invalid(
                format!("ground_truths[{i}].category"),
                format!("category {} with {num_classes} classes", gt.category),
            ));
        }
    }
    Ok(())
}

impl Scenario {
    pub fn explicit(
        image_size: ImageSize,
        num_classes: usize,
        ground_truths: Vec<GroundTruth>,
        predictions: PredictionSet,
    ) -> Result<Scenario> {
        check_ground_truths(&ground_truths, num_classes)?;
        if predictions.num_classes() != num_classes {
            return Err(invalid(
                "stages",
                format!("predictions carry {} classes, scenario has {num_classes}", predictions.num_classes()),
            ));
        }
        Ok(Scenario {
            image_size,
            num_classes,
            ground_truths,
            source: PredictionSource::Explicit(predictions),
        })
    }

    pub fn synthetic(
        image_size: ImageSize,
        num_classes: usize,
        ground_truths: Vec<GroundTruth>,
        spec: SyntheticSpec,
    ) -> Result<Scenario> {
        check_ground_truths(&ground_truths, num_classes)?;
        if spec.decoder.num_classes != num_classes {
            return Err(invalid(
                "synthetic.decoder.num_classes",
                format!("{} differs from num_classes = {num_classes}", spec.decoder.num_classes),
            ));
        }
        spec.decoder
            .validate()
            .map_err(|e| invalid("synthetic.decoder", e.to_string()))?;
        Ok(Scenario {
            image_size,
            num_classes,
            ground_truths,
            source: PredictionSource::Synthetic(spec),
        })
    }

    pub fn num_stages(&self) -> usize {
        match &self.source {
            PredictionSource::Explicit(p) => p.num_stages(),
            PredictionSource::Synthetic(s) => s.decoder.num_stages,
        }
    }

    /// Stored predictions, or a fresh decoder run for synthetic scenarios.
    pub fn predictions(&self) -> Result<PredictionSet> {
        match &self.source {
            PredictionSource::Explicit(p) => Ok(p.clone()),
            PredictionSource::Synthetic(spec) => synthesize(spec, &self.image_size),
        }
    }
}

/// Random feature pyramid with strides 4 to 32 covering `image`, values
/// uniform in [-1, 1].
pub fn synthetic_pyramid(channels: usize, image: &ImageSize, rng: &mut ChaCha8Rng) -> Result<Pyramid> {
    let dist = Uniform::new_inclusive(-1.0, 1.0);
    let mut levels = Vec::with_capacity(SYNTHETIC_LOG2_STRIDES.len());
    for l in SYNTHETIC_LOG2_STRIDES {
        let stride = f64::from(1u32 << l);
        let w = (image.width / stride).ceil().max(1.0) as usize;
        let h = (image.height / stride).ceil().max(1.0) as usize;
        let grid = FeatureGrid::from_fn(h, w, channels, |_, _, _| dist.sample(rng)).map_err(crate::decoder::DecoderError::from)?;
        levels.push(PyramidLevel {
            log2_stride: f64::from(l),
            grid,
        });
    }
    Ok(Pyramid::new(levels)?)
}

fn synthesize(spec: &SyntheticSpec, image: &ImageSize) -> Result<PredictionSet> {
    let config = &spec.decoder;
    let params = init_parameters(config, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pyramid = synthetic_pyramid(config.content_dim, image, &mut rng)?;
    let queries = initial_queries(config, image, &mut rng);
    let run = run_decoder(&params, config, &queries, &pyramid, image)?;
    Ok(PredictionSet::new(
        config.num_stages,
        config.num_queries,
        config.num_classes,
        run.predictions(),
    )?)
}

fn schema_error(e: serde_path_to_error::Error<serde_json::Error>) -> HarnessError {
    let path = e.path().to_string();
    let inner = e.into_inner();
    let text = inner.to_string();
    let message = match text.rfind(" at line ") {
        Some(cut) => text[..cut].to_string(),
        None => text,
    };
    HarnessError::Schema {
        path,
        line: inner.line(),
        column: inner.column(),
        message,
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let mut de = serde_json::Deserializer::from_str(text);
    let file: ScenarioFile = serde_path_to_error::deserialize(&mut de).map_err(schema_error)?;
    de.end().map_err(|inner| HarnessError::Schema {
        path: ".".to_string(),
        line: inner.line(),
        column: inner.column(),
        message: "trailing characters after the document".to_string(),
    })?;
    if file.schema_version != SCENARIO_SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            format!("version {} is not {SCENARIO_SCHEMA_VERSION}", file.schema_version),
        ));
    }
    match (file.stages, file.synthetic) {
        (Some(stages), None) => {
            let predictions = collect_predictions(&stages, file.num_classes)?;
            Scenario::explicit(file.image_size, file.num_classes, file.ground_truths, predictions)
        }
        (None, Some(spec)) => Scenario::synthetic(file.image_size, file.num_classes, file.ground_truths, spec),
        _ => Err(invalid(".", "exactly one of `stages` and `synthetic` is required")),
    }
}

fn collect_predictions(stages: &[StageFile], num_classes: usize) -> Result<PredictionSet> {
    if stages.is_empty() {
        return Err(invalid("stages", "at least one stage is required"));
    }
    let num_queries = stages[0].predictions.len();
    let mut out = Vec::with_capacity(stages.len() * num_queries);
    for (k, s) in stages.iter().enumerate() {
        if s.stage != k + 1 {
            return Err(invalid(
                format!("stages[{k}].stage"),
                format!("stage {} listed at position {k}, expected {} (stages are listed 1, 2, 3, ...)", s.stage, k + 1),
            ));
        }
        if s.predictions.len() != num_queries {
            return Err(invalid(
                format!("stages[{k}].predictions"),
                format!("{} queries, stage 1 has {num_queries}", s.predictions.len()),
            ));
        }
        for (q, p) in s.predictions.iter().enumerate() {
            if p.scores.len() != num_classes {
                return Err(invalid(
                    format!("stages[{k}].predictions[{q}].scores"),
                    format!("{} scores for {num_classes} classes", p.scores.len()),
                ));
            }
            out.push(Prediction {
                query_index: p.query,
                stage: s.stage,
                bbox: p.bbox,
                class_scores: p.scores.iter().copied().collect(),
            });
        }
    }
    Ok(PredictionSet::new(stages.len(), num_queries, num_classes, out)?)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

pub fn scenario_to_json(scenario: &Scenario) -> Result<String> {
    let (stages, synthetic) = match &scenario.source {
        PredictionSource::Explicit(set) => {
            let stages = (1..=set.num_stages())
                .map(|s| StageFile {
                    stage: s,
                    predictions: set
                        .stage(s)
                        .iter()
                        .map(|p| PredictionFile {
                            query: p.query_index,
                            bbox: p.bbox,
                            scores: p.class_scores.to_vec(),
                        })
                        .collect(),
                })
                .collect();
            (Some(stages), None)
        }
        PredictionSource::Synthetic(spec) => (None, Some(spec.clone())),
    };
    let file = ScenarioFile {
        schema_version: SCENARIO_SCHEMA_VERSION,
        image_size: scenario.image_size,
        num_classes: scenario.num_classes,
        ground_truths: scenario.ground_truths.clone(),
        stages,
        synthetic,
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| invalid(".", e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = scenario_to_json(scenario)?;
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}
