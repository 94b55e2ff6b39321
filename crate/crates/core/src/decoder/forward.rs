use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filters::{build_spatial_filter, generate_channel_filter, generate_filter, DynamicFilter, FilterKind};
use super::mixing::{cascade_channel_mix, norm_rows};
use super::params::{DecoderParams, HeadParams, StageParams};
use super::sampler::{sample_points, Pyramid};
use super::{DecoderConfig, DecoderError, Result};
use crate::geometry::{BoxXYZR, ImageSize};
use crate::matching::Prediction;
use crate::numerics::{layer_norm, linear, relu, sigmoid, Matrix, Vector, LAYER_NORM_EPS};

/// Largest |log2 aspect| a refined box may take.
pub const MAX_LOG_ASPECT: f64 = 4.0;

/// Content and positional vector of one query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryState {
    pub content: Vector,
    pub position: BoxXYZR,
}

/// Kernels generated for one query, indexed by stage then channel group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    channel: Vec<Vec<DynamicFilter>>,
    spatial: Vec<Vec<DynamicFilter>>,
}

impl FilterBank {
    pub fn new() -> Self {
        FilterBank::default()
    }

    /// Stages whose channel kernels are stored.
    pub fn depth(&self) -> usize {
        self.channel.len()
    }

    pub fn spatial_depth(&self) -> usize {
        self.spatial.len()
    }

    /// Stores the kernels of the next stage.
    pub fn push(&mut self, channel: Vec<DynamicFilter>, spatial: Vec<DynamicFilter>) -> Result<()> {
        let stage = self.depth() + 1;
        let ok_kind = channel.iter().all(|f| f.kind == FilterKind::Channel && f.origin_stage == stage)
            && spatial.iter().all(|f| f.kind == FilterKind::Spatial && f.origin_stage == stage);
        if !ok_kind {
            return Err(DecoderError::Config(format!(
                "bank expects channel then spatial kernels from stage {stage}"
            )));
        }
        self.channel.push(channel);
        self.spatial.push(spatial);
        Ok(())
    }

    pub fn channel_filters(&self, stage: usize) -> &[DynamicFilter] {
        &self.channel[stage - 1]
    }

    pub fn spatial_filters(&self, stage: usize) -> &[DynamicFilter] {
        &self.spatial[stage - 1]
    }

    /// Channel kernels of `group` from stages `from ..= to`, oldest first.
    pub fn channel_window(&self, group: usize, from: usize, to: usize) -> Vec<&Matrix> {
        (from..=to)
            .filter(|&s| s >= 1)
            .map(|s| &self.channel[s - 1][group].kernel)
            .collect()
    }

    /// The `n` most recent spatial kernels of `group`, most recent first.
    pub fn spatial_recent(&self, group: usize, n: usize) -> Vec<&Matrix> {
        self.spatial.iter().rev().take(n).map(|s| &s[group].kernel).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub stage: usize,
    pub predictions: Vec<Prediction>,
    pub states: Vec<QueryState>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderRun {
    pub stages: Vec<StageOutput>,
    pub banks: Vec<FilterBank>,
}

impl DecoderRun {
    pub fn predictions(&self) -> Vec<Prediction> {
        self.stages.iter().flat_map(|s| s.predictions.iter().cloned()).collect()
    }
}

/// Seeded starting queries: centers uniform over the image, scales between
/// an eighth and half of the shorter side, square boxes, small contents.
pub fn initial_queries(config: &DecoderConfig, image: &ImageSize, rng: &mut ChaCha8Rng) -> Vec<QueryState> {
    let short = image.width.min(image.height);
    let xs = Uniform::new(0.0, image.width);
    let ys = Uniform::new(0.0, image.height);
    let zs = Uniform::new((short / 8.0).log2(), (short / 2.0).log2());
    let content = Uniform::new_inclusive(-1.0, 1.0);
    (0..config.num_queries)
        .map(|_| QueryState {
            position: BoxXYZR {
                x: xs.sample(rng),
                y: ys.sample(rng),
                z: zs.sample(rng),
                r: 0.0,
            },
            content: (0..config.content_dim).map(|_| content.sample(rng)).collect(),
        })
        .collect()
}

fn refine_box(b: &BoxXYZR, delta: &[f64], image: &ImageSize) -> BoxXYZR {
    let scale = (b.z - 0.5 * b.r).exp2();
    let max_z = image.width.max(image.height).log2() + 1.0;
    BoxXYZR {
        x: (b.x + delta[0] * scale).clamp(0.0, image.width),
        y: (b.y + delta[1] * scale).clamp(0.0, image.height),
        z: (b.z + delta[2]).clamp(0.0, max_z),
        r: (b.r + delta[3]).clamp(-MAX_LOG_ASPECT, MAX_LOG_ASPECT),
    }
}

fn head(state: &QueryState, head: &HeadParams, image: &ImageSize) -> Result<(Vector, BoxXYZR)> {
    let logits = linear(&state.content, &head.class_weight, &head.class_bias)?;
    let scores = logits.iter().map(|&l| sigmoid(l)).collect();
    let delta = linear(&state.content, &head.box_weight, &head.box_bias)?;
    Ok((scores, refine_box(&state.position, &delta, image)))
}

/// One stage for one query: sample, cascade channel mixing, spatial mixing
/// with reused kernels, output projection with residual, then the heads.
/// Stores this stage's kernels in `bank`.
pub fn run_query_stage(
    query: &QueryState,
    bank: &mut FilterBank,
    stage: usize,
    params: &StageParams,
    head_params: &HeadParams,
    config: &DecoderConfig,
    pyramid: &Pyramid,
    image: &ImageSize,
) -> Result<(QueryState, Vector)> {
    if bank.depth() + 1 != stage {
        return Err(DecoderError::BankTooShallow {
            kind: "channel",
            needed: stage - 1,
            available: bank.depth(),
        });
    }
    let v = &query.content;
    let dc = config.group_dim;
    let p_in = config.points_in(stage);
    let p_out = config.points_out(stage);

    let features = sample_points(v, &query.position, &params.sampler, pyramid)?;
    let channel: Vec<DynamicFilter> = params
        .channel_generators
        .iter()
        .map(|g| generate_channel_filter(v, g, stage))
        .collect::<Result<_>>()?;
    let current: Vec<Matrix> = channel.iter().map(|f| f.kernel.clone()).collect();
    let mixed = cascade_channel_mix(&features, bank, &current, v, stage, params, config)?;

    let ns = config.spatial_reuse_at(stage);
    let mut flat = Vec::with_capacity(config.groups * p_out * dc);
    let mut spatial = Vec::with_capacity(config.groups);
    for (g, x) in mixed.groups.iter().enumerate() {
        let v_g = &v[g * dc..(g + 1) * dc];
        let fresh = generate_filter(v, &params.spatial_generators[g])?;
        let reused = bank.spatial_recent(g, ns);
        if reused.len() < ns {
            return Err(DecoderError::BankTooShallow {
                kind: "spatial",
                needed: ns,
                available: reused.len(),
            });
        }
        let kernel = build_spatial_filter(&reused, &fresh, v_g, &params.spatial_adapters, p_in, p_out)?;
        let out = norm_rows(&kernel.matmul(x)?, &params.spatial_norm)?;
        flat.extend(out.as_slice().iter().map(|&a| relu(a)));
        spatial.push(DynamicFilter {
            kernel,
            kind: FilterKind::Spatial,
            origin_stage: stage,
        });
    }
    bank.push(channel, spatial)?;

    let delta = linear(&flat, &params.output_weight, &params.output_bias)?;
    let residual: Vec<f64> = v.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
    let content = layer_norm(&residual, &params.output_norm.gain, &params.output_norm.shift, LAYER_NORM_EPS)?;
    let updated = QueryState {
        content,
        position: query.position,
    };
    let (scores, position) = head(&updated, head_params, image)?;
    Ok((QueryState { position, ..updated }, scores))
}

/// Runs every stage for every query and collects one prediction per
/// (stage, query).
pub fn run_decoder(
    params: &DecoderParams,
    config: &DecoderConfig,
    queries: &[QueryState],
    pyramid: &Pyramid,
    image: &ImageSize,
) -> Result<DecoderRun> {
    config.validate()?;
    if queries.len() != config.num_queries {
        return Err(DecoderError::Config(format!(
            "{} queries given, config expects {}",
            queries.len(),
            config.num_queries
        )));
    }
    if pyramid.channels() != config.content_dim {
        return Err(DecoderError::Config(format!(
            "pyramid has {} channels, content dim is {}",
            pyramid.channels(),
            config.content_dim
        )));
    }
    let mut banks = vec![FilterBank::new(); queries.len()];
    let mut states = queries.to_vec();
    let mut stages = Vec::with_capacity(config.num_stages);
    for stage in 1..=config.num_stages {
        let mut predictions = Vec::with_capacity(states.len());
        let mut next = Vec::with_capacity(states.len());
        for (q, (state, bank)) in states.iter().zip(banks.iter_mut()).enumerate() {
            let (updated, scores) = run_query_stage(
                state,
                bank,
                stage,
                params.stage(stage),
                &params.heads[stage - 1],
                config,
                pyramid,
                image,
            )?;
            predictions.push(Prediction {
                query_index: q,
                stage,
                bbox: updated.position.to_xyxy()?,
                class_scores: scores,
            });
            next.push(updated);
        }
        stages.push(StageOutput {
            stage,
            predictions,
            states: next.clone(),
        });
        states = next;
    }
    Ok(DecoderRun { stages, banks })
}
