use serde::{Deserialize, Serialize};

use super::{spatial_groups, DecoderConfig};

/// Multiply-add counts of one stage's channel mixing and channel-kernel
/// generation, summed over batch, queries and groups.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub stage: usize,
    pub mixing: u128,
    pub generation: u128,
    pub ratio: f64,
}

pub fn flops_report(config: &DecoderConfig, stage: usize) -> FlopsReport {
    let b = config.batch_size as u128;
    let n = config.num_queries as u128;
    let g = config.groups as u128;
    let d = config.content_dim as u128;
    let dc = config.group_dim as u128;
    let p = config.points_in(stage) as u128;
    let mixing = b * n * g * p * (2 * dc - 1) * dc;
    let generation = b * n * g * (2 * d - 1) * dc * dc;
    FlopsReport {
        stage,
        mixing,
        generation,
        ratio: generation as f64 / mixing as f64,
    }
}

/// Closed-form parameter counts of the reuse machinery.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    /// One channel adapter: `2·D_C²`.
    pub adapter: usize,
    /// One channel-kernel generator: `(D + 1)·D_C²`.
    pub generator: usize,
    /// Grouped spatial part of one static layer: `(K² + (P/K)²)·D_C²`.
    pub static_mix: usize,
}

pub fn static_mix_param_count(points: usize, group_dim: usize) -> usize {
    let k = spatial_groups(points);
    let per = points / k;
    (k * k + per * per) * group_dim * group_dim
}

pub fn closed_form_params(config: &DecoderConfig, stage: usize) -> ParamCounts {
    let dc = config.group_dim;
    ParamCounts {
        adapter: 2 * dc * dc,
        generator: (config.content_dim + 1) * dc * dc,
        static_mix: static_mix_param_count(config.points_in(stage), dc),
    }
}
