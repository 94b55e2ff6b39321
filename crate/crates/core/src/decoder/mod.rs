//! One decoder stage with cross-stage filter reuse.
//!
//! Channel kernels are generated per query and per channel group from the
//! content vector, stored in a per-query [`FilterBank`], and reused by later
//! stages through sigmoid-gated adapters. Spatial kernels are reused by
//! concatenating adapted earlier kernels with a smaller freshly generated
//! one. Every op has a hand-written backward pass.

mod cost;
mod filters;
mod forward;
pub mod gradcheck;
mod mixing;
mod params;
mod sampler;

pub use cost::{closed_form_params, flops_report, static_mix_param_count, FlopsReport, ParamCounts};
pub use filters::{
    adapt_filter, adapt_filter_backward, build_spatial_filter, build_spatial_filter_backward,
    generate_channel_filter, generate_filter, generate_filter_backward, AdaptGrad, Adapter,
    DynamicFilter, FilterGenerator, FilterKind, GeneratorGrad, SpatialFilterGrad,
};
pub use forward::{initial_queries, run_decoder, run_query_stage, DecoderRun, FilterBank, QueryState, StageOutput};
pub use mixing::{
    cascade_channel_mix, cascade_group_backward, cascade_group_forward, mix_rows, static_group_mix,
    static_mix_backward, static_mix_forward, CascadeGrad, CascadeInputs, NormParams, SampledFeatures,
    StaticMixGrad, StaticMixParams,
};
pub use params::{init_parameters, DecoderParams, HeadParams, StageParams};
pub use sampler::{
    sample_points, sample_points_backward, sampling_locations, Pyramid, PyramidLevel, SamplePoint,
    SamplerGrad, SamplerParams,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::numerics::NumericsError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    Config(String),
    #[error("filter bank holds {available} {kind} filters, stage needs {needed}")]
    BankTooShallow {
        kind: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{reused} reused spatial filters of {points_in} rows exceed {points_out} output rows")]
    SpatialCapacity {
        reused: usize,
        points_in: usize,
        points_out: usize,
    },
    #[error("{points} sampling points cannot be split into {groups} spatial groups")]
    Divisibility { points: usize, groups: usize },
    #[error("stored {kind} filter is {found}, need at least {needed}")]
    FilterShape {
        kind: &'static str,
        needed: String,
        found: String,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

/// Spatial group count `K = 2^⌊log2 √P⌋`.
pub fn spatial_groups(points: usize) -> usize {
    if points == 0 {
        return 1;
    }
    1 << (points.ilog2() / 2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// L
    pub num_stages: usize,
    /// N
    pub num_queries: usize,
    /// D
    pub content_dim: usize,
    /// G
    pub groups: usize,
    /// D_C, equal to D / G
    pub group_dim: usize,
    /// P_in for each stage.
    pub points_in: Vec<usize>,
    /// P_out = spatial_expansion · P_in.
    pub spatial_expansion: usize,
    /// Δγ_i for each stage: reused channel filters once reuse is active.
    pub channel_reuse: Vec<usize>,
    /// N_S
    pub spatial_reuse: usize,
    /// First 1-based stage that reuses channel filters.
    pub channel_reuse_start: usize,
    /// First 1-based stage that reuses spatial filters.
    pub spatial_reuse_start: usize,
    pub num_classes: usize,
    /// B, only used for FLOP counts.
    pub batch_size: usize,
}

impl Default for DecoderConfig {
    /// Base model: six stages, 100 queries, D = 256 split into four groups,
    /// 64 sampling points at stage 1 and 32 afterwards.
    fn default() -> Self {
        let num_stages = 6;
        let mut points_in = vec![32; num_stages];
        points_in[0] = 64;
        DecoderConfig {
            num_stages,
            num_queries: 100,
            content_dim: 256,
            groups: 4,
            group_dim: 64,
            points_in,
            spatial_expansion: 4,
            channel_reuse: (0..num_stages).collect(),
            spatial_reuse: 1,
            channel_reuse_start: 3,
            spatial_reuse_start: 3,
            num_classes: 80,
            batch_size: 1,
        }
    }
}

impl DecoderConfig {
    /// Small configuration for simulations and gradient checks.
    pub fn desk() -> Self {
        let num_stages = 6;
        let mut points_in = vec![8; num_stages];
        points_in[0] = 16;
        DecoderConfig {
            num_stages,
            num_queries: 12,
            content_dim: 16,
            groups: 2,
            group_dim: 8,
            points_in,
            spatial_expansion: 2,
            channel_reuse: (0..num_stages).collect(),
            spatial_reuse: 1,
            channel_reuse_start: 3,
            spatial_reuse_start: 3,
            num_classes: 5,
            batch_size: 1,
        }
    }

    /// Turns off all cross-stage filter reuse.
    pub fn without_reuse(mut self) -> Self {
        self.channel_reuse = vec![0; self.num_stages];
        self.spatial_reuse = 0;
        self
    }

    pub fn points_in(&self, stage: usize) -> usize {
        self.points_in[stage - 1]
    }

    pub fn points_out(&self, stage: usize) -> usize {
        self.spatial_expansion * self.points_in(stage)
    }

    pub fn spatial_groups(&self, stage: usize) -> usize {
        spatial_groups(self.points_in(stage))
    }

    /// Channel filters reused at `stage` (0 before reuse starts).
    pub fn channel_reuse_at(&self, stage: usize) -> usize {
        if stage < self.channel_reuse_start {
            0
        } else {
            self.channel_reuse[stage - 1]
        }
    }

    /// Spatial filters reused at `stage` (0 before reuse starts).
    pub fn spatial_reuse_at(&self, stage: usize) -> usize {
        if stage < self.spatial_reuse_start {
            0
        } else {
            self.spatial_reuse
        }
    }

    /// Rows produced by the stage's own spatial generator.
    pub fn fresh_spatial_rows(&self, stage: usize) -> usize {
        self.points_out(stage) - self.spatial_reuse_at(stage) * self.points_in(stage)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DecoderError::Config(msg));
        if self.num_stages == 0 || self.num_queries == 0 || self.groups == 0 || self.group_dim == 0 {
            return bad("stages, queries, groups and group_dim must be positive".into());
        }
        if self.content_dim != self.groups * self.group_dim {
            return bad(format!(
                "content_dim {} != groups {} x group_dim {}",
                self.content_dim, self.groups, self.group_dim
            ));
        }
        if self.points_in.len() != self.num_stages || self.channel_reuse.len() != self.num_stages {
            return bad(format!(
                "points_in and channel_reuse need {} entries",
                self.num_stages
            ));
        }
        if self.spatial_expansion == 0 || self.num_classes == 0 || self.batch_size == 0 {
            return bad("spatial_expansion, num_classes and batch_size must be positive".into());
        }
        if self.channel_reuse_start == 0 || self.spatial_reuse_start == 0 {
            return bad("reuse start stages are 1-based".into());
        }
        for stage in 1..=self.num_stages {
            let p = self.points_in(stage);
            if p == 0 {
                return bad(format!("stage {stage} has no sampling points"));
            }
            let k = self.spatial_groups(stage);
            if p % k != 0 {
                return Err(DecoderError::Divisibility { points: p, groups: k });
            }
            if self.channel_reuse[stage - 1] > stage - 1 {
                return bad(format!(
                    "stage {stage} reuses {} channel filters but only {} earlier stages exist",
                    self.channel_reuse[stage - 1],
                    stage - 1
                ));
            }
            let ns = self.spatial_reuse_at(stage);
            if ns > 0 {
                if ns > stage - 1 {
                    return bad(format!(
                        "stage {stage} reuses {ns} spatial filters but only {} earlier stages exist",
                        stage - 1
                    ));
                }
                if ns * p > self.points_out(stage) {
                    return Err(DecoderError::SpatialCapacity {
                        reused: ns,
                        points_in: p,
                        points_out: self.points_out(stage),
                    });
                }
                for j in stage - ns..stage {
                    if self.points_in(j) < p || self.points_out(j) < p {
                        return bad(format!(
                            "stage {stage} reuses the spatial filter of stage {j}, which is smaller than {p}x{p}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
