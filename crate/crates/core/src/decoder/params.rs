use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filters::{Adapter, FilterGenerator};
use super::mixing::{NormParams, StaticMixParams};
use super::sampler::SamplerParams;
use super::{DecoderConfig, Result};
use crate::numerics::{Matrix, Vector};

/// Initial foreground probability of every class logit.
pub const CLASS_PRIOR: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub stage: usize,
    pub sampler: SamplerParams,
    /// One per channel group, `D_C × D_C` kernels from the full content vector.
    pub channel_generators: Vec<FilterGenerator>,
    /// One per channel group, producing the fresh rows of the spatial kernel.
    pub spatial_generators: Vec<FilterGenerator>,
    /// One per reused channel kernel, oldest first; shared by all groups.
    pub channel_adapters: Vec<Adapter>,
    /// One per reused spatial kernel, most recent first.
    pub spatial_adapters: Vec<Adapter>,
    pub cascade_statics: Vec<StaticMixParams>,
    pub cascade_norms: Vec<NormParams>,
    pub spatial_norm: NormParams,
    /// `D × G·P_out·D_C`
    pub output_weight: Matrix,
    pub output_bias: Vector,
    pub output_norm: NormParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub class_weight: Matrix,
    pub class_bias: Vector,
    /// Rows: dx, dy, dz, dr.
    pub box_weight: Matrix,
    pub box_bias: Vector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub stages: Vec<StageParams>,
    pub heads: Vec<HeadParams>,
}

impl DecoderParams {
    pub fn stage(&self, stage: usize) -> &StageParams {
        &self.stages[stage - 1]
    }
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound);
    Matrix::from_fn(rows, cols, |_, _| dist.sample(rng))
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

fn init_sampler(config: &DecoderConfig, stage: usize, rng: &mut ChaCha8Rng) -> SamplerParams {
    let k = config.spatial_groups(stage);
    let mut s = SamplerParams::zeros(config.groups, config.points_in(stage), k, config.content_dim);
    let group_xy = Uniform::new_inclusive(-0.5, 0.5);
    let bound = 0.5 / 2f64.sqrt();
    let point_xy = Uniform::new_inclusive(-bound, bound);
    for triple in s.group_bias.chunks_mut(3) {
        triple[0] = group_xy.sample(rng);
        triple[1] = group_xy.sample(rng);
    }
    for triple in s.point_bias.chunks_mut(3) {
        triple[0] = point_xy.sample(rng);
        triple[1] = point_xy.sample(rng);
    }
    s
}

fn init_stage(config: &DecoderConfig, stage: usize, rng: &mut ChaCha8Rng) -> StageParams {
    let (d, dc, g) = (config.content_dim, config.group_dim, config.groups);
    let p_in = config.points_in(stage);
    let p_out = config.points_out(stage);
    let k = config.spatial_groups(stage);
    let reuse = config.channel_reuse_at(stage);
    let ns = config.spatial_reuse_at(stage);

    let sampler = init_sampler(config, stage, rng);
    let channel_generators = (0..g)
        .map(|_| {
            let mut gen = FilterGenerator::zeros(dc, dc, d);
            gen.base = Matrix::identity(dc);
            gen
        })
        .collect();
    let fresh = config.fresh_spatial_rows(stage);
    let spatial_generators = (0..g)
        .map(|_| {
            let mut gen = FilterGenerator::zeros(fresh, p_in, d);
            gen.base = uniform_matrix(fresh, p_in, fan_in_bound(p_in), rng);
            gen
        })
        .collect();
    let channel_adapters = (0..reuse).map(|_| Adapter::zeros(dc, dc, dc)).collect();
    let spatial_adapters = (1..=ns)
        .map(|back| {
            let j = stage - back;
            Adapter::zeros(config.points_out(j), config.points_in(j), dc)
        })
        .collect();
    let cascade_statics = (0..reuse)
        .map(|_| {
            let per = p_in / k;
            StaticMixParams {
                intra: uniform_matrix(per * dc, per * dc, fan_in_bound(per * dc), rng),
                inter: uniform_matrix(k * dc, k * dc, fan_in_bound(k * dc), rng),
                channel: uniform_matrix(dc, dc, fan_in_bound(dc), rng),
                channel_bias: Vector::zeros(dc),
            }
        })
        .collect();
    let cascade_norms = (0..=reuse).map(|_| NormParams::identity(dc)).collect();
    let flat = g * p_out * dc;
    StageParams {
        stage,
        sampler,
        channel_generators,
        spatial_generators,
        channel_adapters,
        spatial_adapters,
        cascade_statics,
        cascade_norms,
        spatial_norm: NormParams::identity(dc),
        output_weight: uniform_matrix(d, flat, fan_in_bound(flat), rng),
        output_bias: Vector::zeros(d),
        output_norm: NormParams::identity(d),
    }
}

fn init_head(config: &DecoderConfig, rng: &mut ChaCha8Rng) -> HeadParams {
    let d = config.content_dim;
    let prior = -((1.0 - CLASS_PRIOR) / CLASS_PRIOR).ln();
    HeadParams {
        class_weight: uniform_matrix(config.num_classes, d, fan_in_bound(d), rng),
        class_bias: Vector::filled(config.num_classes, prior),
        box_weight: uniform_matrix(4, d, 0.5 * fan_in_bound(d), rng),
        box_bias: Vector::zeros(4),
    }
}

/// Seeded initialization. Filter generators start with zero weights (so
/// channel kernels are the identity for any content), sampler weights are
/// zero with xy biases drawn uniformly and z biases zero, and adapters are
/// zero.
pub fn init_parameters(config: &DecoderConfig, seed: u64) -> Result<DecoderParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stages = Vec::with_capacity(config.num_stages);
    let mut heads = Vec::with_capacity(config.num_stages);
    for stage in 1..=config.num_stages {
        stages.push(init_stage(config, stage, &mut rng));
        heads.push(init_head(config, &mut rng));
    }
    Ok(DecoderParams { stages, heads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::filters::generate_channel_filter;

    #[test]
    fn shapes_follow_schedule() {
        let config = DecoderConfig::desk();
        let params = init_parameters(&config, 0).unwrap();
        assert_eq!(params.stages.len(), 6);
        let s2 = params.stage(2);
        assert!(s2.channel_adapters.is_empty() && s2.spatial_adapters.is_empty());
        assert_eq!(s2.cascade_norms.len(), 1);
        let s5 = params.stage(5);
        assert_eq!(s5.channel_adapters.len(), 4);
        assert_eq!(s5.cascade_statics.len(), 4);
        assert_eq!(s5.cascade_norms.len(), 5);
        assert_eq!(s5.spatial_adapters.len(), 1);
        assert_eq!(s5.spatial_generators[0].kernel_shape(), (8, 8));
        // the stage-2 spatial kernel is 16 x 8
        assert_eq!(params.stage(3).spatial_adapters[0].row_gate.rows(), 16);
    }

    #[test]
    fn initial_channel_filter_is_identity() {
        let config = DecoderConfig::desk();
        let params = init_parameters(&config, 4).unwrap();
        let v: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
        for stage in &params.stages {
            for gen in &stage.channel_generators {
                let m = generate_channel_filter(&v, gen, stage.stage).unwrap();
                assert_eq!(m.kernel, Matrix::identity(8));
            }
        }
    }

    #[test]
    fn seeds_are_reproducible() {
        let config = DecoderConfig::desk();
        assert_eq!(init_parameters(&config, 9).unwrap(), init_parameters(&config, 9).unwrap());
        assert_ne!(init_parameters(&config, 9).unwrap(), init_parameters(&config, 10).unwrap());
    }
}
