//! Seeded central-difference checks of every hand-written backward pass.
//!
//! Each check contracts the op's output with a random weight tensor of the
//! same shape, feeds that tensor to the backward pass as the upstream
//! gradient, and compares the result against central differences of the
//! contracted scalar, one parameter block at a time. Probes that land
//! within a small margin of a relu kink, a grid-cell line, a pyramid level
//! or an L1/GIoU switching point are redrawn.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::filters::{
    adapt_filter, adapt_filter_backward, build_spatial_filter, build_spatial_filter_backward, generate_filter,
    generate_filter_backward, Adapter, FilterGenerator,
};
use super::mixing::{
    cascade_group_backward, cascade_group_forward, static_group_mix, static_mix_backward, CascadeInputs, NormParams,
    SampledFeatures, StaticMixParams,
};
use super::sampler::{sample_points, sample_points_backward, sampling_locations, Pyramid, PyramidLevel, SamplerParams};
use super::{DecoderError, Result};
use crate::geometry::{BoxXYXY, BoxXYZR, ImageSize};
use crate::losses::{focal_loss_grad, focal_loss_multihot, localization_grad, localization_loss};
use crate::numerics::{grad_check_scalar, FeatureGrid, GradCheckReport, Matrix};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-5;

const MAX_DRAWS: usize = 10_000;
pub const MAX_COORDS: usize = 48;
pub const CONDITION_FLOOR: f64 = 1e-6;
const RELU_MARGIN: f64 = 1e-2;
const GRID_MARGIN: f64 = 1e-3;
const BOX_MARGIN: f64 = 1e-2;
const FOCAL_ALPHA: f64 = 0.25;
const FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradOp {
    GenerateChannelFilter,
    AdaptFilter,
    CascadeChannelMix,
    StaticGroupMix,
    SamplePoints,
    BuildSpatialFilter,
    FocalLoss,
    LocalizationLoss,
}

impl GradOp {
    pub const ALL: [GradOp; 8] = [
        GradOp::GenerateChannelFilter,
        GradOp::AdaptFilter,
        GradOp::CascadeChannelMix,
        GradOp::StaticGroupMix,
        GradOp::SamplePoints,
        GradOp::BuildSpatialFilter,
        GradOp::FocalLoss,
        GradOp::LocalizationLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradOp::GenerateChannelFilter => "generate_channel_filter",
            GradOp::AdaptFilter => "adapt_filter",
            GradOp::CascadeChannelMix => "cascade_channel_mix",
            GradOp::StaticGroupMix => "static_group_mix",
            GradOp::SamplePoints => "sample_points",
            GradOp::BuildSpatialFilter => "build_spatial_filter",
            GradOp::FocalLoss => "focal_loss_multihot",
            GradOp::LocalizationLoss => "localization_loss",
        }
    }
}

impl fmt::Display for GradOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradOp {
    type Err = DecoderError;

    fn from_str(s: &str) -> Result<Self> {
        GradOp::ALL
            .into_iter()
            .find(|op| op.name() == s || (s == "focal_loss" && *op == GradOp::FocalLoss))
            .ok_or_else(|| {
                let known: Vec<_> = GradOp::ALL.iter().map(|o| o.name()).collect();
                DecoderError::Config(format!("unknown op `{s}`; expected one of {}", known.join(", ")))
            })
    }
}

/// Runs the checks of `op` at one seed. One report per parameter block.
pub fn check_op(op: GradOp, seed: u64, step: f64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ck = Checker::new(seed, step);
    match op {
        GradOp::GenerateChannelFilter => check_generator(&mut rng, &mut ck),
        GradOp::AdaptFilter => check_adapter(&mut rng, &mut ck),
        GradOp::CascadeChannelMix => {
            let mut out = Vec::new();
            for reuse in 0..=4 {
                out.extend(check_cascade(&mut rng, reuse, &mut ck)?);
            }
            Ok(out)
        }
        GradOp::StaticGroupMix => check_static(&mut rng, &mut ck),
        GradOp::SamplePoints => check_sampler(&mut rng, &mut ck),
        GradOp::BuildSpatialFilter => check_spatial(&mut rng, &mut ck),
        GradOp::FocalLoss => check_focal(&mut rng, &mut ck),
        GradOp::LocalizationLoss => check_localization(&mut rng, &mut ck),
    }
}

/// Every op at one seed.
pub fn check_all(seed: u64, step: f64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for op in GradOp::ALL {
        out.extend(check_op(op, seed, step)?);
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let d = Uniform::new(-1.0, 1.0);
    Matrix::from_fn(rows, cols, |_, _| d.sample(rng))
}

fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let d = Uniform::new(-1.0, 1.0);
    (0..len).map(|_| d.sample(rng)).collect()
}

fn flatten<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> Vec<f64> {
    parts.into_iter().flat_map(|p| p.iter().copied()).collect()
}

fn scatter<'a>(parts: impl IntoIterator<Item = &'a mut [f64]>, mut x: &[f64]) {
    for p in parts {
        let (head, tail) = x.split_at(p.len());
        p.copy_from_slice(head);
        x = tail;
    }
}

/// Picks the coordinates to probe and runs the comparison.
///
/// Blocks larger than [`MAX_COORDS`] are probed at a seeded random subset.
/// Coordinates whose analytic derivative is nonzero but below
/// [`CONDITION_FLOOR`] are not probed: at step 1e-5 their central
/// difference is dominated by rounding in the function value.
pub struct Checker {
    rng: ChaCha8Rng,
    step: f64,
}

impl Checker {
    fn new(seed: u64, step: f64) -> Self {
        Checker {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            step,
        }
    }

    fn coordinates(&mut self, analytic: &[f64]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..analytic.len())
            .filter(|&j| analytic[j] == 0.0 || analytic[j].abs() >= CONDITION_FLOOR)
            .collect();
        if idx.len() > MAX_COORDS {
            idx.shuffle(&mut self.rng);
            idx.truncate(MAX_COORDS);
            idx.sort_unstable();
        }
        idx
    }

    fn scalar(
        &mut self,
        name: &str,
        function: impl Fn(&[f64]) -> f64,
        analytic: &[f64],
        point: &[f64],
    ) -> Result<GradCheckReport> {
        let idx = self.coordinates(analytic);
        let sub_point: Vec<f64> = idx.iter().map(|&j| point[j]).collect();
        let sub_grad: Vec<f64> = idx.iter().map(|&j| analytic[j]).collect();
        let mut report = grad_check_scalar(
            name,
            |x| {
                let mut full = point.to_vec();
                for (&j, &v) in idx.iter().zip(x) {
                    full[j] = v;
                }
                function(&full)
            },
            &sub_grad,
            &sub_point,
            self.step,
        )?;
        if let Some(&j) = idx.get(report.worst.1) {
            report.worst.1 = j;
        }
        Ok(report)
    }

    /// Compares one parameter block of `state`.
    fn block<T: Clone>(
        &mut self,
        name: String,
        state: &T,
        read: impl Fn(&T) -> Vec<f64>,
        write: impl Fn(&mut T, &[f64]),
        eval: impl Fn(&T) -> Result<f64>,
        analytic: &[f64],
    ) -> Result<GradCheckReport> {
        let point = read(state);
        self.scalar(
            &name,
            |x| {
                let mut s = state.clone();
                write(&mut s, x);
                eval(&s).unwrap_or(f64::NAN)
            },
            analytic,
            &point,
        )
    }
}

fn check_generator(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<Vec<GradCheckReport>> {
    #[derive(Clone)]
    struct S {
        v: Vec<f64>,
        gen: FilterGenerator,
    }
    let (d, dc) = (6, 3);
    let s = S {
        v: random_vec(d, rng),
        gen: FilterGenerator {
            base: random_matrix(dc, dc, rng),
            weights: random_matrix(dc * dc, d, rng),
        },
    };
    let w = random_matrix(dc, dc, rng);
    let eval = |s: &S| Ok(generate_filter(&s.v, &s.gen)?.inner(&w));
    let g = generate_filter_backward(&s.v, &s.gen, &w)?;
    let op = GradOp::GenerateChannelFilter.name();
    Ok(vec![
        ck.block(format!("{op}/v"), &s, |s| s.v.clone(), |s, x| s.v.copy_from_slice(x), eval, &g.v)?,
        ck.block(
            format!("{op}/base"),
            &s,
            |s| s.gen.base.as_slice().to_vec(),
            |s, x| s.gen.base.as_mut_slice().copy_from_slice(x),
            eval,
            g.base.as_slice(),
        )?,
        ck.block(
            format!("{op}/weights"),
            &s,
            |s| s.gen.weights.as_slice().to_vec(),
            |s, x| s.gen.weights.as_mut_slice().copy_from_slice(x),
            eval,
            g.weights.as_slice(),
        )?,
    ])
}

fn check_adapter(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<Vec<GradCheckReport>> {
    #[derive(Clone)]
    struct S {
        prev: Matrix,
        cur: Matrix,
        v: Vec<f64>,
        adapter: Adapter,
    }
    let dc = 4;
    let s = S {
        prev: random_matrix(dc, dc, rng),
        cur: random_matrix(dc, dc, rng),
        v: random_vec(dc, rng),
        adapter: Adapter {
            row_gate: random_matrix(dc, dc, rng),
            col_gate: random_matrix(dc, dc, rng),
        },
    };
    let w = random_matrix(dc, dc, rng);
    let eval = |s: &S| Ok(adapt_filter(&s.prev, &s.cur, &s.v, &s.adapter)?.inner(&w));
    let g = adapt_filter_backward(&s.prev, &s.cur, &s.v, &s.adapter, &w)?;
    let op = GradOp::AdaptFilter.name();
    Ok(vec![
        ck.block(
            format!("{op}/prev"),
            &s,
            |s| s.prev.as_slice().to_vec(),
            |s, x| s.prev.as_mut_slice().copy_from_slice(x),
            eval,
            g.prev.as_slice(),
        )?,
        ck.block(
            format!("{op}/cur"),
            &s,
            |s| s.cur.as_slice().to_vec(),
            |s, x| s.cur.as_mut_slice().copy_from_slice(x),
            eval,
            g.cur.as_slice(),
        )?,
        ck.block(format!("{op}/v"), &s, |s| s.v.clone(), |s, x| s.v.copy_from_slice(x), eval, &g.v)?,
        ck.block(
            format!("{op}/row_gate"),
            &s,
            |s| s.adapter.row_gate.as_slice().to_vec(),
            |s, x| s.adapter.row_gate.as_mut_slice().copy_from_slice(x),
            eval,
            g.row_gate.as_slice(),
        )?,
        ck.block(
            format!("{op}/col_gate"),
            &s,
            |s| s.adapter.col_gate.as_slice().to_vec(),
            |s, x| s.adapter.col_gate.as_mut_slice().copy_from_slice(x),
            eval,
            g.col_gate.as_slice(),
        )?,
    ])
}

fn random_static(points: usize, k: usize, dc: usize, rng: &mut ChaCha8Rng) -> StaticMixParams {
    let per = points / k;
    let scale = |mut m: Matrix, s: f64| {
        m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        m
    };
    StaticMixParams {
        intra: scale(random_matrix(per * dc, per * dc, rng), 0.3),
        inter: scale(random_matrix(k * dc, k * dc, rng), 0.3),
        channel: random_matrix(dc, dc, rng),
        channel_bias: random_vec(dc, rng).into(),
    }
}

fn random_norm(dim: usize, rng: &mut ChaCha8Rng) -> NormParams {
    NormParams {
        gain: (0..dim).map(|_| uniform(rng, 1.0, 2.0)).collect(),
        shift: (0..dim).map(|_| uniform(rng, -0.5, 0.5)).collect(),
    }
}

#[derive(Clone)]
struct CascadeState {
    features: Matrix,
    current: Matrix,
    reused: Vec<Matrix>,
    content: Vec<f64>,
    adapters: Vec<Adapter>,
    statics: Vec<StaticMixParams>,
    norms: Vec<NormParams>,
    spatial_groups: usize,
}

impl CascadeState {
    fn run<R>(&self, f: impl FnOnce(&CascadeInputs<'_>) -> R) -> R {
        let reused: Vec<&Matrix> = self.reused.iter().collect();
        let inputs = CascadeInputs {
            features: &self.features,
            current: &self.current,
            reused: &reused,
            content: &self.content,
            adapters: &self.adapters,
            statics: &self.statics,
            norms: &self.norms,
            spatial_groups: self.spatial_groups,
        };
        f(&inputs)
    }
}

fn check_cascade(rng: &mut ChaCha8Rng, reuse: usize, ck: &mut Checker) -> Result<Vec<GradCheckReport>> {
    let (p, k, dc) = (4, 2, 8);
    let mut draws = 0;
    let s = loop {
        let s = CascadeState {
            features: random_matrix(p, dc, rng),
            current: random_matrix(dc, dc, rng),
            reused: (0..reuse).map(|_| random_matrix(dc, dc, rng)).collect(),
            content: random_vec(dc, rng),
            adapters: (0..reuse)
                .map(|_| Adapter {
                    row_gate: random_matrix(dc, dc, rng),
                    col_gate: random_matrix(dc, dc, rng),
                })
                .collect(),
            statics: (0..reuse).map(|_| random_static(p, k, dc, rng)).collect(),
            norms: (0..=reuse).map(|_| random_norm(dc, rng)).collect(),
            spatial_groups: k,
        };
        let margin = s.run(cascade_group_forward)?.relu_margin();
        draws += 1;
        if margin > RELU_MARGIN {
            break s;
        }
        if draws >= MAX_DRAWS {
            return Err(DecoderError::Config("no cascade probe away from relu kinks".into()));
        }
    };
    let w = random_matrix(p, dc, rng);
    let eval = |s: &CascadeState| Ok(s.run(cascade_group_forward)?.output.inner(&w));
    let g = s.run(|inputs| {
        let tape = cascade_group_forward(inputs)?;
        cascade_group_backward(inputs, &tape, &w)
    })?;
    let op = format!("{}[reuse={reuse}]", GradOp::CascadeChannelMix.name());
    let mut out = vec![
        ck.block(
            format!("{op}/features"),
            &s,
            |s| s.features.as_slice().to_vec(),
            |s, x| s.features.as_mut_slice().copy_from_slice(x),
            eval,
            g.features.as_slice(),
        )?,
        ck.block(
            format!("{op}/current"),
            &s,
            |s| s.current.as_slice().to_vec(),
            |s, x| s.current.as_mut_slice().copy_from_slice(x),
            eval,
            g.current.as_slice(),
        )?,
        ck.block(
            format!("{op}/norms"),
            &s,
            |s| flatten(s.norms.iter().flat_map(|n| [&n.gain[..], &n.shift[..]])),
            |s, x| scatter(s.norms.iter_mut().flat_map(|n| [&mut n.gain[..], &mut n.shift[..]]), x),
            eval,
            &flatten(g.norms.iter().flat_map(|n| [&n.gain[..], &n.shift[..]])),
        )?,
    ];
    if reuse == 0 {
        return Ok(out);
    }
    out.push(ck.block(
        format!("{op}/reused"),
        &s,
        |s| flatten(s.reused.iter().map(Matrix::as_slice)),
        |s, x| scatter(s.reused.iter_mut().map(Matrix::as_mut_slice), x),
        eval,
        &flatten(g.reused.iter().map(Matrix::as_slice)),
    )?);
    out.push(ck.block(
        format!("{op}/content"),
        &s,
        |s| s.content.clone(),
        |s, x| s.content.copy_from_slice(x),
        eval,
        &g.content,
    )?);
    out.push(ck.block(
        format!("{op}/adapters"),
        &s,
        |s| flatten(s.adapters.iter().flat_map(|a| [a.row_gate.as_slice(), a.col_gate.as_slice()])),
        |s, x| {
            scatter(
                s.adapters
                    .iter_mut()
                    .flat_map(|a| [a.row_gate.as_mut_slice(), a.col_gate.as_mut_slice()]),
                x,
            )
        },
        eval,
        &flatten(g.adapters.iter().flat_map(|a| [a.row_gate.as_slice(), a.col_gate.as_slice()])),
    )?);
    out.push(ck.block(
        format!("{op}/statics"),
        &s,
        |s| flatten(s.statics.iter().flat_map(static_parts)),
        |s, x| scatter(s.statics.iter_mut().flat_map(static_parts_mut), x),
        eval,
        &flatten(g.statics.iter().flat_map(static_parts)),
    )?);
    Ok(out)
}

fn static_parts(p: &StaticMixParams) -> [&[f64]; 4] {
    [p.intra.as_slice(), p.inter.as_slice(), p.channel.as_slice(), &p.channel_bias[..]]
}

fn static_parts_mut(p: &mut StaticMixParams) -> [&mut [f64]; 4] {
    let StaticMixParams {
        intra,
        inter,
        channel,
        channel_bias,
    } = p;
    [
        intra.as_mut_slice(),
        inter.as_mut_slice(),
        channel.as_mut_slice(),
        &mut channel_bias[..],
    ]
}

fn check_static(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<Vec<GradCheckReport>> {
    #[derive(Clone)]
    struct S {
        features: SampledFeatures,
        params: StaticMixParams,
    }
    let (groups, p, k, dc) = (2, 8, 2, 3);
    let s = S {
        features: SampledFeatures {
            groups: (0..groups).map(|_| random_matrix(p, dc, rng)).collect(),
        },
        params: random_static(p, k, dc, rng),
    };
    let w: Vec<Matrix> = (0..groups).map(|_| random_matrix(p, dc, rng)).collect();
    let eval = |s: &S| {
        let out = static_group_mix(&s.features, k, &s.params)?;
        Ok(out.groups.iter().zip(&w).map(|(o, w)| o.inner(w)).sum())
    };
    let mut d_features = Vec::new();
    let mut d_params: Vec<f64> = vec![0.0; flatten(static_parts(&s.params)).len()];
    for (x, up) in s.features.groups.iter().zip(&w) {
        let g = static_mix_backward(x, &s.params, k, up)?;
        d_features.extend_from_slice(g.input.as_slice());
        for (a, b) in d_params.iter_mut().zip(flatten(static_parts(&g.params))) {
            *a += b;
        }
    }
    let op = GradOp::StaticGroupMix.name();
    Ok(vec![
        ck.block(
            format!("{op}/features"),
            &s,
            |s| flatten(s.features.groups.iter().map(Matrix::as_slice)),
            |s, x| scatter(s.features.groups.iter_mut().map(Matrix::as_mut_slice), x),
            eval,
            &d_features,
        )?,
        ck.block(
            format!("{op}/params"),
            &s,
            |s| flatten(static_parts(&s.params)),
            |s, x| scatter(static_parts_mut(&mut s.params), x),
            eval,
            &d_params,
        )?,
    ])
}

fn check_sampler(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<Vec<GradCheckReport>> {
    #[derive(Clone)]
    struct S {
        v: Vec<f64>,
        params: SamplerParams,
    }
    let (groups, points, k, d) = (2, 8, 2, 4);
    let levels = (2..=4)
        .map(|l| {
            let n = 64usize >> l;
            let grid = FeatureGrid::from_fn(n, n, d, |_, _, _| rng.gen_range(-1.0..1.0))?;
            Ok(PyramidLevel {
                log2_stride: l as f64,
                grid,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pyramid = Pyramid::new(levels)?;
    let mut draws = 0;
    let (s, b) = loop {
        let b = BoxXYZR {
            x: uniform(rng, 20.0, 44.0),
            y: uniform(rng, 20.0, 44.0),
            z: uniform(rng, 2.2, 3.8),
            r: uniform(rng, -0.5, 0.5),
        };
        let mut params = SamplerParams::zeros(groups, points, k, d);
        let small = |m: &mut [f64], rng: &mut ChaCha8Rng, s: f64| m.iter_mut().for_each(|x| *x = s * rng.gen_range(-1.0..1.0));
        small(params.group_weight.as_mut_slice(), rng, 0.2);
        small(params.point_weight.as_mut_slice(), rng, 0.2);
        small(&mut params.group_bias[..], rng, 0.5);
        small(&mut params.point_bias[..], rng, 0.3);
        let s = S {
            v: random_vec(d, rng),
            params,
        };
        let ok = sampling_locations(&s.v, &b, &s.params)?
            .iter()
            .all(|p| pyramid.cell_margin(p.x, p.y, p.z) > GRID_MARGIN && pyramid.level_margin(p.z) > GRID_MARGIN);
        draws += 1;
        if ok {
            break (s, b);
        }
        if draws >= MAX_DRAWS {
            return Err(DecoderError::Config("no sampler probe away from grid lines".into()));
        }
    };
    let w: Vec<Matrix> = (0..groups).map(|_| random_matrix(points, d / groups, rng)).collect();
    let eval = |s: &S| {
        let out = sample_points(&s.v, &b, &s.params, &pyramid)?;
        Ok(out.groups.iter().zip(&w).map(|(o, w)| o.inner(w)).sum())
    };
    let g = sample_points_backward(&s.v, &b, &s.params, &pyramid, &SampledFeatures { groups: w.clone() })?;
    let op = GradOp::SamplePoints.name();
    Ok(vec![
        ck.block(format!("{op}/v"), &s, |s| s.v.clone(), |s, x| s.v.copy_from_slice(x), eval, &g.v)?,
        ck.block(
            format!("{op}/group_weight"),
            &s,
            |s| s.params.group_weight.as_slice().to_vec(),
            |s, x| s.params.group_weight.as_mut_slice().copy_from_slice(x),
            eval,
            g.group_weight.as_slice(),
        )?,
        ck.block(
            format!("{op}/group_bias"),
            &s,
            |s| s.params.group_bias.to_vec(),
            |s, x| s.params.group_bias.copy_from_slice(x),
            eval,
            &g.group_bias,
        )?,
        ck.block(
            format!("{op}/point_weight"),
            &s,
            |s| s.params.point_weight.as_slice().to_vec(),
            |s, x| s.params.point_weight.as_mut_slice().copy_from_slice(x),
            eval,
            g.point_weight.as_slice(),
        )?,
        ck.block(
            format!("{op}/point_bias"),
            &s,
            |s| s.params.point_bias.to_vec(),
            |s, x| s.params.point_bias.copy_from_slice(x),
            eval,
            &g.point_bias,
        )?,
    ])
}

fn check_spatial(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<Vec<GradCheckReport>> {
    #[derive(Clone)]
    struct S {
        reused: Vec<Matrix>,
        fresh: Matrix,
        v: Vec<f64>,
        adapters: Vec<Adapter>,
    }
    let (p_in, p_out, dc, n) = (4, 12, 3, 2);
    let s = S {
        reused: (0..n).map(|_| random_matrix(8, 4, rng)).collect(),
        fresh: random_matrix(p_out - n * p_in, p_in, rng),
        v: random_vec(dc, rng),
        adapters: (0..n)
            .map(|_| Adapter {
                row_gate: random_matrix(8, dc, rng),
                col_gate: random_matrix(4, dc, rng),
            })
            .collect(),
    };
    let w = random_matrix(p_out, p_in, rng);
    let eval = |s: &S| {
        let reused: Vec<&Matrix> = s.reused.iter().collect();
        Ok(build_spatial_filter(&reused, &s.fresh, &s.v, &s.adapters, p_in, p_out)?.inner(&w))
    };
    let reused: Vec<&Matrix> = s.reused.iter().collect();
    let g = build_spatial_filter_backward(&reused, &s.fresh, &s.v, &s.adapters, p_in, p_out, &w)?;
    let op = GradOp::BuildSpatialFilter.name();
    Ok(vec![
        ck.block(
            format!("{op}/reused"),
            &s,
            |s| flatten(s.reused.iter().map(Matrix::as_slice)),
            |s, x| scatter(s.reused.iter_mut().map(Matrix::as_mut_slice), x),
            eval,
            &flatten(g.reused.iter().map(Matrix::as_slice)),
        )?,
        ck.block(
            format!("{op}/fresh"),
            &s,
            |s| s.fresh.as_slice().to_vec(),
            |s, x| s.fresh.as_mut_slice().copy_from_slice(x),
            eval,
            g.fresh.as_slice(),
        )?,
        ck.block(format!("{op}/v"), &s, |s| s.v.clone(), |s, x| s.v.copy_from_slice(x), eval, &g.v)?,
        ck.block(
            format!("{op}/adapters"),
            &s,
            |s| flatten(s.adapters.iter().flat_map(|a| [a.row_gate.as_slice(), a.col_gate.as_slice()])),
            |s, x| {
                scatter(
                    s.adapters
                        .iter_mut()
                        .flat_map(|a| [a.row_gate.as_mut_slice(), a.col_gate.as_mut_slice()]),
                    x,
                )
            },
            eval,
            &flatten(g.adapters.iter().flat_map(|a| [a.row_gate.as_slice(), a.col_gate.as_slice()])),
        )?,
    ])
}

fn check_focal(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<Vec<GradCheckReport>> {
    let c = 6;
    let scores: Vec<f64> = (0..c).map(|_| uniform(rng, 0.05, 0.95)).collect();
    let target: Vec<f64> = (0..c).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    let grad = focal_loss_grad(&scores, &target, FOCAL_ALPHA, FOCAL_GAMMA).map_err(|e| DecoderError::Config(e.to_string()))?;
    let report = ck.scalar(
        GradOp::FocalLoss.name(),
        |x| focal_loss_multihot(x, &target, FOCAL_ALPHA, FOCAL_GAMMA).unwrap_or(f64::NAN),
        &grad,
        &scores,
    )?;
    Ok(vec![report])
}

fn random_box(rng: &mut ChaCha8Rng, image: &ImageSize) -> [f64; 4] {
    let x1 = uniform(rng, 0.0, 0.7 * image.width);
    let y1 = uniform(rng, 0.0, 0.7 * image.height);
    [
        x1,
        y1,
        x1 + uniform(rng, 5.0, 0.3 * image.width),
        y1 + uniform(rng, 5.0, 0.3 * image.height),
    ]
}

fn check_localization(rng: &mut ChaCha8Rng, ck: &mut Checker) -> Result<Vec<GradCheckReport>> {
    let image = ImageSize::new(100.0, 80.0)?;
    let mut draws = 0;
    let (pred, target) = loop {
        let p = random_box(rng, &image);
        let t = random_box(rng, &image);
        // every pair of same-axis coordinates must be apart
        let apart = (0..4).all(|a| (0..4).filter(|b| b % 2 == a % 2).all(|b| (p[a] - t[b]).abs() > BOX_MARGIN));
        draws += 1;
        if apart {
            break (p, t);
        }
        if draws >= MAX_DRAWS {
            return Err(DecoderError::Config("no localization probe away from kinks".into()));
        }
    };
    let target = BoxXYXY::new(target[0], target[1], target[2], target[3])?;
    let pred_box = BoxXYXY::new(pred[0], pred[1], pred[2], pred[3])?;
    let (g_l1, g_giou) = localization_grad(&pred_box, &target, &image);
    let term = |x: &[f64], which: usize| match BoxXYXY::new(x[0], x[1], x[2], x[3]) {
        Ok(b) => {
            let (l1, giou) = localization_loss(&b, &target, &image);
            if which == 0 {
                l1
            } else {
                giou
            }
        }
        Err(_) => f64::NAN,
    };
    let op = GradOp::LocalizationLoss.name();
    Ok(vec![
        ck.scalar(&format!("{op}/l1"), |x| term(x, 0), &g_l1, &pred)?,
        ck.scalar(&format!("{op}/giou"), |x| term(x, 1), &g_giou, &pred)?,
    ])
}

/// Largest error across `reports`, with the report that produced it.
pub fn worst(reports: &[GradCheckReport]) -> Option<&GradCheckReport> {
    reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
}
