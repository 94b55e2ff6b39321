use serde::{Deserialize, Serialize};

use super::filters::{adapt_filter, adapt_filter_backward, Adapter};
use super::forward::FilterBank;
use super::params::StageParams;
use super::{DecoderConfig, DecoderError, Result};
use crate::numerics::{layer_norm, layer_norm_backward, relu, Matrix, Vector, LAYER_NORM_EPS};

/// Per query: one `P_in × D_C` matrix per channel group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledFeatures {
    pub groups: Vec<Matrix>,
}

impl SampledFeatures {
    pub fn points(&self) -> usize {
        self.groups.first().map_or(0, Matrix::rows)
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(Matrix::is_finite)
    }
}

/// Affine part of a row-wise layer norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gain: Vector,
    pub shift: Vector,
}

impl NormParams {
    pub fn identity(dim: usize) -> Self {
        NormParams {
            gain: Vector::filled(dim, 1.0),
            shift: Vector::zeros(dim),
        }
    }
}

pub(crate) fn norm_rows(x: &Matrix, norm: &NormParams) -> Result<Matrix> {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let y = layer_norm(x.row(r), &norm.gain, &norm.shift, LAYER_NORM_EPS)?;
        out.row_mut(r).copy_from_slice(&y);
    }
    Ok(out)
}

/// Returns (d input, d norm) for a row-wise layer norm.
pub(crate) fn norm_rows_backward(x: &Matrix, norm: &NormParams, upstream: &Matrix) -> Result<(Matrix, NormParams)> {
    let mut d_x = Matrix::zeros(x.rows(), x.cols());
    let mut d_norm = NormParams {
        gain: Vector::zeros(x.cols()),
        shift: Vector::zeros(x.cols()),
    };
    for r in 0..x.rows() {
        let g = layer_norm_backward(x.row(r), &norm.gain, LAYER_NORM_EPS, upstream.row(r))?;
        d_x.row_mut(r).copy_from_slice(&g.input);
        for c in 0..x.cols() {
            d_norm.gain[c] += g.gain[c];
            d_norm.shift[c] += g.shift[c];
        }
    }
    Ok((d_x, d_norm))
}

/// 1×1 mixing of every point's channel vector: `x · M`.
pub fn mix_rows(x: &Matrix, kernel: &Matrix) -> Result<Matrix> {
    Ok(x.matmul(kernel)?)
}

/// Grouped static spatial mixing followed by a static channel mixing.
///
/// Points are viewed as `K` spatial groups of `P/K` points each. `intra`
/// acts on one group's flattened `(P/K)·D_C` features, `inter` on the
/// `K·D_C` features that share a position inside their groups. The two
/// branches are added to the input before the channel map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticMixParams {
    pub intra: Matrix,
    pub inter: Matrix,
    pub channel: Matrix,
    pub channel_bias: Vector,
}

impl StaticMixParams {
    /// Zero spatial branches and an identity channel map.
    pub fn identity(points: usize, spatial_groups: usize, dim: usize) -> Self {
        let per_group = points / spatial_groups;
        StaticMixParams {
            intra: Matrix::zeros(per_group * dim, per_group * dim),
            inter: Matrix::zeros(spatial_groups * dim, spatial_groups * dim),
            channel: Matrix::identity(dim),
            channel_bias: Vector::zeros(dim),
        }
    }

    /// Weights of the two grouped spatial maps.
    pub fn spatial_param_count(&self) -> usize {
        self.intra.as_slice().len() + self.inter.as_slice().len()
    }
}

fn check_static(x: &Matrix, params: &StaticMixParams, k: usize) -> Result<(usize, usize)> {
    let p = x.rows();
    let d = x.cols();
    if k == 0 || p % k != 0 {
        return Err(DecoderError::Divisibility { points: p, groups: k });
    }
    let per = p / k;
    if params.intra.shape() != (per * d, per * d)
        || params.inter.shape() != (k * d, k * d)
        || params.channel.shape() != (d, d)
        || params.channel_bias.len() != d
    {
        return Err(DecoderError::Config(format!(
            "static mix parameters do not fit {p} points x {d} channels with {k} groups"
        )));
    }
    Ok((per, d))
}

/// Point index of position `m` inside spatial group `k`.
fn point(k: usize, m: usize, per: usize) -> usize {
    k * per + m
}

fn spatial_branches(x: &Matrix, params: &StaticMixParams, k: usize, per: usize, d: usize) -> Result<Matrix> {
    let mut y = x.clone();
    for g in 0..k {
        let flat: Vec<f64> = (0..per).flat_map(|m| x.row(point(g, m, per)).iter().copied()).collect();
        let out = params.intra.mul_vec(&flat)?;
        for m in 0..per {
            for c in 0..d {
                y[(point(g, m, per), c)] += out[m * d + c];
            }
        }
    }
    for m in 0..per {
        let flat: Vec<f64> = (0..k).flat_map(|g| x.row(point(g, m, per)).iter().copied()).collect();
        let out = params.inter.mul_vec(&flat)?;
        for g in 0..k {
            for c in 0..d {
                y[(point(g, m, per), c)] += out[g * d + c];
            }
        }
    }
    Ok(y)
}

/// `(x + intra(x) + inter(x)) · channel + bias` for one channel group.
pub fn static_mix_forward(x: &Matrix, params: &StaticMixParams, spatial_groups: usize) -> Result<Matrix> {
    let (per, d) = check_static(x, params, spatial_groups)?;
    let y = spatial_branches(x, params, spatial_groups, per, d)?;
    let mut out = y.matmul(&params.channel)?;
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(params.channel_bias.iter()) {
            *o += b;
        }
    }
    Ok(out)
}

pub struct StaticMixGrad {
    pub input: Matrix,
    pub params: StaticMixParams,
}

pub fn static_mix_backward(
    x: &Matrix,
    params: &StaticMixParams,
    spatial_groups: usize,
    upstream: &Matrix,
) -> Result<StaticMixGrad> {
    let k = spatial_groups;
    let (per, d) = check_static(x, params, k)?;
    let y = spatial_branches(x, params, k, per, d)?;
    let d_channel = y.transpose().matmul(upstream)?;
    let mut d_bias = Vector::zeros(d);
    for r in 0..upstream.rows() {
        for (b, u) in d_bias.iter_mut().zip(upstream.row(r)) {
            *b += u;
        }
    }
    let d_y = upstream.matmul(&params.channel.transpose())?;

    let mut d_x = d_y.clone();
    let mut d_intra = Matrix::zeros(params.intra.rows(), params.intra.cols());
    let mut d_inter = Matrix::zeros(params.inter.rows(), params.inter.cols());
    for g in 0..k {
        let flat: Vec<f64> = (0..per).flat_map(|m| x.row(point(g, m, per)).iter().copied()).collect();
        let up: Vec<f64> = (0..per).flat_map(|m| d_y.row(point(g, m, per)).iter().copied()).collect();
        d_intra.add_outer(&up, &flat, 1.0);
        let back = params.intra.tmul_vec(&up)?;
        for m in 0..per {
            for c in 0..d {
                d_x[(point(g, m, per), c)] += back[m * d + c];
            }
        }
    }
    for m in 0..per {
        let flat: Vec<f64> = (0..k).flat_map(|g| x.row(point(g, m, per)).iter().copied()).collect();
        let up: Vec<f64> = (0..k).flat_map(|g| d_y.row(point(g, m, per)).iter().copied()).collect();
        d_inter.add_outer(&up, &flat, 1.0);
        let back = params.inter.tmul_vec(&up)?;
        for g in 0..k {
            for c in 0..d {
                d_x[(point(g, m, per), c)] += back[g * d + c];
            }
        }
    }
    Ok(StaticMixGrad {
        input: d_x,
        params: StaticMixParams {
            intra: d_intra,
            inter: d_inter,
            channel: d_channel,
            channel_bias: d_bias,
        },
    })
}

/// [`static_mix_forward`] applied to every channel group with shared parameters.
pub fn static_group_mix(
    features: &SampledFeatures,
    spatial_groups: usize,
    params: &StaticMixParams,
) -> Result<SampledFeatures> {
    Ok(SampledFeatures {
        groups: features
            .groups
            .iter()
            .map(|x| static_mix_forward(x, params, spatial_groups))
            .collect::<Result<_>>()?,
    })
}

/// Everything one channel group needs for the cascade.
pub struct CascadeInputs<'a> {
    /// `P × D_C` sampled features of the group.
    pub features: &'a Matrix,
    /// Kernel generated at the current stage.
    pub current: &'a Matrix,
    /// Stored kernels of stages `γ_i .. i-1`, oldest first.
    pub reused: &'a [&'a Matrix],
    /// The group's slice of the content vector.
    pub content: &'a [f64],
    pub adapters: &'a [Adapter],
    pub statics: &'a [StaticMixParams],
    /// One per dynamic mixing.
    pub norms: &'a [NormParams],
    pub spatial_groups: usize,
}

impl CascadeInputs<'_> {
    fn check(&self) -> Result<()> {
        let n = self.reused.len();
        if self.adapters.len() < n || self.statics.len() < n || self.norms.len() < n + 1 {
            return Err(DecoderError::Config(format!(
                "cascade with {n} reused filters needs {n} adapters, {n} static layers and {} norms",
                n + 1
            )));
        }
        Ok(())
    }
}

/// Intermediate values of one cascade pass.
pub struct CascadeTape {
    /// Inputs to each dynamic mixing.
    pub mix_inputs: Vec<Matrix>,
    /// Kernel used by each dynamic mixing.
    pub kernels: Vec<Matrix>,
    /// Mixing outputs before normalization.
    pub pre_norm: Vec<Matrix>,
    /// Normalized values before the relu.
    pub normed: Vec<Matrix>,
    pub output: Matrix,
}

impl CascadeTape {
    /// Smallest distance of any relu input from the kink.
    pub fn relu_margin(&self) -> f64 {
        self.normed
            .iter()
            .flat_map(|m| m.as_slice().iter())
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }
}

/// Dynamic mixing with the current kernel, then for every reused kernel a
/// static layer followed by a dynamic mixing with the adapted kernel. Each
/// dynamic mixing is followed by layer norm and relu.
pub fn cascade_group_forward(inputs: &CascadeInputs<'_>) -> Result<CascadeTape> {
    inputs.check()?;
    let mut tape = CascadeTape {
        mix_inputs: Vec::new(),
        kernels: Vec::new(),
        pre_norm: Vec::new(),
        normed: Vec::new(),
        output: Matrix::zeros(0, 0),
    };
    let mut h = inputs.features.clone();
    for step in 0..=inputs.reused.len() {
        let (mix_input, kernel) = if step == 0 {
            (h, inputs.current.clone())
        } else {
            let k = step - 1;
            let u = static_mix_forward(&h, &inputs.statics[k], inputs.spatial_groups)?;
            let m = adapt_filter(inputs.reused[k], inputs.current, inputs.content, &inputs.adapters[k])?;
            (u, m)
        };
        let a = mix_rows(&mix_input, &kernel)?;
        let n = norm_rows(&a, &inputs.norms[step])?;
        h = Matrix::from_fn(n.rows(), n.cols(), |r, c| relu(n[(r, c)]));
        tape.mix_inputs.push(mix_input);
        tape.kernels.push(kernel);
        tape.pre_norm.push(a);
        tape.normed.push(n);
    }
    tape.output = h;
    Ok(tape)
}

pub struct CascadeGrad {
    pub features: Matrix,
    pub current: Matrix,
    pub reused: Vec<Matrix>,
    pub content: Vector,
    pub adapters: Vec<Adapter>,
    pub statics: Vec<StaticMixParams>,
    pub norms: Vec<NormParams>,
}

pub fn cascade_group_backward(inputs: &CascadeInputs<'_>, tape: &CascadeTape, upstream: &Matrix) -> Result<CascadeGrad> {
    let n = inputs.reused.len();
    let (_, d) = inputs.current.shape();
    let mut d_current = Matrix::zeros(d, d);
    let mut d_content = Vector::zeros(inputs.content.len());
    let mut d_reused = vec![Matrix::zeros(0, 0); n];
    let mut d_adapters = vec![Adapter::zeros(0, 0, 0); n];
    let mut d_statics: Vec<Option<StaticMixParams>> = vec![None; n];
    let mut d_norms = vec![NormParams::identity(0); n + 1];
    let mut d_h = upstream.clone();
    let mut d_features = Matrix::zeros(0, 0);
    for step in (0..=n).rev() {
        let normed = &tape.normed[step];
        let d_n = Matrix::from_fn(normed.rows(), normed.cols(), |r, c| {
            if normed[(r, c)] > 0.0 {
                d_h[(r, c)]
            } else {
                0.0
            }
        });
        let (d_a, d_norm) = norm_rows_backward(&tape.pre_norm[step], &inputs.norms[step], &d_n)?;
        d_norms[step] = d_norm;
        let kernel = &tape.kernels[step];
        let d_in = d_a.matmul(&kernel.transpose())?;
        let d_kernel = tape.mix_inputs[step].transpose().matmul(&d_a)?;
        if step == 0 {
            d_current.add_scaled(&d_kernel, 1.0);
            d_features = d_in;
        } else {
            let k = step - 1;
            let ag = adapt_filter_backward(inputs.reused[k], inputs.current, inputs.content, &inputs.adapters[k], &d_kernel)?;
            d_current.add_scaled(&ag.cur, 1.0);
            for (a, b) in d_content.iter_mut().zip(ag.v.iter()) {
                *a += b;
            }
            d_reused[k] = ag.prev;
            d_adapters[k] = Adapter {
                row_gate: ag.row_gate,
                col_gate: ag.col_gate,
            };
            // input of the static layer is the previous step's output
            let prev_out = if k == 0 {
                Matrix::from_fn(tape.normed[0].rows(), d, |r, c| relu(tape.normed[0][(r, c)]))
            } else {
                Matrix::from_fn(tape.normed[k].rows(), d, |r, c| relu(tape.normed[k][(r, c)]))
            };
            let sg = static_mix_backward(&prev_out, &inputs.statics[k], inputs.spatial_groups, &d_in)?;
            d_statics[k] = Some(sg.params);
            d_h = sg.input;
        }
    }
    Ok(CascadeGrad {
        features: d_features,
        current: d_current,
        reused: d_reused,
        content: d_content,
        adapters: d_adapters,
        statics: d_statics.into_iter().map(|s| s.expect("filled")).collect(),
        norms: d_norms,
    })
}

/// Cascade channel mixing for one query across all channel groups at
/// `stage`, reading reused kernels from the query's bank.
pub fn cascade_channel_mix(
    features: &SampledFeatures,
    bank: &FilterBank,
    current: &[Matrix],
    content: &[f64],
    stage: usize,
    params: &StageParams,
    config: &DecoderConfig,
) -> Result<SampledFeatures> {
    let reuse = config.channel_reuse_at(stage);
    if bank.depth() < stage - 1 || bank.depth() < reuse {
        return Err(DecoderError::BankTooShallow {
            kind: "channel",
            needed: reuse.max(stage - 1),
            available: bank.depth(),
        });
    }
    let dc = config.group_dim;
    let k = config.spatial_groups(stage);
    let mut groups = Vec::with_capacity(config.groups);
    for (g, x) in features.groups.iter().enumerate() {
        let reused = bank.channel_window(g, stage - reuse, stage - 1);
        let inputs = CascadeInputs {
            features: x,
            current: &current[g],
            reused: &reused,
            content: &content[g * dc..(g + 1) * dc],
            adapters: &params.channel_adapters,
            statics: &params.cascade_statics,
            norms: &params.cascade_norms,
            spatial_groups: k,
        };
        groups.push(cascade_group_forward(&inputs)?.output);
    }
    Ok(SampledFeatures { groups })
}
