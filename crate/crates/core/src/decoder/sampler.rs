use serde::{Deserialize, Serialize};

use super::mixing::SampledFeatures;
use super::{DecoderError, Result};
use crate::geometry::BoxXYZR;
use crate::numerics::{FeatureGrid, Matrix, Vector};

/// One feature map whose cells are `2^log2_stride` pixels wide.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub log2_stride: f64,
    pub grid: FeatureGrid,
}

impl PyramidLevel {
    pub fn stride(&self) -> f64 {
        self.log2_stride.exp2()
    }
}

/// Feature maps ordered by increasing stride, all with the same channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn new(mut levels: Vec<PyramidLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(DecoderError::Config("pyramid needs at least one level".into()));
        }
        levels.sort_by(|a, b| a.log2_stride.total_cmp(&b.log2_stride));
        let channels = levels[0].grid.channels();
        for pair in levels.windows(2) {
            if pair[0].log2_stride == pair[1].log2_stride {
                return Err(DecoderError::Config(format!(
                    "two pyramid levels share log2 stride {}",
                    pair[0].log2_stride
                )));
            }
        }
        if levels.iter().any(|l| l.grid.channels() != channels) {
            return Err(DecoderError::Config("pyramid levels differ in channel count".into()));
        }
        Ok(Pyramid { levels })
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].grid.channels()
    }

    /// Levels touched at scale `z` with their weights and d weight / dz.
    pub fn level_weights(&self, z: f64) -> Vec<(usize, f64, f64)> {
        let n = self.levels.len();
        let first = self.levels[0].log2_stride;
        let last = self.levels[n - 1].log2_stride;
        if n == 1 || z <= first {
            return vec![(0, 1.0, 0.0)];
        }
        if z >= last {
            return vec![(n - 1, 1.0, 0.0)];
        }
        let i = self.levels.iter().rposition(|l| l.log2_stride <= z).unwrap_or(0);
        let (lo, hi) = (self.levels[i].log2_stride, self.levels[i + 1].log2_stride);
        let span = hi - lo;
        let t = (z - lo) / span;
        vec![(i, 1.0 - t, -1.0 / span), (i + 1, t, 1.0 / span)]
    }

    /// Distance of `z` from the nearest level, where the interpolation has a kink.
    pub fn level_margin(&self, z: f64) -> f64 {
        self.levels
            .iter()
            .map(|l| (z - l.log2_stride).abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// Distance of a pixel position from the nearest cell line on any level
    /// it reads from.
    pub fn cell_margin(&self, x: f64, y: f64, z: f64) -> f64 {
        self.level_weights(z)
            .iter()
            .map(|&(l, _, _)| {
                let s = self.levels[l].stride();
                let gx = x / s - 0.5;
                let gy = y / s - 0.5;
                let dx = (gx - gx.round()).abs();
                let dy = (gy - gy.round()).abs();
                dx.min(dy)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Features at pixel position (x, y) and scale `z`, plus derivatives
    /// with respect to x, y and z.
    pub fn sample(&self, x: f64, y: f64, z: f64) -> (Vector, Vector, Vector, Vector) {
        let c = self.channels();
        let mut value = Vector::zeros(c);
        let mut d_x = Vector::zeros(c);
        let mut d_y = Vector::zeros(c);
        let mut d_z = Vector::zeros(c);
        for (l, w, dw) in self.level_weights(z) {
            let level = &self.levels[l];
            let s = level.stride();
            let b = level.grid.bilinear_sample_with_grad(x / s - 0.5, y / s - 0.5);
            for k in 0..c {
                value[k] += w * b.value[k];
                d_x[k] += w * b.d_x[k] / s;
                d_y[k] += w * b.d_y[k] / s;
                d_z[k] += dw * b.value[k];
            }
        }
        (value, d_x, d_y, d_z)
    }
}

/// Two linear layers on the content vector: one offset triple
/// `(dx, dy, dz)` per spatial group and one per point inside a group,
/// for each channel group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub groups: usize,
    pub points: usize,
    pub spatial_groups: usize,
    /// `G·K·3 × D`
    pub group_weight: Matrix,
    pub group_bias: Vector,
    /// `G·(P/K)·3 × D`
    pub point_weight: Matrix,
    pub point_bias: Vector,
}

impl SamplerParams {
    pub fn zeros(groups: usize, points: usize, spatial_groups: usize, content_dim: usize) -> Self {
        let per = points / spatial_groups;
        SamplerParams {
            groups,
            points,
            spatial_groups,
            group_weight: Matrix::zeros(groups * spatial_groups * 3, content_dim),
            group_bias: Vector::zeros(groups * spatial_groups * 3),
            point_weight: Matrix::zeros(groups * per * 3, content_dim),
            point_bias: Vector::zeros(groups * per * 3),
        }
    }

    pub fn points_per_group(&self) -> usize {
        self.points / self.spatial_groups
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        let k = self.spatial_groups;
        if k == 0 || self.points % k != 0 {
            return Err(DecoderError::Divisibility {
                points: self.points,
                groups: k,
            });
        }
        let per = self.points / k;
        let ok = self.group_weight.shape() == (self.groups * k * 3, v.len())
            && self.group_bias.len() == self.groups * k * 3
            && self.point_weight.shape() == (self.groups * per * 3, v.len())
            && self.point_bias.len() == self.groups * per * 3;
        if !ok {
            return Err(DecoderError::Config(format!(
                "sampler parameters do not fit {} groups, {} points, K={k}, content len {}",
                self.groups,
                self.points,
                v.len()
            )));
        }
        Ok(())
    }

    /// Raw offsets: (per spatial group, per point) triples.
    fn offsets(&self, v: &[f64]) -> Result<(Vector, Vector)> {
        self.check(v)?;
        let mut p1 = self.group_weight.mul_vec(v)?;
        for (a, b) in p1.iter_mut().zip(self.group_bias.iter()) {
            *a += b;
        }
        let mut p2 = self.point_weight.mul_vec(v)?;
        for (a, b) in p2.iter_mut().zip(self.point_bias.iter()) {
            *a += b;
        }
        Ok((p1, p2))
    }
}

/// Where one point of one channel group reads from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub group: usize,
    /// Point index `k·(P/K) + m`.
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

struct RawPoint {
    point: SamplePoint,
    spatial_group: usize,
    member: usize,
    scale: f64,
    dz1_exp: f64,
}

fn raw_points(v: &[f64], b: &BoxXYZR, params: &SamplerParams) -> Result<(Vec<RawPoint>, Vector, Vector)> {
    let (p1, p2) = params.offsets(v)?;
    let k = params.spatial_groups;
    let per = params.points_per_group();
    let scale = (b.z - 0.5 * b.r).exp2();
    let mut out = Vec::with_capacity(params.groups * params.points);
    for g in 0..params.groups {
        for sg in 0..k {
            let a = (g * k + sg) * 3;
            let (dx1, dy1, dz1) = (p1[a], p1[a + 1], p1[a + 2]);
            let e = dz1.exp2();
            for m in 0..per {
                let c = (g * per + m) * 3;
                let (dx2, dy2, dz2) = (p2[c], p2[c + 1], p2[c + 2]);
                out.push(RawPoint {
                    point: SamplePoint {
                        group: g,
                        index: sg * per + m,
                        x: b.x + scale * (dx1 + e * dx2),
                        y: b.y + scale * (dy1 + e * dy2),
                        z: b.z + dz1 + dz2,
                    },
                    spatial_group: sg,
                    member: m,
                    scale,
                    dz1_exp: e,
                });
            }
        }
    }
    Ok((out, p1, p2))
}

/// Sampling positions for every (channel group, point), group-major.
pub fn sampling_locations(v: &[f64], b: &BoxXYZR, params: &SamplerParams) -> Result<Vec<SamplePoint>> {
    Ok(raw_points(v, b, params)?.0.into_iter().map(|r| r.point).collect())
}

/// Reads `P × D_C` features per channel group. Channel group `g` reads
/// channels `g·D_C .. (g+1)·D_C` of the pyramid.
pub fn sample_points(v: &[f64], b: &BoxXYZR, params: &SamplerParams, pyramid: &Pyramid) -> Result<SampledFeatures> {
    let dc = group_dim(params, pyramid)?;
    let (points, _, _) = raw_points(v, b, params)?;
    let mut groups = vec![Matrix::zeros(params.points, dc); params.groups];
    for raw in &points {
        let p = raw.point;
        let (value, _, _, _) = pyramid.sample(p.x, p.y, p.z);
        groups[p.group]
            .row_mut(p.index)
            .copy_from_slice(&value[p.group * dc..(p.group + 1) * dc]);
    }
    Ok(SampledFeatures { groups })
}

fn group_dim(params: &SamplerParams, pyramid: &Pyramid) -> Result<usize> {
    let c = pyramid.channels();
    if params.groups == 0 || c % params.groups != 0 {
        return Err(DecoderError::Config(format!(
            "pyramid has {c} channels, not divisible into {} groups",
            params.groups
        )));
    }
    Ok(c / params.groups)
}

pub struct SamplerGrad {
    pub v: Vector,
    pub group_weight: Matrix,
    pub group_bias: Vector,
    pub point_weight: Matrix,
    pub point_bias: Vector,
}

pub fn sample_points_backward(
    v: &[f64],
    b: &BoxXYZR,
    params: &SamplerParams,
    pyramid: &Pyramid,
    upstream: &SampledFeatures,
) -> Result<SamplerGrad> {
    let dc = group_dim(params, pyramid)?;
    let (points, _, p2) = raw_points(v, b, params)?;
    let k = params.spatial_groups;
    let per = params.points_per_group();
    let mut d_p1 = Vector::zeros(params.group_bias.len());
    let mut d_p2 = Vector::zeros(params.point_bias.len());
    let ln2 = std::f64::consts::LN_2;
    for raw in &points {
        let p = raw.point;
        let (_, d_x, d_y, d_z) = pyramid.sample(p.x, p.y, p.z);
        let up = upstream.groups[p.group].row(p.index);
        let range = p.group * dc..(p.group + 1) * dc;
        let dot = |d: &Vector| -> f64 { d[range.clone()].iter().zip(up).map(|(a, b)| a * b).sum() };
        let (gx, gy, gz) = (dot(&d_x), dot(&d_y), dot(&d_z));
        let a = (p.group * k + raw.spatial_group) * 3;
        let c = (p.group * per + raw.member) * 3;
        let (dx2, dy2) = (p2[c], p2[c + 1]);
        let s = raw.scale;
        let e = raw.dz1_exp;
        d_p1[a] += s * gx;
        d_p1[a + 1] += s * gy;
        d_p1[a + 2] += s * ln2 * e * (dx2 * gx + dy2 * gy) + gz;
        d_p2[c] += s * e * gx;
        d_p2[c + 1] += s * e * gy;
        d_p2[c + 2] += gz;
    }
    let mut d_v = params.group_weight.tmul_vec(&d_p1)?;
    for (a, b) in d_v.iter_mut().zip(params.point_weight.tmul_vec(&d_p2)?.iter()) {
        *a += b;
    }
    let mut d_gw = Matrix::zeros(params.group_weight.rows(), v.len());
    d_gw.add_outer(&d_p1, v, 1.0);
    let mut d_pw = Matrix::zeros(params.point_weight.rows(), v.len());
    d_pw.add_outer(&d_p2, v, 1.0);
    Ok(SamplerGrad {
        v: d_v,
        group_weight: d_gw,
        group_bias: d_p1,
        point_weight: d_pw,
        point_bias: d_p2,
    })
}
