use serde::{Deserialize, Serialize};

use super::{DecoderError, Result};
use crate::numerics::{sigmoid, Matrix, NumericsError, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Channel,
    Spatial,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::Channel => "channel",
            FilterKind::Spatial => "spatial",
        }
    }
}

/// A kernel generated for one query at one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicFilter {
    pub kernel: Matrix,
    pub kind: FilterKind,
    pub origin_stage: usize,
}

/// Produces a `rows × cols` kernel `base + Σ_d W_d · v_d` from a content
/// vector. Column `d` of `weights` holds `W_d` flattened row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterGenerator {
    pub base: Matrix,
    pub weights: Matrix,
}

impl FilterGenerator {
    pub fn zeros(rows: usize, cols: usize, content_dim: usize) -> Self {
        FilterGenerator {
            base: Matrix::zeros(rows, cols),
            weights: Matrix::zeros(rows * cols, content_dim),
        }
    }

    pub fn kernel_shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    pub fn content_dim(&self) -> usize {
        self.weights.cols()
    }

    /// `W_d` as a kernel-shaped matrix.
    pub fn weight(&self, d: usize) -> Matrix {
        let (r, c) = self.kernel_shape();
        Matrix::from_fn(r, c, |i, j| self.weights[(i * c + j, d)])
    }

    pub fn set_weight(&mut self, d: usize, w: &Matrix) {
        let (r, c) = self.kernel_shape();
        assert_eq!(w.shape(), (r, c));
        for i in 0..r {
            for j in 0..c {
                self.weights[(i * c + j, d)] = w[(i, j)];
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.base.as_slice().len() + self.weights.as_slice().len()
    }
}

pub fn generate_filter(v: &[f64], generator: &FilterGenerator) -> Result<Matrix> {
    let (r, c) = generator.kernel_shape();
    let flat = generator.weights.mul_vec(v)?;
    let mut out = generator.base.clone();
    for (o, f) in out.as_mut_slice().iter_mut().zip(flat.iter()) {
        *o += f;
    }
    debug_assert_eq!(out.shape(), (r, c));
    Ok(out)
}

/// Channel kernel `M = W_0 + Σ_d W_d v_d` for one group.
pub fn generate_channel_filter(v: &[f64], generator: &FilterGenerator, stage: usize) -> Result<DynamicFilter> {
    let (r, c) = generator.kernel_shape();
    if r != c {
        return Err(DecoderError::FilterShape {
            kind: "channel",
            needed: "a square kernel".into(),
            found: format!("{r}x{c}"),
        });
    }
    Ok(DynamicFilter {
        kernel: generate_filter(v, generator)?,
        kind: FilterKind::Channel,
        origin_stage: stage,
    })
}

pub struct GeneratorGrad {
    pub v: Vector,
    pub base: Matrix,
    pub weights: Matrix,
}

pub fn generate_filter_backward(v: &[f64], generator: &FilterGenerator, upstream: &Matrix) -> Result<GeneratorGrad> {
    if upstream.shape() != generator.kernel_shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "generate_filter_backward",
            expected: format!("{:?}", generator.kernel_shape()),
            found: format!("{:?}", upstream.shape()),
        }
        .into());
    }
    let d_v = generator.weights.tmul_vec(upstream.as_slice())?;
    let mut d_w = Matrix::zeros(generator.weights.rows(), generator.weights.cols());
    d_w.add_outer(upstream.as_slice(), v, 1.0);
    Ok(GeneratorGrad {
        v: d_v,
        base: upstream.clone(),
        weights: d_w,
    })
}

/// Gate of a stored kernel: `w1 = σ(A1 v)` over rows and `w2 = σ(A2 v)`
/// over columns. No biases, so a square `D_C` kernel costs `2·D_C²`
/// parameters when fed the group's `D_C`-long slice of the content vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub row_gate: Matrix,
    pub col_gate: Matrix,
}

impl Adapter {
    pub fn zeros(rows: usize, cols: usize, input_dim: usize) -> Self {
        Adapter {
            row_gate: Matrix::zeros(rows, input_dim),
            col_gate: Matrix::zeros(cols, input_dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.row_gate.as_slice().len() + self.col_gate.as_slice().len()
    }

    fn gates(&self, v: &[f64]) -> Result<(Vector, Vector)> {
        let w1: Vector = self.row_gate.mul_vec(v)?.iter().map(|&x| sigmoid(x)).collect();
        let w2: Vector = self.col_gate.mul_vec(v)?.iter().map(|&x| sigmoid(x)).collect();
        Ok((w1, w2))
    }
}

fn check_adapt_shapes(prev: &Matrix, cur: &Matrix, adapter: &Adapter) -> Result<()> {
    if prev.shape() != cur.shape() || adapter.row_gate.rows() != prev.rows() || adapter.col_gate.rows() != prev.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "adapt_filter",
            expected: format!(
                "equal kernels matching gates {}x{}",
                adapter.row_gate.rows(),
                adapter.col_gate.rows()
            ),
            found: format!("{:?} and {:?}", prev.shape(), cur.shape()),
        }
        .into());
    }
    Ok(())
}

/// `M' = (w1 w2ᵀ) ⊙ M_prev + (1 - w1 w2ᵀ) ⊙ M_cur`.
pub fn adapt_filter(prev: &Matrix, cur: &Matrix, v: &[f64], adapter: &Adapter) -> Result<Matrix> {
    check_adapt_shapes(prev, cur, adapter)?;
    let (w1, w2) = adapter.gates(v)?;
    Ok(Matrix::from_fn(prev.rows(), prev.cols(), |i, j| {
        let (a, b) = (prev[(i, j)], cur[(i, j)]);
        let g = w1[i] * w2[j];
        // rounding can land one ulp outside [min, max]
        (g * a + (1.0 - g) * b).clamp(a.min(b), a.max(b))
    }))
}

pub struct AdaptGrad {
    pub prev: Matrix,
    pub cur: Matrix,
    pub v: Vector,
    pub row_gate: Matrix,
    pub col_gate: Matrix,
}

pub fn adapt_filter_backward(
    prev: &Matrix,
    cur: &Matrix,
    v: &[f64],
    adapter: &Adapter,
    upstream: &Matrix,
) -> Result<AdaptGrad> {
    check_adapt_shapes(prev, cur, adapter)?;
    let (w1, w2) = adapter.gates(v)?;
    let (r, c) = prev.shape();
    let mut d_prev = Matrix::zeros(r, c);
    let mut d_cur = Matrix::zeros(r, c);
    let mut d_w1 = vec![0.0; r];
    let mut d_w2 = vec![0.0; c];
    for i in 0..r {
        for j in 0..c {
            let u = upstream[(i, j)];
            let g = w1[i] * w2[j];
            d_prev[(i, j)] = u * g;
            d_cur[(i, j)] = u * (1.0 - g);
            let d_g = u * (prev[(i, j)] - cur[(i, j)]);
            d_w1[i] += d_g * w2[j];
            d_w2[j] += d_g * w1[i];
        }
    }
    let d_a1: Vec<f64> = d_w1.iter().zip(w1.iter()).map(|(d, s)| d * s * (1.0 - s)).collect();
    let d_a2: Vec<f64> = d_w2.iter().zip(w2.iter()).map(|(d, s)| d * s * (1.0 - s)).collect();
    let mut d_v = adapter.row_gate.tmul_vec(&d_a1)?;
    for (a, b) in d_v.iter_mut().zip(adapter.col_gate.tmul_vec(&d_a2)?.iter()) {
        *a += b;
    }
    let mut d_row_gate = Matrix::zeros(r, v.len());
    d_row_gate.add_outer(&d_a1, v, 1.0);
    let mut d_col_gate = Matrix::zeros(c, v.len());
    d_col_gate.add_outer(&d_a2, v, 1.0);
    Ok(AdaptGrad {
        prev: d_prev,
        cur: d_cur,
        v: d_v,
        row_gate: d_row_gate,
        col_gate: d_col_gate,
    })
}

fn check_spatial(reused: &[&Matrix], fresh: &Matrix, adapters: &[Adapter], points_in: usize, points_out: usize) -> Result<()> {
    let n = reused.len();
    if n * points_in > points_out {
        return Err(DecoderError::SpatialCapacity {
            reused: n,
            points_in,
            points_out,
        });
    }
    if adapters.len() != n {
        return Err(DecoderError::Config(format!(
            "{n} reused spatial filters but {} adapters",
            adapters.len()
        )));
    }
    if fresh.shape() != (points_out - n * points_in, points_in) {
        return Err(DecoderError::FilterShape {
            kind: "spatial",
            needed: format!("{}x{points_in}", points_out - n * points_in),
            found: format!("{}x{}", fresh.rows(), fresh.cols()),
        });
    }
    for m in reused {
        if m.rows() < points_in || m.cols() < points_in {
            return Err(DecoderError::FilterShape {
                kind: "spatial",
                needed: format!("{points_in}x{points_in}"),
                found: format!("{}x{}", m.rows(), m.cols()),
            });
        }
    }
    Ok(())
}

/// Spatial kernel of `points_out × points_in`: the freshly generated rows
/// first, then the leading `points_in × points_in` block of each adapted
/// reused kernel (most recent first). Reused kernels are adapted with the
/// gate form of [`adapt_filter`] against a zero current kernel, since the
/// rows they replace are never generated at this stage.
pub fn build_spatial_filter(
    reused: &[&Matrix],
    fresh: &Matrix,
    v: &[f64],
    adapters: &[Adapter],
    points_in: usize,
    points_out: usize,
) -> Result<Matrix> {
    check_spatial(reused, fresh, adapters, points_in, points_out)?;
    let mut out = Matrix::zeros(points_out, points_in);
    for r in 0..fresh.rows() {
        out.row_mut(r).copy_from_slice(fresh.row(r));
    }
    let mut row = fresh.rows();
    for (m, adapter) in reused.iter().zip(adapters) {
        let zero = Matrix::zeros(m.rows(), m.cols());
        let adapted = adapt_filter(m, &zero, v, adapter)?;
        for r in 0..points_in {
            out.row_mut(row + r).copy_from_slice(&adapted.row(r)[..points_in]);
        }
        row += points_in;
    }
    Ok(out)
}

pub struct SpatialFilterGrad {
    pub reused: Vec<Matrix>,
    pub fresh: Matrix,
    pub v: Vector,
    pub adapters: Vec<Adapter>,
}

pub fn build_spatial_filter_backward(
    reused: &[&Matrix],
    fresh: &Matrix,
    v: &[f64],
    adapters: &[Adapter],
    points_in: usize,
    points_out: usize,
    upstream: &Matrix,
) -> Result<SpatialFilterGrad> {
    check_spatial(reused, fresh, adapters, points_in, points_out)?;
    let d_fresh = Matrix::from_fn(fresh.rows(), points_in, |r, c| upstream[(r, c)]);
    let mut d_v = Vector::zeros(v.len());
    let mut d_reused = Vec::with_capacity(reused.len());
    let mut d_adapters = Vec::with_capacity(reused.len());
    let mut row = fresh.rows();
    for (m, adapter) in reused.iter().zip(adapters) {
        let zero = Matrix::zeros(m.rows(), m.cols());
        let mut up = Matrix::zeros(m.rows(), m.cols());
        for r in 0..points_in {
            up.row_mut(r)[..points_in].copy_from_slice(upstream.row(row + r));
        }
        let g = adapt_filter_backward(m, &zero, v, adapter, &up)?;
        for (a, b) in d_v.iter_mut().zip(g.v.iter()) {
            *a += b;
        }
        d_reused.push(g.prev);
        d_adapters.push(Adapter {
            row_gate: g.row_gate,
            col_gate: g.col_gate,
        });
        row += points_in;
    }
    Ok(SpatialFilterGrad {
        reused: d_reused,
        fresh: d_fresh,
        v: d_v,
        adapters: d_adapters,
    })
}
