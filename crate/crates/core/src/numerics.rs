//! Dense f64 building blocks shared by the rest of the crate.
//!
//! Everything here is a pure function over borrowed inputs. Backward passes
//! return vector-Jacobian products so that callers can chain them by hand.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Normalization epsilon used throughout the decoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Floor applied to the denominator of relative errors in [`grad_check`].
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch, expected {expected} but got {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: non-finite function value when perturbing coordinate {coordinate}")]
    NonFinite { op: String, coordinate: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

fn mismatch(op: &'static str, expected: impl fmt::Display, found: impl fmt::Display) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

/// Owned real vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Vector(vec![value; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch(
                "Matrix::from_vec",
                format!("{} entries for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Leading `rows × cols` block.
    pub fn top_left(&self, rows: usize, cols: usize) -> Matrix {
        assert!(rows <= self.rows && cols <= self.cols);
        Matrix::from_fn(rows, cols, |r, c| self[(r, c)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(mismatch(
                "matmul",
                format!("lhs cols {} = rhs rows", self.cols),
                format!("{}x{} · {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · x` for a column vector `x`.
    pub fn mul_vec(&self, x: &[f64]) -> Result<Vector> {
        if self.cols != x.len() {
            return Err(mismatch(
                "mul_vec",
                format!("vector of len {}", self.cols),
                format!("len {}", x.len()),
            ));
        }
        Ok((0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `selfᵀ · y` without materializing the transpose.
    pub fn tmul_vec(&self, y: &[f64]) -> Result<Vector> {
        if self.rows != y.len() {
            return Err(mismatch(
                "tmul_vec",
                format!("vector of len {}", self.rows),
                format!("len {}", y.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        Ok(Vector(out))
    }

    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Frobenius inner product.
    pub fn inner(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Accumulates the outer product `scale · a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        assert_eq!((self.rows, self.cols), (a.len(), b.len()));
        for (r, &ar) in a.iter().enumerate() {
            let s = scale * ar;
            for (o, bc) in self.row_mut(r).iter_mut().zip(b) {
                *o += s * bc;
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `weight · input + bias`.
pub fn linear(input: &[f64], weight: &Matrix, bias: &[f64]) -> Result<Vector> {
    if weight.cols() != input.len() || bias.len() != weight.rows() {
        return Err(mismatch(
            "linear",
            format!(
                "weight {}x{} with input len {} and bias len {}",
                weight.rows(),
                weight.cols(),
                weight.cols(),
                weight.rows()
            ),
            format!("input len {}, bias len {}", input.len(), bias.len()),
        ));
    }
    let mut out = weight.mul_vec(input)?;
    for (o, b) in out.iter_mut().zip(bias) {
        *o += b;
    }
    Ok(out)
}

/// Gradients of [`linear`] given the upstream gradient of its output.
pub struct LinearGrad {
    pub input: Vector,
    pub weight: Matrix,
    pub bias: Vector,
}

pub fn linear_backward(input: &[f64], weight: &Matrix, upstream: &[f64]) -> Result<LinearGrad> {
    let d_input = weight.tmul_vec(upstream)?;
    let mut d_weight = Matrix::zeros(weight.rows(), weight.cols());
    d_weight.add_outer(upstream, input, 1.0);
    Ok(LinearGrad {
        input: d_input,
        weight: d_weight,
        bias: Vector::from(upstream),
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn moments(input: &[f64]) -> (f64, f64) {
    let n = input.len() as f64;
    let mean = input.iter().sum::<f64>() / n;
    let var = input.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Layer normalization over the whole vector with biased variance.
pub fn layer_norm(input: &[f64], gain: &[f64], shift: &[f64], epsilon: f64) -> Result<Vector> {
    if input.is_empty() {
        return Err(NumericsError::Empty { op: "layer_norm" });
    }
    if gain.len() != input.len() || shift.len() != input.len() {
        return Err(mismatch(
            "layer_norm",
            format!("gain and shift of len {}", input.len()),
            format!("gain {}, shift {}", gain.len(), shift.len()),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(NumericsError::InvalidArgument {
            op: "layer_norm",
            reason: format!("epsilon must be positive, got {epsilon}"),
        });
    }
    let (mean, var) = moments(input);
    let inv_std = 1.0 / (var + epsilon).sqrt();
    Ok(input
        .iter()
        .zip(gain.iter().zip(shift))
        .map(|(x, (g, s))| g * (x - mean) * inv_std + s)
        .collect())
}

pub struct LayerNormGrad {
    pub input: Vector,
    pub gain: Vector,
    pub shift: Vector,
}

pub fn layer_norm_backward(
    input: &[f64],
    gain: &[f64],
    epsilon: f64,
    upstream: &[f64],
) -> Result<LayerNormGrad> {
    if input.is_empty() {
        return Err(NumericsError::Empty { op: "layer_norm_backward" });
    }
    if gain.len() != input.len() || upstream.len() != input.len() {
        return Err(mismatch(
            "layer_norm_backward",
            format!("gain and upstream of len {}", input.len()),
            format!("gain {}, upstream {}", gain.len(), upstream.len()),
        ));
    }
    let n = input.len() as f64;
    let (mean, var) = moments(input);
    let inv_std = 1.0 / (var + epsilon).sqrt();
    let xhat: Vec<f64> = input.iter().map(|x| (x - mean) * inv_std).collect();
    let d_xhat: Vec<f64> = upstream.iter().zip(gain).map(|(u, g)| u * g).collect();
    let sum_d: f64 = d_xhat.iter().sum();
    let sum_dx: f64 = d_xhat.iter().zip(&xhat).map(|(d, x)| d * x).sum();
    let d_input = d_xhat
        .iter()
        .zip(&xhat)
        .map(|(d, x)| inv_std * (d - sum_d / n - x * sum_dx / n))
        .collect();
    Ok(LayerNormGrad {
        input: d_input,
        gain: upstream.iter().zip(&xhat).map(|(u, x)| u * x).collect(),
        shift: Vector::from(upstream),
    })
}

/// A single feature map: `height × width` cells with `channels` values each.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Interpolated features plus their derivatives with respect to the point.
#[derive(Clone, Debug)]
pub struct BilinearSample {
    pub value: Vector,
    pub d_x: Vector,
    pub d_y: Vector,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(NumericsError::Empty { op: "FeatureGrid::new" });
        }
        if data.len() != height * width * channels {
            return Err(mismatch(
                "FeatureGrid::new",
                height * width * channels,
                data.len(),
            ));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        FeatureGrid::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Stored features of cell (x, y).
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    fn padded(&self, x: i64, y: i64) -> Option<&[f64]> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            None
        } else {
            Some(self.cell(x as usize, y as usize))
        }
    }

    /// Bilinear interpolation at grid coordinate (x, y), zero padded.
    pub fn bilinear_sample(&self, x: f64, y: f64) -> Vector {
        self.bilinear_sample_with_grad(x, y).value
    }

    pub fn bilinear_sample_with_grad(&self, x: f64, y: f64) -> BilinearSample {
        let c = self.channels;
        let mut value = Vector::zeros(c);
        let mut d_x = Vector::zeros(c);
        let mut d_y = Vector::zeros(c);
        if !x.is_finite() || !y.is_finite() {
            return BilinearSample { value, d_x, d_y };
        }
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        // Far outside the grid every neighbour is padding.
        if x0 < -2.0 || y0 < -2.0 || x0 > self.width as f64 + 1.0 || y0 > self.height as f64 + 1.0 {
            return BilinearSample { value, d_x, d_y };
        }
        let (ix, iy) = (x0 as i64, y0 as i64);
        // (dx, dy, weight, d weight/dx, d weight/dy)
        let corners = [
            (0, 0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (1, 0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (0, 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (1, 1, fx * fy, fy, fx),
        ];
        for (ox, oy, w, wx, wy) in corners {
            if let Some(cell) = self.padded(ix + ox, iy + oy) {
                for k in 0..c {
                    value[k] += w * cell[k];
                    d_x[k] += wx * cell[k];
                    d_y[k] += wy * cell[k];
                }
            }
        }
        BilinearSample { value, d_x, d_y }
    }
}

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    /// (output row, input coordinate) of the worst entry.
    pub worst: (usize, usize),
    pub step: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares an analytic Jacobian (`outputs × inputs`) against central
/// differences of `function` around `point`.
pub fn grad_check<F>(
    op: &str,
    function: F,
    analytic: &Matrix,
    point: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if !(step > 0.0) {
        return Err(NumericsError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    if analytic.cols() != point.len() {
        return Err(mismatch(
            "grad_check",
            format!("jacobian with {} columns", point.len()),
            format!("{}x{}", analytic.rows(), analytic.cols()),
        ));
    }
    let mut probe = point.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = (0, 0);
    for j in 0..point.len() {
        probe[j] = point[j] + step;
        let plus = function(&probe);
        probe[j] = point[j] - step;
        let minus = function(&probe);
        probe[j] = point[j];
        if plus.len() != analytic.rows() || minus.len() != analytic.rows() {
            return Err(mismatch(
                "grad_check",
                format!("{} outputs", analytic.rows()),
                plus.len(),
            ));
        }
        if plus.iter().chain(&minus).any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite {
                op: op.to_string(),
                coordinate: j,
            });
        }
        for (i, (p, m)) in plus.iter().zip(&minus).enumerate() {
            let numeric = (p - m) / (2.0 * step);
            let exact = analytic[(i, j)];
            let denom = exact.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            let rel = (exact - numeric).abs() / denom;
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (i, j);
            }
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error,
        worst,
        step,
    })
}

/// Scalar variant of [`grad_check`]: `function` returns one value and
/// `gradient` has one entry per coordinate of `point`.
pub fn grad_check_scalar<F>(
    op: &str,
    function: F,
    gradient: &[f64],
    point: &[f64],
    step: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    let jacobian = Matrix::from_vec(1, gradient.len(), gradient.to_vec())?;
    grad_check(op, |x| vec![function(x)], &jacobian, point, step)
}
