//! Dense array primitives shared by every numeric module.
//!
//! All arithmetic runs in `f64`. Argmax ties resolve to the lowest row-major
//! index everywhere so results are reproducible across platforms.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{CsrError, Result};

/// Norms at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// A finite real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CsrError::Domain("vector must have dim >= 1".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CsrError::Domain(format!("non-finite entry at index {i}")));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl Deref for DenseVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for DenseVector {
    type Error = CsrError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// A 2D map of reals stored row-major. Serialized as `{h, w, values}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct Grid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    h: usize,
    w: usize,
    values: Vec<f64>,
}

impl TryFrom<GridRepr> for Grid {
    type Error = CsrError;

    fn try_from(r: GridRepr) -> Result<Self> {
        Grid::new(r.h, r.w, r.values)
    }
}

impl From<Grid> for GridRepr {
    fn from(g: Grid) -> Self {
        GridRepr { h: g.height, w: g.width, values: g.values }
    }
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CsrError::Domain(format!("grid dimensions must be positive, got {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(CsrError::shape("grid", format!("{} values", height * width), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CsrError::Domain(format!("non-finite grid entry at index {i}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && value.is_finite());
        Self { height, width, values: vec![value; height * width] }
    }

    pub(crate) fn from_vec_unchecked(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        Self { height, width, values }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, h: usize, w: usize) -> f64 {
        self.values[h * self.width + w]
    }

    /// Location and value of the maximum entry (lowest row-major index on ties).
    pub fn argmax(&self) -> ((usize, usize), f64) {
        let i = argmax(&self.values);
        ((i / self.width, i % self.width), self.values[i])
    }

    pub fn max(&self) -> f64 {
        self.argmax().1
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid { height: self.height, width: self.width, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Entry-wise product with a grid of the same shape.
    pub fn hadamard(&self, other: &Grid) -> Result<Grid> {
        if self.shape() != other.shape() {
            return Err(CsrError::shape("hadamard", format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect();
        Ok(Grid::from_vec_unchecked(self.height, self.width, values))
    }
}

/// A `C x H x W` feature grid stored channel-major: index `(c * H + h) * W + w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(CsrError::Domain(format!(
                "feature map dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(CsrError::shape("feature map", channels * height * width, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CsrError::Domain(format!("non-finite feature at index {i}")));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Raw channel-major values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn value(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, value: f64) {
        self.data[(c * self.height + h) * self.width + w] = value;
    }

    /// The C-dimensional patch vector at cell `(h, w)`.
    pub fn patch(&self, h: usize, w: usize) -> Vec<f64> {
        self.patch_at(h * self.width + w)
    }

    /// Patch vector at the row-major cell index.
    pub fn patch_at(&self, cell: usize) -> Vec<f64> {
        let plane = self.cells();
        (0..self.channels).map(|c| self.data[c * plane + cell]).collect()
    }

    /// All patch vectors in row-major cell order.
    pub fn patches(&self) -> Vec<Vec<f64>> {
        (0..self.cells()).map(|i| self.patch_at(i)).collect()
    }

    /// `a * self + b * other`, for linearity checks and synthetic composition.
    pub fn linear_combination(&self, a: f64, other: &FeatureMap, b: f64) -> Result<FeatureMap> {
        if self.dims() != other.dims() {
            return Err(CsrError::shape(
                "feature map combination",
                format!("{:?}", self.dims()),
                format!("{:?}", other.dims()),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        FeatureMap::new(self.channels, self.height, self.width, data)
    }
}

/// Row-major dense matrix used for the learned linear maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CsrError::shape("matrix", rows * cols, data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CsrError::Domain(format!("non-finite matrix entry at index {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// `rows x cols` with ones on the leading diagonal (identity padded or truncated).
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows.min(cols) {
            m.data[i * cols + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`. Panics on length mismatch; callers validate dimensions first.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self -= lr * grad`.
    pub fn descend(&mut self, grad: &Matrix, lr: f64) {
        debug_assert_eq!((self.rows, self.cols), (grad.rows, grad.cols));
        for (p, g) in self.data.iter_mut().zip(&grad.data) {
            *p -= lr * g;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `log(sum(exp(values)))`, stable under large entries.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax over a slice with max-subtraction.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(CsrError::shape("cosine", u.len(), v.len()));
    }
    let nu = norm(u);
    if nu <= MIN_NORM {
        return Err(CsrError::Domain("cosine: first argument has zero norm".into()));
    }
    let nv = norm(v);
    if nv <= MIN_NORM {
        return Err(CsrError::Domain("cosine: second argument has zero norm".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Softmax over all cells of a grid.
pub fn spatial_softmax(g: &Grid) -> Grid {
    Grid::from_vec_unchecked(g.height, g.width, softmax(&g.values))
}

/// `softmax(scale * values)`; `scale` must be positive.
pub fn scaled_softmax(values: &[f64], scale: f64) -> Result<DenseVector> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CsrError::Domain(format!("softmax scale must be positive, got {scale}")));
    }
    if values.is_empty() {
        return Err(CsrError::Domain("softmax over an empty vector".into()));
    }
    let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
    Ok(DenseVector::from_vec_unchecked(softmax(&scaled)))
}

pub fn l2_normalize(v: &[f64]) -> Result<DenseVector> {
    let n = norm(v);
    if n <= MIN_NORM {
        return Err(CsrError::Domain(format!("cannot normalize vector with norm {n:e}")));
    }
    Ok(DenseVector::from_vec_unchecked(v.iter().map(|x| x / n).collect()))
}

pub fn clip_nonneg(g: &Grid) -> Grid {
    g.map(|v| v.max(0.0))
}
