//! One-layer softmax self-attention `f(Z) = v^T Z S 1_D` and the logistic
//! loss.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector, DVectorView, DVectorViewMut};

use crate::datagen::Sample;
use crate::error::{Error, Result};

/// Trainable value vector `v` and combined query-key matrix `W`.
///
/// Block views split both along the feature / positional boundary:
/// `v = [v1; v2]`, `W = [[W11, W12], [W21, W22]]` with `v1`, `W11` on the
/// `d` feature coordinates and `v2`, `W22` on the `D` positional ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    v: DVector<f64>,
    w: DMatrix<f64>,
    d: usize,
}

impl ModelParams {
    pub fn zeros(d: usize, groups: usize) -> Self {
        let m = d + groups;
        Self { v: DVector::zeros(m), w: DMatrix::zeros(m, m), d }
    }

    pub fn from_parts(d: usize, v: DVector<f64>, w: DMatrix<f64>) -> Result<Self> {
        let m = v.len();
        if m <= d || w.shape() != (m, m) {
            return Err(Error::DimensionMismatch(format!(
                "v has length {m}, W is {:?}, d = {d}",
                w.shape()
            )));
        }
        Ok(Self { v, w, d })
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }
    pub fn groups(&self) -> usize {
        self.v.len() - self.d
    }
    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn v(&self) -> &DVector<f64> {
        &self.v
    }
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn v_mut(&mut self) -> &mut DVector<f64> {
        &mut self.v
    }
    pub fn w_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w
    }
    pub fn into_parts(self) -> (DVector<f64>, DMatrix<f64>) {
        (self.v, self.w)
    }

    pub fn v1(&self) -> DVectorView<'_, f64> {
        self.v.rows(0, self.d)
    }
    pub fn v2(&self) -> DVectorView<'_, f64> {
        self.v.rows(self.d, self.groups())
    }
    pub fn v1_mut(&mut self) -> DVectorViewMut<'_, f64> {
        self.v.rows_mut(0, self.d)
    }
    pub fn v2_mut(&mut self) -> DVectorViewMut<'_, f64> {
        let g = self.groups();
        self.v.rows_mut(self.d, g)
    }

    pub fn w11(&self) -> DMatrixView<'_, f64> {
        self.w.view((0, 0), (self.d, self.d))
    }
    pub fn w12(&self) -> DMatrixView<'_, f64> {
        self.w.view((0, self.d), (self.d, self.groups()))
    }
    pub fn w21(&self) -> DMatrixView<'_, f64> {
        self.w.view((self.d, 0), (self.groups(), self.d))
    }
    pub fn w22(&self) -> DMatrixView<'_, f64> {
        self.w.view((self.d, self.d), (self.groups(), self.groups()))
    }
    pub fn w11_mut(&mut self) -> DMatrixViewMut<'_, f64> {
        let d = self.d;
        self.w.view_mut((0, 0), (d, d))
    }
    pub fn w12_mut(&mut self) -> DMatrixViewMut<'_, f64> {
        let (d, g) = (self.d, self.groups());
        self.w.view_mut((0, d), (d, g))
    }
    pub fn w21_mut(&mut self) -> DMatrixViewMut<'_, f64> {
        let (d, g) = (self.d, self.groups());
        self.w.view_mut((d, 0), (g, d))
    }
    pub fn w22_mut(&mut self) -> DMatrixViewMut<'_, f64> {
        let (d, g) = (self.d, self.groups());
        self.w.view_mut((d, d), (g, g))
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }

    pub(crate) fn check_input(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.nrows() != self.dim() || z.ncols() != self.groups() {
            return Err(Error::DimensionMismatch(format!(
                "input is {:?}, model expects ({}, {})",
                z.shape(),
                self.dim(),
                self.groups()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Column-stochastic `D x D` scores, `S[j', j]` = weight of group `j'`
    /// in the output at position `j`.
    pub scores: DMatrix<f64>,
    /// Scalar model output `f`.
    pub output: f64,
}

/// Softmax over each column, in place, after subtracting the column max.
pub(crate) fn softmax_columns(logits: &mut DMatrix<f64>) -> Result<()> {
    for mut col in logits.column_iter_mut() {
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::non_finite("attention logits"));
        }
        let mut total = 0.0;
        for x in col.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        col /= total;
    }
    Ok(())
}

/// `S = softmax_columns(Z^T W Z)`.
pub fn attention_matrix(z: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.nrows() != z.nrows() || w.ncols() != z.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "W is {:?} but input has {} rows",
            w.shape(),
            z.nrows()
        )));
    }
    let mut logits = z.transpose() * (w * z);
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::non_finite("attention logits"));
    }
    softmax_columns(&mut logits)?;
    Ok(logits)
}

pub fn forward(z: &DMatrix<f64>, params: &ModelParams) -> Result<AttentionOutput> {
    params.check_input(z)?;
    let scores = attention_matrix(z, params.w())?;
    let row_sums = scores.column_sum();
    let projected = z.tr_mul(params.v());
    let output = projected.dot(&row_sums);
    if !output.is_finite() {
        return Err(Error::non_finite("model output"));
    }
    Ok(AttentionOutput { scores, output })
}

/// `log(1 + exp(-a))`, stable for large `|a|`.
#[inline]
pub fn logistic_loss(a: f64) -> f64 {
    (-a).max(0.0) + (-a.abs()).exp().ln_1p()
}

/// `d/da log(1 + exp(-a)) = -1 / (1 + exp(a))`.
#[inline]
pub fn logistic_loss_derivative(a: f64) -> f64 {
    if a >= 0.0 {
        let e = (-a).exp();
        -e / (1.0 + e)
    } else {
        -1.0 / (1.0 + a.exp())
    }
}

/// Mean of `l(y f)` over the samples.
pub fn loss_on_dataset(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("loss over an empty dataset"));
    }
    let mut total = 0.0;
    for s in samples {
        let out = forward(s.z(), params)?;
        total += logistic_loss(s.y() * out.output);
    }
    Ok(total / samples.len() as f64)
}
