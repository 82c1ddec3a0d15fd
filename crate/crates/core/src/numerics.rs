//! Dense kernels shared by every stage of the pipeline.
//!
//! All arithmetic is `f64`. Vectors are plain slices; [`Matrix`] is a
//! row-major buffer with explicit shape.

use serde::{Deserialize, Serialize};

use crate::error::{CakiError, Result};

/// Floor applied to the target probability before taking its log.
pub const LOG_FLOOR: f64 = 1e-300;

/// Row-major dense matrix of finite `f64`.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CakiError::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(CakiError::invalid(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CakiError::invalid(format!("non-finite matrix entry at {i}")));
        }
        Ok(Matrix { rows, cols, data })
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
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

    /// Matrix-vector product `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// Transposed product `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        out
    }

    /// Column-wise mean over rows.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Returns `a / ‖a‖`, or a degenerate-input error for a zero vector.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !n.is_finite() {
        return Err(CakiError::Numeric("non-finite norm".into()));
    }
    if n == 0.0 {
        return Err(CakiError::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Temperature-scaled softmax, computed with max subtraction.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(CakiError::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    if scores.is_empty() {
        return Err(CakiError::invalid("softmax of an empty score vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CakiError::invalid("softmax input contains non-finite values"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores
        .iter()
        .map(|&s| ((s - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// Cosine similarity `⟨a, b⟩ / (‖a‖‖b‖)`.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CakiError::invalid(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(CakiError::Degenerate("cosine of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb))
}

/// Negative log-probability of `target`, with the probability floored at
/// [`LOG_FLOOR`].
pub fn cross_entropy(probabilities: &[f64], target: usize) -> Result<f64> {
    let p = *probabilities.get(target).ok_or_else(|| {
        CakiError::invalid(format!(
            "target index {target} out of range for {} classes",
            probabilities.len()
        ))
    })?;
    // -ln(1) is -0.0; report a clean zero.
    Ok((-p.max(LOG_FLOOR).ln()).max(0.0))
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper {
            learning_rate: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(CakiError::invalid(format!("invalid AdamW hyperparameters: {self:?}")))
        }
    }
}

/// First/second moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize) -> Self {
        AdamWState {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
        }
    }

    pub fn for_params(params: &Matrix) -> Self {
        Self::new(params.rows(), params.cols())
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay:
///
/// ```text
/// θ ← θ · (1 − lr·λ)
/// m ← β₁m + (1 − β₁)g,   v ← β₂v + (1 − β₂)g²
/// θ ← θ − lr · m̂ / (√v̂ + ε)
/// ```
pub fn adamw_step(
    params: &Matrix,
    grads: &Matrix,
    state: &AdamWState,
    hyper: &AdamWHyper,
) -> Result<(Matrix, AdamWState)> {
    let shape = params.shape();
    if grads.shape() != shape
        || state.first_moment.shape() != shape
        || state.second_moment.shape() != shape
    {
        return Err(CakiError::invalid(format!(
            "AdamW shape mismatch: params {:?}, grads {:?}, moments {:?}/{:?}",
            shape,
            grads.shape(),
            state.first_moment.shape(),
            state.second_moment.shape()
        )));
    }
    let step = state.step_count + 1;
    let t = step as i32;
    let bias1 = 1.0 - hyper.beta1.powi(t);
    let bias2 = 1.0 - hyper.beta2.powi(t);
    let decay = 1.0 - hyper.learning_rate * hyper.weight_decay;

    let mut next = params.clone();
    let mut m = state.first_moment.clone();
    let mut v = state.second_moment.clone();
    for (((p, &g), mi), vi) in next
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(m.as_mut_slice())
        .zip(v.as_mut_slice())
    {
        *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * g;
        *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * g * g;
        let m_hat = *mi / bias1;
        let v_hat = *vi / bias2;
        *p = *p * decay - hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
    }
    Ok((
        next,
        AdamWState {
            first_moment: m,
            second_moment: v,
            step_count: step,
        },
    ))
}
