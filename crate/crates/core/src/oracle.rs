//! Brute-force references for the test suites.
//!
//! Nothing here is called by the production paths, and nothing here calls
//! them: each function recomputes its result the slow, obvious way.

use crate::encoder::TokenMatrix;
use crate::error::{CakiError, Result};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Floor on the denominator of [`relative_error`].
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Central-difference gradient of a scalar functional of a token matrix.
pub fn fd_gradient<F>(loss: F, point: &TokenMatrix, h: f64) -> Result<TokenMatrix>
where
    F: Fn(&TokenMatrix) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(CakiError::invalid(format!("step must be positive, got {h}")));
    }
    let mut grad = TokenMatrix::zeros(point.rows(), point.cols());
    for r in 0..point.rows() {
        for c in 0..point.cols() {
            let mut plus = point.clone();
            plus.set(r, c, point.get(r, c) + h);
            let mut minus = point.clone();
            minus.set(r, c, point.get(r, c) - h);
            let (fp, fm) = (loss(&plus)?, loss(&minus)?);
            if !fp.is_finite() || !fm.is_finite() {
                return Err(CakiError::Numeric(format!("non-finite loss at entry ({r}, {c})")));
            }
            grad.set(r, c, (fp - fm) / (2.0 * h));
        }
    }
    Ok(grad)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest entrywise [`relative_error`] between two equally shaped matrices.
pub fn max_relative_error(a: &TokenMatrix, b: &TokenMatrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}

/// Full stable sort by descending score (ties keep ascending index),
/// truncated to `min(k, len)`.
pub fn brute_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    order.truncate(k.min(scores.len()));
    order
}

/// `coarse_j + Σ_i β γ_i p_i[j]`, accumulated class by class.
pub fn explicit_refine(fine_predictions: &[Vec<f64>], gammas: &[f64], coarse: &[f64], beta: f64) -> Result<Vec<f64>> {
    if fine_predictions.len() != gammas.len() {
        return Err(CakiError::invalid(format!(
            "{} predictions but {} weights",
            fine_predictions.len(),
            gammas.len()
        )));
    }
    if let Some(p) = fine_predictions.iter().find(|p| p.len() != coarse.len()) {
        return Err(CakiError::invalid(format!(
            "prediction of length {} against {} coarse scores",
            p.len(),
            coarse.len()
        )));
    }
    let mut out = Vec::with_capacity(coarse.len());
    for j in 0..coarse.len() {
        let mut v = coarse[j];
        for i in 0..gammas.len() {
            v += beta * gammas[i] * fine_predictions[i][j];
        }
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, Matrix};

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64);
        let g = fd_gradient(|_| Ok(4.2), &p, FD_STEP).unwrap();
        assert_eq!(g, Matrix::zeros(2, 3));
    }

    #[test]
    fn linear_loss_recovers_coefficients() {
        let coeffs = Matrix::from_fn(3, 2, |r, c| 0.5 * r as f64 - c as f64 + 0.25);
        let p = Matrix::from_fn(3, 2, |r, c| (r + c) as f64 * 0.1);
        let g = fd_gradient(|x| Ok(dot(coeffs.as_slice(), x.as_slice())), &p, FD_STEP).unwrap();
        for (a, b) in g.as_slice().iter().zip(coeffs.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fd_rejects_bad_step_and_nan() {
        let p = Matrix::zeros(1, 1);
        assert!(fd_gradient(|_| Ok(0.0), &p, 0.0).is_err());
        assert!(matches!(fd_gradient(|_| Ok(f64::NAN), &p, 1e-3), Err(CakiError::Numeric(_))));
    }

    #[test]
    fn brute_topk_cases() {
        assert_eq!(brute_topk(&[3.0, 1.0, 2.0], 2), vec![0, 2]);
        assert_eq!(brute_topk(&[1.0, 1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(brute_topk(&[1.0], 5), vec![0]);
    }

    #[test]
    fn explicit_refine_cases() {
        let coarse = vec![0.2, 0.8];
        let p = vec![vec![0.9, 0.1]];
        assert_eq!(explicit_refine(&p, &[1.0], &coarse, 0.0).unwrap(), coarse);
        let out = explicit_refine(&p, &[1.0], &coarse, 1.0).unwrap();
        assert!((out[0] - 1.1).abs() < 1e-15 && (out[1] - 0.9).abs() < 1e-15);
        assert!(explicit_refine(&p, &[1.0, 2.0], &coarse, 1.0).is_err());
        assert!(explicit_refine(&[vec![1.0]], &[1.0], &coarse, 1.0).is_err());
    }
}
