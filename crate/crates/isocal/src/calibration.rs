//! Calibration objectives over the output embedding matrix: cosine
//! regularization and spectrum control with polynomial or exponential
//! singular-value priors. All gradients are analytic and checked against
//! central finite differences in the tests.

use crate::error::{Error, Result};
use crate::numkit::{axpy, dot, norm, svd, EmbeddingMatrix, Mat, SvdFactors};

/// Minimum gap between consecutive singular values for the SVD gradient.
pub const SPECTRUM_GAP_MIN: f64 = 1e-8;
/// Rows below this norm cannot be normalized for the cosine objective.
const ROW_NORM_MIN: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
pub struct CosRegConfig {
    pub lambda_c: f64,
}

impl CosRegConfig {
    pub fn new(lambda_c: f64) -> Result<Self> {
        if lambda_c < 0.0 || !lambda_c.is_finite() {
            return Err(Error::InvalidArg("lambda_c must be finite and >= 0".into()));
        }
        Ok(CosRegConfig { lambda_c })
    }
}

impl Default for CosRegConfig {
    fn default() -> Self {
        CosRegConfig { lambda_c: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpectrumKind {
    Polynomial,
    Exponential,
}

/// Prior sigma_k = c1 k^gamma (polynomial) or c1 exp(-c2 k^gamma) (exponential).
#[derive(Clone, Copy, Debug)]
pub struct SpectrumConfig {
    pub kind: SpectrumKind,
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    pub gamma: f64,
}

impl SpectrumConfig {
    pub fn polynomial(lambda: f64, c1: f64, gamma: f64) -> Result<Self> {
        Self::validate(lambda, c1, 1.0)?;
        Ok(SpectrumConfig {
            kind: SpectrumKind::Polynomial,
            lambda,
            c1,
            c2: 0.0,
            gamma,
        })
    }

    pub fn exponential(lambda: f64, c1: f64, c2: f64, gamma: f64) -> Result<Self> {
        Self::validate(lambda, c1, c2)?;
        Ok(SpectrumConfig {
            kind: SpectrumKind::Exponential,
            lambda,
            c1,
            c2,
            gamma,
        })
    }

    fn validate(lambda: f64, c1: f64, c2: f64) -> Result<()> {
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(Error::InvalidArg("lambda must be finite and >= 0".into()));
        }
        if c1 <= 0.0 {
            return Err(Error::InvalidArg("c1 must be > 0".into()));
        }
        if c2 <= 0.0 {
            return Err(Error::InvalidArg("c2 must be > 0".into()));
        }
        Ok(())
    }
}

/// Prior value for the k-th singular value, k counted from 1.
pub fn spectrum_prior(k: usize, cfg: &SpectrumConfig) -> f64 {
    debug_assert!(k >= 1);
    let kf = k as f64;
    match cfg.kind {
        SpectrumKind::Polynomial => cfg.c1 * kf.powf(cfg.gamma),
        SpectrumKind::Exponential => cfg.c1 * (-cfg.c2 * kf.powf(cfg.gamma)).exp(),
    }
}

fn unit_rows(w: &EmbeddingMatrix) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut rows = Vec::with_capacity(w.rows());
    let mut norms = Vec::with_capacity(w.rows());
    for i in 0..w.rows() {
        let n = norm(w.row(i));
        if n < ROW_NORM_MIN {
            return Err(Error::DegenerateEmbedding { row: i, norm: n });
        }
        rows.push(w.row(i).iter().map(|x| x / n).collect());
        norms.push(n);
    }
    Ok((rows, norms))
}

/// lambda_c / N^2 * sum_{i != j} w_hat_i . w_hat_j, via the O(Nd) identity
/// sum_{i != j} w_hat_i . w_hat_j = |sum_i w_hat_i|^2 - N.
pub fn cosreg_loss(w: &EmbeddingMatrix, cfg: &CosRegConfig) -> Result<f64> {
    if w.rows() < 2 {
        return Err(Error::InvalidArg(
            "cosine regularization needs at least 2 rows".into(),
        ));
    }
    let (rows, _) = unit_rows(w)?;
    let mut s = vec![0.0; w.dim()];
    for r in &rows {
        axpy(&mut s, r, 1.0);
    }
    let n = w.rows() as f64;
    Ok(cfg.lambda_c * (dot(&s, &s) - n) / (n * n))
}

/// Analytic gradient of `cosreg_loss` with respect to every entry of W,
/// accounting for the row normalization: the sum direction is projected onto
/// the tangent space of the unit sphere at each row and divided by the row
/// norm.
pub fn cosreg_grad(w: &EmbeddingMatrix, cfg: &CosRegConfig) -> Result<Mat> {
    if w.rows() < 2 {
        return Err(Error::InvalidArg(
            "cosine regularization needs at least 2 rows".into(),
        ));
    }
    let (rows, norms) = unit_rows(w)?;
    let d = w.dim();
    let mut s = vec![0.0; d];
    for r in &rows {
        axpy(&mut s, r, 1.0);
    }
    let n = w.rows() as f64;
    let scale = 2.0 * cfg.lambda_c / (n * n);
    let mut grad = Mat::zeros(w.rows(), d);
    for i in 0..w.rows() {
        let proj = dot(&rows[i], &s);
        let out = grad.row_mut(i);
        for j in 0..d {
            out[j] = scale * (s[j] - proj * rows[i][j]) / norms[i];
        }
    }
    Ok(grad)
}

/// lambda * sum_k (sigma_k - prior(k))^2 over all r = min(N, d) singular values.
pub fn spectrum_loss(factors: &SvdFactors, cfg: &SpectrumConfig) -> f64 {
    let mut sum = 0.0;
    for (k, sigma) in factors.singular_values.iter().enumerate() {
        let diff = sigma - spectrum_prior(k + 1, cfg);
        sum += diff * diff;
    }
    cfg.lambda * sum
}

/// Gradient of the spectrum penalty with respect to W, via
/// d sigma_k / dW = u_k v_k^T for simple singular values. Recomputes the SVD;
/// errors when consecutive singular values are closer than `SPECTRUM_GAP_MIN`
/// (callers are expected to skip the regularizer step and log it).
pub fn spectrum_grad_w(w: &EmbeddingMatrix, cfg: &SpectrumConfig) -> Result<Mat> {
    let factors = svd(w)?;
    let sigma = &factors.singular_values;
    for k in 0..sigma.len().saturating_sub(1) {
        let gap = sigma[k] - sigma[k + 1];
        if gap < SPECTRUM_GAP_MIN {
            return Err(Error::DegenerateSpectrum {
                k: k + 1,
                gap,
                min: SPECTRUM_GAP_MIN,
            });
        }
    }
    let mut grad = Mat::zeros(w.rows(), w.dim());
    for k in 0..sigma.len() {
        let coeff = 2.0 * cfg.lambda * (sigma[k] - spectrum_prior(k + 1, cfg));
        if coeff == 0.0 {
            continue;
        }
        for i in 0..w.rows() {
            let u = factors.left.get(i, k) * coeff;
            if u == 0.0 {
                continue;
            }
            let row = grad.row_mut(i);
            for (j, g) in row.iter_mut().enumerate() {
                *g += u * factors.right.get(j, k);
            }
        }
    }
    Ok(grad)
}
