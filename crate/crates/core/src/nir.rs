//! Neuron incidence, the incidence-redistribution penalty and their
//! gradients.
//!
//! For a batch with penultimate activations `Z` (B × d) and predicted
//! probabilities `p̂`, the incidence of neuron `j` is the
//! probability-weighted mean activation
//!
//! ```text
//! φ_j = Σ_i p̂_i z_ij / (Σ_i p̂_i + ε)
//! ```
//!
//! and the penalty is the population variance of `φ` across neurons. The
//! training objective adds `λ` times that variance to binary cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{NirError, Result};
use crate::matrix::Matrix;

/// Default stability constant in the incidence denominator.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Default regularization strength.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct IncidenceVector {
    pub phi: Vec<f64>,
    /// `Σ p̂_i`, without ε.
    pub weight_sum: f64,
    pub batch_size: usize,
    pub epsilon: f64,
}

impl IncidenceVector {
    pub fn dim(&self) -> usize {
        self.phi.len()
    }

    /// `Σ p̂_i + ε`.
    pub fn denominator(&self) -> f64 {
        self.weight_sum + self.epsilon
    }

    pub fn mean(&self) -> f64 {
        self.phi.iter().sum::<f64>() / self.phi.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub ir: f64,
    pub lambda: f64,
    pub total: f64,
    /// Mean incidence `φ̄`, when the breakdown came from a batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_mean: Option<f64>,
}

fn check_inputs(z: &Matrix, p_hat: &[f64], eps: f64) -> Result<()> {
    if z.rows() == 0 {
        return Err(NirError::Contract("incidence of an empty batch".into()));
    }
    if p_hat.len() != z.rows() {
        return Err(NirError::Contract(format!(
            "{} probabilities for a batch of {}",
            p_hat.len(),
            z.rows()
        )));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(NirError::Config(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    if p_hat.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(NirError::Contract(
            "probabilities must lie in [0, 1]".into(),
        ));
    }
    if !z.is_finite() {
        return Err(NirError::Contract("non-finite activation".into()));
    }
    Ok(())
}

/// Probability-weighted mean activation of every penultimate neuron.
pub fn incidence(z: &Matrix, p_hat: &[f64], eps: f64) -> Result<IncidenceVector> {
    check_inputs(z, p_hat, eps)?;
    let d = z.cols();
    let mut numer = vec![0.0; d];
    let mut weight_sum = 0.0;
    for (i, &p) in p_hat.iter().enumerate() {
        weight_sum += p;
        for (acc, &v) in numer.iter_mut().zip(z.row(i)) {
            *acc += p * v;
        }
    }
    let denom = weight_sum + eps;
    Ok(IncidenceVector {
        phi: numer.into_iter().map(|n| n / denom).collect(),
        weight_sum,
        batch_size: z.rows(),
        epsilon: eps,
    })
}

/// Population variance of the incidences, `(1/d) Σ (φ_j − φ̄)²`.
pub fn ir_loss(phi: &IncidenceVector) -> Result<f64> {
    variance(&phi.phi)
}

pub(crate) fn variance(values: &[f64]) -> Result<f64> {
    let d = values.len();
    if d < 2 {
        return Err(NirError::Contract(format!(
            "incidence variance needs at least 2 neurons, got {d}"
        )));
    }
    // Shifting by the first value makes a constant vector exactly zero.
    let shift = values[0];
    let mean = values.iter().map(|v| v - shift).sum::<f64>() / d as f64;
    Ok(values
        .iter()
        .map(|v| (v - shift - mean).powi(2))
        .sum::<f64>()
        / d as f64)
}

/// Mean binary cross-entropy of probabilities. Logs are clamped away from
/// zero; prefer [`bce_with_logits`] when logits are available.
pub fn bce_loss(p_hat: &[f64], y: &[u8]) -> Result<f64> {
    if p_hat.len() != y.len() || p_hat.is_empty() {
        return Err(NirError::Contract(format!(
            "{} probabilities for {} labels",
            p_hat.len(),
            y.len()
        )));
    }
    let tiny = f64::MIN_POSITIVE;
    let sum: f64 = p_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            if t == 1 {
                -p.max(tiny).ln()
            } else {
                -(1.0 - p).max(tiny).ln()
            }
        })
        .sum();
    Ok(sum / p_hat.len() as f64)
}

/// Mean binary cross-entropy from logits:
/// `max(s, 0) − s·y + ln(1 + e^{−|s|})`.
pub fn bce_with_logits(logits: &[f64], y: &[u8]) -> Result<f64> {
    if logits.len() != y.len() || logits.is_empty() {
        return Err(NirError::Contract(format!(
            "{} logits for {} labels",
            logits.len(),
            y.len()
        )));
    }
    let sum: f64 = logits
        .iter()
        .zip(y)
        .map(|(&s, &t)| s.max(0.0) - s * f64::from(t) + (-s.abs()).exp().ln_1p())
        .sum();
    Ok(sum / logits.len() as f64)
}

/// `∂ bce_with_logits / ∂ s_i = (p̂_i − y_i) / B`.
pub fn bce_logit_gradient(p_hat: &[f64], y: &[u8]) -> Vec<f64> {
    let b = p_hat.len() as f64;
    p_hat
        .iter()
        .zip(y)
        .map(|(&p, &t)| (p - f64::from(t)) / b)
        .collect()
}

pub fn total_loss(bce: f64, ir: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(NirError::Config(format!(
            "lambda must be a finite nonnegative number, got {lambda}"
        )));
    }
    if !bce.is_finite() || !ir.is_finite() {
        return Err(NirError::Contract("non-finite loss component".into()));
    }
    Ok(LossBreakdown {
        bce,
        ir,
        lambda,
        total: bce + lambda * ir,
        phi_mean: None,
    })
}

/// Gradients of `λ·L_IR` with respect to `Z` and to `p̂`.
#[derive(Debug, Clone, PartialEq)]
pub struct NirGradients {
    pub dl_dz: Matrix,
    pub dl_dphat: Vec<f64>,
}

/// With `g_j = (2/d)(φ_j − φ̄)` and `S = Σp̂ + ε`:
/// `∂/∂z_ij = λ g_j p̂_i / S` and `∂/∂p̂_i = λ Σ_j g_j (z_ij − φ_j) / S`.
pub fn nir_backward(z: &Matrix, p_hat: &[f64], eps: f64, lambda: f64) -> Result<NirGradients> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(NirError::Config(format!(
            "lambda must be a finite nonnegative number, got {lambda}"
        )));
    }
    let inc = incidence(z, p_hat, eps)?;
    let d = inc.dim();
    if d < 2 {
        return Err(NirError::Contract(format!(
            "incidence variance needs at least 2 neurons, got {d}"
        )));
    }
    let mean = inc.mean();
    let denom = inc.denominator();
    let g: Vec<f64> = inc
        .phi
        .iter()
        .map(|&p| lambda * 2.0 / d as f64 * (p - mean) / denom)
        .collect();

    let mut dl_dz = Matrix::zeros(z.rows(), d);
    let mut dl_dphat = vec![0.0; z.rows()];
    for (i, &p) in p_hat.iter().enumerate() {
        let zi = z.row(i);
        let mut acc = 0.0;
        for j in 0..d {
            acc += g[j] * (zi[j] - inc.phi[j]);
        }
        dl_dphat[i] = acc;
        for (out, &gj) in dl_dz.row_mut(i).iter_mut().zip(&g) {
            *out = gj * p;
        }
    }
    Ok(NirGradients { dl_dz, dl_dphat })
}
