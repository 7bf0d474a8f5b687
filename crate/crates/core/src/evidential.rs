//! Dirichlet evidence head math: concentrations from logits, the
//! vacuity/dissonance decomposition, and the training objective
//! (evidential MSE + annealed KL-to-uniform + auxiliary AOD MSE).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::special::{digamma, ln_gamma, trigamma};
use crate::tensor::NnError;

/// Stable softplus, ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Per-input head output: concentrations plus everything derived from them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirichletOutput {
    pub alpha: Vec<f64>,
    pub total_evidence: f64,
    pub probs: Vec<f64>,
    pub vacuity: f64,
    pub dissonance: f64,
    pub aod_pred: f64,
}

impl DirichletOutput {
    pub fn from_alpha(alpha: Vec<f64>, aod_pred: f64) -> Result<Self, NnError> {
        let (probs, vacuity, dissonance) = decompose_uncertainty(&alpha)?;
        let total_evidence = alpha.iter().sum();
        Ok(DirichletOutput { alpha, total_evidence, probs, vacuity, dissonance, aod_pred })
    }

    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for k in 1..self.probs.len() {
            if self.probs[k] > self.probs[best] {
                best = k;
            }
        }
        best
    }

    /// Max predictive probability; the confidence used for calibration.
    pub fn confidence(&self) -> f64 {
        self.probs[self.predicted_class()]
    }
}

/// alpha_k = softplus(logit_k) + 1, strictly > 1 for finite logits.
pub fn evidence_from_logits(logits: &[f64]) -> Result<Vec<f64>, NnError> {
    if logits.len() < 2 {
        return Err(NnError::Domain(format!("need K >= 2 logits, got {}", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("logits must be finite".into()));
    }
    Ok(logits.iter().map(|&z| softplus(z) + 1.0).collect())
}

fn check_alpha(alpha: &[f64]) -> Result<(), NnError> {
    if alpha.len() < 2 {
        return Err(NnError::Domain("alpha needs K >= 2".into()));
    }
    for &a in alpha {
        if !(a >= 1.0) || !a.is_finite() {
            return Err(NnError::Domain(format!("alpha entries must be finite and >= 1, got {a}")));
        }
    }
    Ok(())
}

fn check_one_hot(target: &[f64], k: usize) -> Result<usize, NnError> {
    if target.len() != k {
        return Err(NnError::Shape(format!(
            "target length {} does not match K = {k}",
            target.len()
        )));
    }
    let mut hot = None;
    for (i, &t) in target.iter().enumerate() {
        if t == 1.0 {
            if hot.replace(i).is_some() {
                return Err(NnError::Domain("target has more than one hot entry".into()));
            }
        } else if t != 0.0 {
            return Err(NnError::Domain(format!("target entry {t} is not 0 or 1")));
        }
    }
    hot.ok_or_else(|| NnError::Domain("target has no hot entry".into()))
}

/// Probabilities alpha/S, vacuity K/S, and the pairwise dissonance sum
/// over ordered pairs k != j.
pub fn decompose_uncertainty(alpha: &[f64]) -> Result<(Vec<f64>, f64, f64), NnError> {
    check_alpha(alpha)?;
    let k = alpha.len();
    let s: f64 = alpha.iter().sum();
    let probs: Vec<f64> = alpha.iter().map(|a| a / s).collect();
    let vacuity = k as f64 / s;
    let mut dissonance = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                let balance = 1.0 - (alpha[i] - alpha[j]).abs() / (alpha[i] + alpha[j]);
                dissonance += probs[i] * probs[j] * balance;
            }
        }
    }
    Ok((probs, vacuity, dissonance))
}

/// Type-II MSE evidential loss: squared error of the Dirichlet mean against
/// the one-hot target, plus the Dirichlet variance term (optional for
/// ablation).
pub fn edl_mse_loss_with(
    alpha: &[f64],
    target: &[f64],
    include_variance: bool,
) -> Result<f64, NnError> {
    check_alpha(alpha)?;
    check_one_hot(target, alpha.len())?;
    let s: f64 = alpha.iter().sum();
    let mut loss = 0.0;
    for (a, y) in alpha.iter().zip(target) {
        let p = a / s;
        loss += (y - p) * (y - p);
        if include_variance {
            loss += p * (1.0 - p) / (s + 1.0);
        }
    }
    Ok(loss)
}

pub fn edl_mse_loss(alpha: &[f64], target: &[f64]) -> Result<f64, NnError> {
    edl_mse_loss_with(alpha, target, true)
}

/// d(edl loss)/d(alpha).
pub fn edl_mse_grad(alpha: &[f64], target: &[f64], include_variance: bool) -> Vec<f64> {
    let k = alpha.len();
    let s: f64 = alpha.iter().sum();
    let probs: Vec<f64> = alpha.iter().map(|a| a / s).collect();
    let variance_total: f64 = if include_variance {
        probs.iter().map(|p| p * (1.0 - p) / (s + 1.0)).sum()
    } else {
        0.0
    };
    let mut grad = vec![0.0; k];
    for j in 0..k {
        let mut g = 0.0;
        for i in 0..k {
            // dp_i/da_j = (delta_ij - p_i) / S
            let dp = (if i == j { 1.0 } else { 0.0 } - probs[i]) / s;
            g += -2.0 * (target[i] - probs[i]) * dp;
            if include_variance {
                g += (1.0 - 2.0 * probs[i]) / (s + 1.0) * dp;
            }
        }
        if include_variance {
            g -= variance_total / (s + 1.0);
        }
        grad[j] = g;
    }
    grad
}

fn alpha_tilde(alpha: &[f64], target: &[f64]) -> Vec<f64> {
    alpha
        .iter()
        .zip(target)
        .map(|(&a, &y)| y + (1.0 - y) * a)
        .collect()
}

/// KL( Dir(alpha~) || Dir(1) ) where alpha~ strips evidence from the true
/// class; penalizes evidence placed on wrong classes.
pub fn kl_regularizer(alpha: &[f64], target: &[f64]) -> Result<f64, NnError> {
    check_alpha(alpha)?;
    check_one_hot(target, alpha.len())?;
    let at = alpha_tilde(alpha, target);
    let k = at.len() as f64;
    let s: f64 = at.iter().sum();
    let mut kl = ln_gamma(s) - ln_gamma(k);
    for &a in &at {
        kl -= ln_gamma(a);
        kl += (a - 1.0) * (digamma(a) - digamma(s));
    }
    // exact zero at the minimum; tiny negative round-off clamped
    Ok(kl.max(0.0))
}

/// d(kl)/d(alpha); zero on the true class since alpha~ ignores it there.
pub fn kl_grad(alpha: &[f64], target: &[f64]) -> Vec<f64> {
    let at = alpha_tilde(alpha, target);
    let k = at.len() as f64;
    let s: f64 = at.iter().sum();
    let common = (s - k) * trigamma(s);
    at.iter()
        .zip(target)
        .map(|(&a, &y)| (1.0 - y) * ((a - 1.0) * trigamma(a) - common))
        .collect()
}

/// Optional class-weighted cross-entropy on the predictive probabilities,
/// -w_y ln p_y; an imbalance mitigation offered alongside weighted
/// sampling, disabled by default.
pub fn weighted_ce_loss(
    alpha: &[f64],
    target: &[f64],
    class_weights: &[f64],
) -> Result<f64, NnError> {
    check_alpha(alpha)?;
    let hot = check_one_hot(target, alpha.len())?;
    if class_weights.len() != alpha.len() {
        return Err(NnError::Shape("class weight length mismatch".into()));
    }
    let s: f64 = alpha.iter().sum();
    Ok(-class_weights[hot] * libm::log(alpha[hot] / s))
}

/// d(weighted ce)/d(alpha).
pub fn weighted_ce_grad(alpha: &[f64], target: &[f64], class_weights: &[f64]) -> Vec<f64> {
    let hot = target.iter().position(|&t| t == 1.0).expect("one-hot");
    let s: f64 = alpha.iter().sum();
    let w = class_weights[hot];
    alpha
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let delta = if j == hot { 1.0 } else { 0.0 };
            // dL/da_j = -w * (delta/a_y - 1/S)
            -w * (delta / alpha[hot] - 1.0 / s)
        })
        .collect()
}

/// Linear KL ramp: min(1, epoch / ramp_epochs).
pub fn anneal_coefficient(epoch: usize, ramp_epochs: usize) -> f64 {
    debug_assert!(ramp_epochs >= 1);
    (epoch as f64 / ramp_epochs as f64).min(1.0)
}

/// Objective weights; lambda values follow the training objective
/// (both 0.1), ramp length and the variance-term/CE toggles are ours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_kl: f64,
    pub lambda_aod: f64,
    pub kl_ramp_epochs: usize,
    pub include_variance_term: bool,
    /// Optional class-weighted cross-entropy on the predictive
    /// probabilities; 0 disables it (the default).
    pub ce_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_kl: 0.1,
            lambda_aod: 0.1,
            kl_ramp_epochs: 10,
            include_variance_term: true,
            ce_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub edl: f64,
    pub kl: f64,
    pub aod: f64,
    pub anneal_coeff: f64,
    pub total: f64,
}

/// total = edl + anneal * lambda_kl * kl + lambda_aod * (aod_pred - aod_true)^2
pub fn total_loss(
    alpha: &[f64],
    target: &[f64],
    aod_pred: f64,
    aod_true: f64,
    epoch: usize,
    cfg: &LossConfig,
) -> Result<LossBreakdown, NnError> {
    let edl = edl_mse_loss_with(alpha, target, cfg.include_variance_term)?;
    let kl = kl_regularizer(alpha, target)?;
    let aod = (aod_pred - aod_true) * (aod_pred - aod_true);
    let anneal_coeff = anneal_coefficient(epoch, cfg.kl_ramp_epochs);
    let total = edl + anneal_coeff * cfg.lambda_kl * kl + cfg.lambda_aod * aod;
    Ok(LossBreakdown { edl, kl, aod, anneal_coeff, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn evidence_from_zero_logits() {
        let alpha = evidence_from_logits(&[0.0, 0.0, 0.0]).unwrap();
        for a in &alpha {
            assert_relative_eq!(*a, 1.0 + core::f64::consts::LN_2, epsilon = 1e-12);
        }
    }

    #[test]
    fn evidence_limits() {
        let alpha = evidence_from_logits(&[-50.0, 10.0]).unwrap();
        assert!(alpha[0] - 1.0 < 1e-20);
        // softplus(10) = ln(1 + e^10)
        assert_relative_eq!(alpha[1], libm::log1p(libm::exp(10.0)) + 1.0, epsilon = 1e-12);
        assert_relative_eq!(alpha[1], 11.0000454, epsilon = 1e-6);
    }

    #[test]
    fn evidence_rejects_bad_input() {
        assert!(evidence_from_logits(&[1.0]).is_err());
        assert!(evidence_from_logits(&[f64::NAN, 0.0]).is_err());
        assert!(evidence_from_logits(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn decompose_uniform_alpha() {
        let (probs, vac, dis) = decompose_uncertainty(&[1.0, 1.0, 1.0]).unwrap();
        for p in &probs {
            assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_relative_eq!(vac, 1.0, epsilon = 1e-15);
        assert_relative_eq!(dis, 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn decompose_hand_values() {
        let (_, vac, _) = decompose_uncertainty(&[98.0, 1.0, 1.0]).unwrap();
        assert_relative_eq!(vac, 0.03, epsilon = 1e-15);

        let (probs, _, dis) = decompose_uncertainty(&[4.0, 2.0, 2.0]).unwrap();
        assert_relative_eq!(probs[0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(probs[1], 0.25, epsilon = 1e-15);
        // 4 * 0.125 * (1 - 2/6) + 2 * 0.0625 * 1
        assert_relative_eq!(dis, 0.458333, epsilon = 1e-6);
    }

    #[test]
    fn decompose_rejects_sub_unit_alpha() {
        assert!(matches!(
            decompose_uncertainty(&[0.5, 1.0, 1.0]),
            Err(NnError::Domain(_))
        ));
    }

    #[test]
    fn dissonance_vanishes_under_dominance() {
        let (_, _, dis) = decompose_uncertainty(&[1000.0, 1.0, 1.0]).unwrap();
        assert!(dis < 0.01, "dissonance {dis}");
    }

    #[test]
    fn vacuity_strictly_decreases_with_evidence() {
        let base = [2.0, 3.0, 4.0];
        let (_, v0, _) = decompose_uncertainty(&base).unwrap();
        for k in 0..3 {
            let mut a = base;
            a[k] += 0.5;
            let (_, v1, _) = decompose_uncertainty(&a).unwrap();
            assert!(v1 < v0);
        }
    }

    #[test]
    fn joint_scaling_keeps_probs_scales_vacuity() {
        let alpha = [2.0, 4.0, 6.0];
        let c = 3.0;
        let scaled: Vec<f64> = alpha.iter().map(|a| a * c).collect();
        let (p0, v0, _) = decompose_uncertainty(&alpha).unwrap();
        let (p1, v1, _) = decompose_uncertainty(&scaled).unwrap();
        for (a, b) in p0.iter().zip(&p1) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_relative_eq!(v1, v0 / c, epsilon = 1e-12);
    }

    #[test]
    fn argmax_probs_equals_argmax_alpha() {
        let alpha = [1.2, 7.0, 3.3];
        let out = DirichletOutput::from_alpha(alpha.to_vec(), 0.0).unwrap();
        assert_eq!(out.predicted_class(), 1);
    }

    #[test]
    fn edl_loss_hand_values() {
        // alpha (1,1,1), y = e1: 2/3 + 1/6 = 5/6
        let l = edl_mse_loss(&[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert_relative_eq!(l, 5.0 / 6.0, epsilon = 1e-12);
        // alpha (2,1,1), y = e2: 0.875 + 0.125 = 1.0
        let l = edl_mse_loss(&[2.0, 1.0, 1.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(l, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn edl_loss_vanishes_in_perfect_limit() {
        let l = edl_mse_loss(&[1e9, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(l < 1e-8, "loss {l}");
    }

    #[test]
    fn edl_rejects_non_one_hot() {
        assert!(edl_mse_loss(&[1.0, 1.0], &[0.5, 0.5]).is_err());
        assert!(edl_mse_loss(&[1.0, 1.0], &[1.0, 1.0]).is_err());
        assert!(edl_mse_loss(&[1.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn kl_zero_at_uniform() {
        let kl = kl_regularizer(&[1.0, 1.0, 1.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_relative_eq!(kl, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_hand_value() {
        // alpha (5,1,2), y = e1 -> alpha~ = (1,1,2)
        // KL = ln Gamma(4) - ln Gamma(3) - ln Gamma(2) + (psi(2) - psi(4))
        //    = ln 3 - 5/6  (psi(4) - psi(2) = 1/2 + 1/3)
        let kl = kl_regularizer(&[5.0, 1.0, 2.0], &[1.0, 0.0, 0.0]).unwrap();
        let expect = 3.0_f64.ln() - 5.0 / 6.0;
        assert_relative_eq!(kl, expect, epsilon = 1e-12);
        assert_relative_eq!(kl, 0.26528, epsilon = 1e-5);
    }

    #[test]
    fn kl_monotone_in_off_class_evidence() {
        let y = [1.0, 0.0, 0.0];
        let a = kl_regularizer(&[1.0, 1.0, 2.0], &y).unwrap();
        let b = kl_regularizer(&[1.0, 1.0, 3.0], &y).unwrap();
        assert!(b > a);
    }

    #[test]
    fn kl_nonnegative_everywhere() {
        let mut rng = crate::rng::Rng::new(11);
        for _ in 0..200 {
            let alpha = [
                1.0 + 9.0 * rng.uniform(),
                1.0 + 9.0 * rng.uniform(),
                1.0 + 9.0 * rng.uniform(),
            ];
            let mut y = [0.0; 3];
            y[rng.index(3)] = 1.0;
            assert!(kl_regularizer(&alpha, &y).unwrap() >= 0.0);
        }
    }

    #[test]
    fn anneal_ramp() {
        assert_eq!(anneal_coefficient(0, 10), 0.0);
        assert_eq!(anneal_coefficient(10, 10), 1.0);
        assert_eq!(anneal_coefficient(5, 10), 0.5);
        assert_eq!(anneal_coefficient(25, 10), 1.0);
    }

    #[test]
    fn total_loss_hand_value() {
        // alpha (1,1,1), y = e1, aod error 1, epoch 0:
        // 5/6 + 0 + 0.1 * 1 = 0.93333
        let cfg = LossConfig::default();
        let lb = total_loss(&[1.0, 1.0, 1.0], &[1.0, 0.0, 0.0], 1.0, 0.0, 0, &cfg).unwrap();
        assert_relative_eq!(lb.total, 5.0 / 6.0 + 0.1, epsilon = 1e-12);
        assert_relative_eq!(lb.total, 0.93333, epsilon = 1e-5);
    }

    #[test]
    fn total_loss_composes_from_parts() {
        let cfg = LossConfig::default();
        let alpha = [5.0, 1.0, 2.0];
        let y = [1.0, 0.0, 0.0];
        let lb = total_loss(&alpha, &y, 0.7, 0.3, 20, &cfg).unwrap();
        let edl = edl_mse_loss(&alpha, &y).unwrap();
        let kl = kl_regularizer(&alpha, &y).unwrap();
        let aod = (0.7f64 - 0.3).powi(2);
        assert_relative_eq!(lb.total, edl + 0.1 * kl + 0.1 * aod, epsilon = 1e-12);
        assert_eq!(lb.anneal_coeff, 1.0);
    }

    #[test]
    fn total_loss_vanishes_in_perfect_limit() {
        let cfg = LossConfig::default();
        let lb = total_loss(&[1e9, 1.0, 1.0], &[1.0, 0.0, 0.0], 0.5, 0.5, 50, &cfg).unwrap();
        assert!(lb.total < 1e-8, "total {}", lb.total);
    }

    #[test]
    fn analytic_grads_match_finite_differences() {
        let eps = 1e-6;
        let alpha = [2.3, 1.4, 5.1];
        let y = [0.0, 0.0, 1.0];
        let eg = edl_mse_grad(&alpha, &y, true);
        let kg = kl_grad(&alpha, &y);
        for j in 0..3 {
            let mut hi = alpha;
            let mut lo = alpha;
            hi[j] += eps;
            lo[j] -= eps;
            let fd_e = (edl_mse_loss(&hi, &y).unwrap() - edl_mse_loss(&lo, &y).unwrap())
                / (2.0 * eps);
            let fd_k = (kl_regularizer(&hi, &y).unwrap() - kl_regularizer(&lo, &y).unwrap())
                / (2.0 * eps);
            assert_relative_eq!(eg[j], fd_e, epsilon = 1e-8, max_relative = 1e-7);
            assert_relative_eq!(kg[j], fd_k, epsilon = 1e-8, max_relative = 1e-7);
        }
    }

    #[test]
    fn softplus_stable_tails() {
        assert_relative_eq!(softplus(0.0), core::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!(softplus(-1000.0) < 1e-300);
    }
}
