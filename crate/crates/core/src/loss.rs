//! Binary classification losses and the regression loss for pretraining.
//!
//! Losses operate on predicted probabilities. Probabilities are clamped to
//! [eps, 1-eps] before any log, and the gradients are the analytic
//! derivatives at the clamped values.

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossParams {
    /// Focusing exponent gamma.
    pub gamma: f64,
    /// Class-balance weight on the positive term; 1 - alpha on the negative.
    pub alpha: f64,
    /// Probability clamp epsilon, keeps log() finite.
    pub prob_clamp_eps: f64,
    /// When false, drop the alpha weighting (plain modulated cross-entropy).
    pub alpha_balanced: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        LossParams {
            gamma: 2.0,
            alpha: 0.75,
            prob_clamp_eps: 1e-7,
            alpha_balanced: true,
        }
    }
}

impl LossParams {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::validation(format!("{prefix}.gamma"), "must be >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::validation(
                format!("{prefix}.alpha"),
                format!("must lie in (0,1), got {}", self.alpha),
            ));
        }
        if !(self.prob_clamp_eps > 0.0 && self.prob_clamp_eps < 0.5) {
            return Err(Error::validation(
                format!("{prefix}.prob_clamp_eps"),
                "must lie in (0, 0.5)",
            ));
        }
        Ok(())
    }
}

/// Predicted probabilities paired with ground-truth binary labels.
#[derive(Debug, Clone)]
pub struct BatchPrediction<T> {
    pub probs: Vec<T>,
    pub labels: Vec<u8>,
}

impl<T: Scalar> BatchPrediction<T> {
    pub fn new(probs: Vec<T>, labels: Vec<u8>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if probs.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities vs {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::ShapeMismatch(format!("label {l} is not binary")));
        }
        Ok(BatchPrediction { probs, labels })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

#[inline]
fn clamp_prob<T: Scalar>(p: T, eps: T) -> T {
    p.max(eps).min(T::one() - eps)
}

/// Mean binary cross-entropy and its gradient w.r.t. each probability.
pub fn bce_loss<T: Scalar>(batch: &BatchPrediction<T>, clamp_eps: f64) -> (T, Vec<T>) {
    let eps = T::from_f64(clamp_eps);
    let n = T::from_f64(batch.len() as f64);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(batch.len());
    for (&p, &y) in batch.probs.iter().zip(&batch.labels) {
        let p = clamp_prob(p, eps);
        if y == 1 {
            loss -= p.ln();
            grad.push(-(T::one() / p) / n);
        } else {
            loss -= (T::one() - p).ln();
            grad.push((T::one() / (T::one() - p)) / n);
        }
    }
    (loss / n, grad)
}

/// Focal loss: cross-entropy with the well-classified terms down-weighted by
/// (1-p)^gamma on positives and p^gamma on negatives, alpha-balanced between
/// the classes unless `alpha_balanced` is off.
pub fn focal_loss<T: Scalar>(batch: &BatchPrediction<T>, params: &LossParams) -> (T, Vec<T>) {
    let eps = T::from_f64(params.prob_clamp_eps);
    let gamma = T::from_f64(params.gamma);
    let (a_pos, a_neg) = if params.alpha_balanced {
        (T::from_f64(params.alpha), T::from_f64(1.0 - params.alpha))
    } else {
        (T::one(), T::one())
    };
    let n = T::from_f64(batch.len() as f64);
    let one = T::one();
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(batch.len());
    for (&p, &y) in batch.probs.iter().zip(&batch.labels) {
        let p = clamp_prob(p, eps);
        if y == 1 {
            let q = one - p;
            let modulator = q.powf(gamma);
            loss -= a_pos * modulator * p.ln();
            // d/dp [-(1-p)^g ln p] = gamma (1-p)^(g-1) ln p - (1-p)^g / p
            let d = if params.gamma == 0.0 {
                -(one / p)
            } else {
                gamma * q.powf(gamma - one) * p.ln() - modulator / p
            };
            grad.push(a_pos * d / n);
        } else {
            let q = one - p;
            let modulator = p.powf(gamma);
            loss -= a_neg * modulator * q.ln();
            // d/dp [-p^g ln(1-p)] = -gamma p^(g-1) ln(1-p) + p^g / (1-p)
            let d = if params.gamma == 0.0 {
                one / q
            } else {
                -gamma * p.powf(gamma - one) * q.ln() + modulator / q
            };
            grad.push(a_neg * d / n);
        }
    }
    (loss / n, grad)
}

/// Mean squared error and gradient 2(o - t)/N for the pretext regression.
pub fn mse_loss<T: Scalar>(outputs: &[T], targets: &[T]) -> Result<(T, Vec<T>)> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "mse: {} outputs vs {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let n = T::from_f64(outputs.len() as f64);
    let two = T::from_f64(2.0);
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(outputs.len());
    for (&o, &t) in outputs.iter().zip(targets) {
        let d = o - t;
        loss += d * d;
        grad.push(two * d / n);
    }
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(probs: Vec<f64>, labels: Vec<u8>) -> BatchPrediction<f64> {
        BatchPrediction::new(probs, labels).unwrap()
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let (loss, _) = bce_loss(&batch(vec![0.5], vec![1]), 1e-7);
        assert!((loss - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let (loss, _) = bce_loss(&batch(vec![1.0 - 1e-7], vec![1]), 1e-7);
        assert!(loss >= 0.0 && loss < 1e-6);
    }

    #[test]
    fn bce_is_mean_of_per_sample_losses() {
        let (l1, _) = bce_loss(&batch(vec![0.3], vec![1]), 1e-7);
        let (l2, _) = bce_loss(&batch(vec![0.8], vec![0]), 1e-7);
        let (both, _) = bce_loss(&batch(vec![0.3, 0.8], vec![1, 0]), 1e-7);
        assert!((both - (l1 + l2) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn focal_half_prob_positive_sample() {
        // gamma=2, alpha=0.75, p=0.5, y=1: 0.75 * 0.25 * ln 2 = 0.129965...
        let params = LossParams::default();
        let (loss, _) = focal_loss(&batch(vec![0.5], vec![1]), &params);
        assert!((loss - 0.75 * 0.25 * 0.6931471805599453).abs() < 1e-9);
        assert!((loss - 0.129965).abs() < 1e-6);
    }

    #[test]
    fn focal_well_classified_positive() {
        // gamma=2, alpha=0.75, p=0.9, y=1: 0.75 * 0.01 * (-ln 0.9) = 7.902e-4
        let params = LossParams::default();
        let (loss, _) = focal_loss(&batch(vec![0.9], vec![1]), &params);
        let expected = 0.75 * 0.01 * (-(0.9f64).ln());
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 7.902e-4).abs() < 1e-6);
    }

    #[test]
    fn focal_gamma0_alpha_half_is_half_bce() {
        let params = LossParams {
            gamma: 0.0,
            alpha: 0.5,
            ..Default::default()
        };
        let probs = vec![0.1, 0.4, 0.6, 0.93];
        let labels = vec![0, 1, 1, 0];
        let (f, fg) = focal_loss(&batch(probs.clone(), labels.clone()), &params);
        let (b, bg) = bce_loss(&batch(probs, labels), params.prob_clamp_eps);
        assert!((f - 0.5 * b).abs() < 1e-15);
        for (x, y) in fg.iter().zip(&bg) {
            assert!((x - 0.5 * y).abs() < 1e-15);
        }
    }

    #[test]
    fn printed_form_drops_alpha() {
        let balanced = LossParams::default();
        let printed = LossParams {
            alpha_balanced: false,
            ..Default::default()
        };
        let b = batch(vec![0.5], vec![1]);
        let (lb, _) = focal_loss(&b, &balanced);
        let (lp, _) = focal_loss(&b, &printed);
        assert!((lp - 0.25 * 0.6931471805599453).abs() < 1e-12);
        assert!((lb - 0.75 * lp).abs() < 1e-12);
    }

    #[test]
    fn focal_bounded_by_alpha_weighted_bce() {
        // modulating factors are <= 1, so focal <= alpha-weighted BCE
        let params = LossParams::default();
        for (p, y) in [(0.2, 1u8), (0.7, 1), (0.3, 0), (0.95, 0)] {
            let b = batch(vec![p], vec![y]);
            let (f, _) = focal_loss(&b, &params);
            let (bce, _) = bce_loss(&b, params.prob_clamp_eps);
            let a = if y == 1 { 0.75 } else { 0.25 };
            assert!(f <= a * bce + 1e-15);
            assert!(f >= 0.0);
        }
    }

    #[test]
    fn mse_gradient_formula() {
        let (loss, grad) = mse_loss(&[3.0f64, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(loss, 2.0);
        assert_eq!(grad, vec![2.0 * 2.0 / 2.0, 0.0]);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(BatchPrediction::<f64>::new(vec![], vec![]).is_err());
        assert!(BatchPrediction::new(vec![0.5], vec![2]).is_err());
    }
}
