//! Scalar objectives: prediction losses, the action regularizer, the total
//! reward `r̂ = r - ℓ`, and discounted returns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Real;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("class index {class} out of range for {arity} logits")]
    ClassOutOfRange { class: usize, arity: usize },
}

/// Reward and loss shaping knobs shared by environments and agents.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Coefficient on `‖a‖²` added to the environment reward. Negative by
    /// default so the term acts as a movement penalty.
    pub action_reg_coeff: f64,
    /// Discount factor, must lie in `[0, 1)`.
    pub gamma: f64,
    /// Weight of the squared chordal angle term in the pose loss.
    pub pose_angle_weight: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            action_reg_coeff: -1e-3,
            gamma: 0.99,
            pose_angle_weight: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !self.action_reg_coeff.is_finite() || !self.pose_angle_weight.is_finite() {
            return Err("reward coefficients must be finite".into());
        }
        Ok(())
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_probs<F: Real>(logits: &[F]) -> Vec<F> {
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let exps: Vec<F> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum = exps.iter().copied().fold(F::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy `-log p_true` of the softmax over `logits`.
pub fn ce_loss<F: Real>(true_class: usize, logits: &[F]) -> Result<F, LossError> {
    if true_class >= logits.len() {
        return Err(LossError::ClassOutOfRange {
            class: true_class,
            arity: logits.len(),
        });
    }
    // -log softmax[k] computed directly from the shifted logits for stability.
    let max = logits
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    let log_sum = logits
        .iter()
        .map(|&z| (z - max).exp())
        .fold(F::zero(), |a, b| a + b)
        .ln();
    Ok(log_sum - (logits[true_class] - max))
}

/// Pose loss: squared Euclidean position error plus `weight` times the squared
/// chordal distance between the predicted and true `(sin θ, cos θ)` pairs.
///
/// `predicted` carries raw `(x, y, sin θ, cos θ)` components as produced by a
/// regression head; the true angle is expanded onto the unit circle here.
pub fn pose_loss<F: Real>(true_pose: (F, F, F), predicted: (F, F, F, F), weight: F) -> F {
    let (tx, ty, ttheta) = true_pose;
    let (px, py, ps, pc) = predicted;
    let dp = (px - tx) * (px - tx) + (py - ty) * (py - ty);
    let ds = ps - ttheta.sin();
    let dc = pc - ttheta.cos();
    dp + weight * (ds * ds + dc * dc)
}

/// Environment reward term `coeff · ‖control‖²`.
pub fn action_regularizer(control: [f64; 2], coeff: f64) -> f64 {
    coeff * (control[0] * control[0] + control[1] * control[1])
}

/// Total reward `r̂ = r - ℓ`.
pub fn total_reward<F: Real>(env_reward: F, prediction_loss: F) -> F {
    env_reward - prediction_loss
}

/// `Σ_t γ^t rewards[t]`.
pub fn discounted_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut acc = 0.0;
    let mut scale = 1.0;
    for &r in rewards {
        acc += scale * r;
        scale *= gamma;
    }
    acc
}
