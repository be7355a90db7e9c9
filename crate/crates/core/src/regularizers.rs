//! Proximal operators and penalty gradients: elementwise soft-thresholding,
//! group shrinkage, quadratic anchors (optionally Fisher-weighted), and the
//! empirical diagonal Fisher information used by the consolidation baseline.

use thiserror::Error;

use crate::network::{DenNetwork, TaskId};
use crate::tasks::Example;
use crate::trainer::{self, TrainError, TrainableSet};

#[derive(Debug, Error, PartialEq)]
pub enum RegularizerError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Proximal map of `thr * |.|`: `sign(w) * max(|w| - thr, 0)`.
///
/// Returns an exact `0.0` whenever `|w| <= thr` so downstream code can test
/// sparsity with `== 0.0`.
pub fn soft_threshold(w: f64, thr: f64) -> Result<f64, RegularizerError> {
    if thr < 0.0 || !thr.is_finite() {
        return Err(RegularizerError::Argument(format!(
            "threshold must be nonnegative, got {thr}"
        )));
    }
    let m = w.abs() - thr;
    Ok(if m <= 0.0 { 0.0 } else { w.signum() * m })
}

/// Proximal map of `thr * ||.||_2` on a whole group: scales the vector by
/// `max(1 - thr/||v||, 0)`, producing an exact zero vector when the norm is
/// at or below the threshold.
pub fn group_shrink(v: &[f64], thr: f64) -> Result<Vec<f64>, RegularizerError> {
    if thr < 0.0 || !thr.is_finite() {
        return Err(RegularizerError::Argument(format!(
            "threshold must be nonnegative, got {thr}"
        )));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= thr {
        return Ok(vec![0.0; v.len()]);
    }
    let scale = 1.0 - thr / norm;
    Ok(v.iter().map(|x| x * scale).collect())
}

/// Quadratic anchor `strength * sum_i f_i (theta_i - anchor_i)^2` with an
/// optional nonnegative per-coordinate weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPenalty {
    pub anchor: Vec<f64>,
    pub strength: f64,
    pub fisher: Option<Vec<f64>>,
}

impl AnchorPenalty {
    pub fn new(
        anchor: Vec<f64>,
        strength: f64,
        fisher: Option<Vec<f64>>,
    ) -> Result<Self, RegularizerError> {
        if strength < 0.0 || !strength.is_finite() {
            return Err(RegularizerError::Argument(format!(
                "anchor strength must be nonnegative, got {strength}"
            )));
        }
        if let Some(f) = &fisher {
            if f.len() != anchor.len() {
                return Err(RegularizerError::Shape(format!(
                    "fisher length {} != anchor length {}",
                    f.len(),
                    anchor.len()
                )));
            }
            if f.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(RegularizerError::Argument(
                    "fisher entries must be nonnegative and finite".into(),
                ));
            }
        }
        Ok(AnchorPenalty {
            anchor,
            strength,
            fisher,
        })
    }

    /// Plain squared-norm decay toward zero, masked to a subset of
    /// coordinates (used for weight decay that must skip biases).
    pub fn decay(dim: usize, strength: f64, mask: Vec<f64>) -> Result<Self, RegularizerError> {
        AnchorPenalty::new(vec![0.0; dim], strength, Some(mask))
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, t) in theta.iter().enumerate() {
            let d = t - self.anchor[i];
            let f = self.fisher.as_ref().map_or(1.0, |f| f[i]);
            acc += f * d * d;
        }
        self.strength * acc
    }

    /// Accumulates the penalty gradient `2 * strength * f .* (theta - anchor)`
    /// into `grad`.
    pub fn add_grad(&self, theta: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(theta.len(), self.anchor.len());
        for i in 0..theta.len() {
            let f = self.fisher.as_ref().map_or(1.0, |f| f[i]);
            grad[i] += 2.0 * self.strength * f * (theta[i] - self.anchor[i]);
        }
    }
}

/// Standalone gradient of an [`AnchorPenalty`]; errors on dimension mismatch.
pub fn anchor_grad(theta: &[f64], pen: &AnchorPenalty) -> Result<Vec<f64>, RegularizerError> {
    if theta.len() != pen.anchor.len() {
        return Err(RegularizerError::Shape(format!(
            "theta length {} != anchor length {}",
            theta.len(),
            pen.anchor.len()
        )));
    }
    let mut g = vec![0.0; theta.len()];
    pen.add_grad(theta, &mut g);
    Ok(g)
}

/// Weight groups for group-sparse regularization: each group lists the
/// coordinate indices (into a trainable parameter vector) of one unit's
/// incoming weights plus its bias.
#[derive(Debug, Clone, Default)]
pub struct GroupSpec {
    pub groups: Vec<Vec<usize>>,
}

impl GroupSpec {
    pub fn validate(&self, dim: usize) -> Result<(), RegularizerError> {
        let mut seen = vec![false; dim];
        for g in &self.groups {
            for &i in g {
                if i >= dim {
                    return Err(RegularizerError::Shape(format!(
                        "group index {i} out of range for dimension {dim}"
                    )));
                }
                if seen[i] {
                    return Err(RegularizerError::Argument(format!(
                        "coordinate {i} appears in more than one group"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Per-parameter empirical Fisher information: the mean over examples of the
/// squared score of the Bernoulli log-likelihood, restricted to `trainable`.
pub fn fisher_diagonal(
    net: &DenNetwork,
    task: TaskId,
    examples: &[Example<'_>],
    trainable: &TrainableSet,
) -> Result<Vec<f64>, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::Argument("empty dataset for fisher estimation".into()));
    }
    let mut acc = vec![0.0; trainable.len()];
    let mut grad = vec![0.0; trainable.len()];
    for &(x, y) in examples {
        trainer::example_gradient(net, x, y, task, trainable, &mut grad)?;
        for (a, g) in acc.iter_mut().zip(&grad) {
            *a += g * g;
        }
    }
    let n = examples.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Ok(acc)
}
