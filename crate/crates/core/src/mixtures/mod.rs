//! Background mixture models and their EM training.

mod dmm;
mod gmm;
mod init;
mod mfa;

pub use dmm::{dirichlet_log_norm, dmm_posteriors_loglik, fit_dmm_em, log_probs, DirichletMixture};
pub use gmm::{fit_gmm_em, gmm_posteriors_loglik, DiagonalGmm};
pub use init::{global_variance, kmeans_pp};
pub use mfa::{
    fit_mfa_em, mfa_derived, mfa_posteriors_loglik, ComponentFactor, MfaDerived, MfaEStats,
    MfaModel,
};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Chunk size for parallel E-steps. Partial sums are reduced in chunk order,
/// so results do not depend on the number of threads.
pub(crate) const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Variance / noise floor as a multiple of the mean per-dimension data variance.
    pub floor_scale: f64,
    /// Share one diagonal noise vector across MFA components.
    pub shared_noise: bool,
    /// Lloyd iterations run after k-means++ seeding.
    pub kmeans_iter: usize,
    pub newton_max_iter: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// Probability floor for Dirichlet inputs.
    pub epsilon: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-6,
            seed: 0,
            floor_scale: 1e-6,
            shared_noise: true,
            kmeans_iter: 10,
            newton_max_iter: 50,
            alpha_min: 1e-4,
            alpha_max: 1e6,
            epsilon: crate::descriptors::DEFAULT_EPSILON,
        }
    }
}

/// A fitted model with its per-iteration log-likelihood.
///
/// `loglik_trace[t]` is the training log-likelihood of the parameters
/// entering iteration `t`; the final entry belongs to the returned model.
#[derive(Debug, Clone)]
pub struct Fitted<M> {
    pub model: M,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
}

/// Per-descriptor posteriors for one bag (`n × K`) and the bag log-likelihood.
#[derive(Debug, Clone)]
pub struct Posteriors {
    pub responsibilities: DMatrix<f64>,
    pub loglik: f64,
}

pub(crate) fn check_weights(weights: &[f64]) -> crate::Result<()> {
    if weights.is_empty() {
        return Err(crate::Error::Empty("mixture weights"));
    }
    let sum: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
        return Err(crate::Error::InvalidArgument(format!(
            "mixture weights must be a probability vector (sum {sum})"
        )));
    }
    Ok(())
}

pub(crate) fn relative_improvement(prev: f64, cur: f64) -> f64 {
    (cur - prev) / prev.abs().max(1e-300)
}
