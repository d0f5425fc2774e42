//! Moving centroids between a Dirichlet mixture and a Gaussian mixture in
//! `log π` space, using `E[log π] = ψ(α) − ψ(Σα)`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::dmm::expected_log;
use crate::mixtures::{DiagonalGmm, DirichletMixture};
use crate::numerics::{digamma, trigamma};
use crate::{Error, Result};

const RESIDUAL_TOL: f64 = 1e-8;
const BISECTION_ITERS: usize = 200;
const BRACKET_LIMIT: f64 = 600.0;
const NEWTON_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferDirection {
    GmmToDmm,
    DmmToGmm,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransferSource {
    Gmm(DiagonalGmm),
    /// A Dirichlet mixture and the per-dimension variance of the training
    /// descriptors in `log π` space.
    Dmm(DirichletMixture, DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransferTarget {
    Gmm(DiagonalGmm),
    Dmm(DirichletMixture),
}

/// `ψ(α) − ψ(Σα)`.
pub fn alpha_centroid(alpha: &DVector<f64>) -> Result<DVector<f64>> {
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidArgument(
            "dirichlet parameters must be positive".into(),
        ));
    }
    expected_log(alpha)
}

fn residual(alpha: &DVector<f64>, mu: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(expected_log(alpha)? - mu)
}

/// Inverse of the digamma function on the positive reals.
fn inv_digamma(y: f64) -> Result<f64> {
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y + 0.577_215_664_901_532_9)
    };
    for _ in 0..50 {
        let step = (digamma(x)? - y) / trigamma(x)?;
        let next = x - step;
        x = if next > 0.0 { next } else { x / 2.0 };
        if step.abs() <= 1e-14 * x {
            break;
        }
    }
    Ok(x)
}

/// Solves `ψ(α_l) − ψ(Σα) = μ_l` for `α > 0`.
///
/// A positive solution exists only when `Σ exp μ_l < 1`. Brackets the total
/// concentration by bisection and polishes with damped Newton steps; fails unless
/// the residual max-norm ends at most `1e-8`.
pub fn solve_alpha_for_centroid(mu: &DVector<f64>) -> Result<DVector<f64>> {
    if mu.len() < 2 {
        return Err(Error::InvalidArgument(
            "centroid needs at least two coordinates".into(),
        ));
    }
    if mu.iter().any(|x| !x.is_finite()) {
        return Err(Error::Newton("centroid has non-finite entries".into()));
    }
    let mass: f64 = mu.iter().map(|x| x.exp()).sum();
    if !(mass < 1.0) {
        return Err(Error::Newton(format!(
            "no positive solution: Σ exp μ = {mass} is not below 1"
        )));
    }
    // For a total s, α_l(s) = ψ⁻¹(μ_l + ψ(s)) solves every equation but the
    // constraint Σα = s. h(t) = log Σα(eᵗ) − t is positive for small s and
    // negative for large s, and the residual is ≈ −h at the root, so
    // bisection on t stays accurate however close Σ exp μ is to 1.
    let alphas_at = |t: f64| -> Result<DVector<f64>> {
        let ds = digamma(t.exp())?;
        Ok(DVector::from_vec(
            mu.iter()
                .map(|m| inv_digamma(m + ds))
                .collect::<Result<Vec<_>>>()?,
        ))
    };
    let h = |t: f64| -> Result<f64> { Ok(alphas_at(t)?.sum().ln() - t) };
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    while h(lo)? <= 0.0 {
        lo -= 4.0;
        if lo < -BRACKET_LIMIT {
            return Err(Error::Newton(
                "could not bracket the total concentration from below".into(),
            ));
        }
    }
    while h(hi)? >= 0.0 {
        hi += 4.0;
        if hi > BRACKET_LIMIT {
            return Err(Error::Newton(
                "could not bracket the total concentration from above".into(),
            ));
        }
    }
    for _ in 0..BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut alpha = alphas_at(0.5 * (lo + hi))?;
    let mut err = residual(&alpha, mu)?.amax();
    for _ in 0..NEWTON_ITERS {
        if err <= 1e-15 {
            break;
        }
        let r = residual(&alpha, mu)?;
        // Jacobian diag(ψ′(α)) − ψ′(Σα) 𝟙𝟙ᵀ, inverted by Sherman–Morrison.
        let q = alpha.map(|a| trigamma(a).unwrap_or(f64::NAN));
        let z = trigamma(alpha.sum())?;
        let qr: f64 = r.iter().zip(q.iter()).map(|(r, q)| r / q).sum();
        let qi: f64 = q.iter().map(|q| 1.0 / q).sum();
        let b = qr / (1.0 / z - qi);
        let step = DVector::from_fn(alpha.len(), |l, _| (r[l] + b) / q[l]);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &alpha - &step * t;
            if cand.iter().all(|a| *a > 0.0) {
                let e = residual(&cand, mu)?.amax();
                if e < err {
                    alpha = cand;
                    err = e;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if !(err <= RESIDUAL_TOL) {
        return Err(Error::Newton(format!(
            "centroid inversion stalled at residual {err:e}"
        )));
    }
    Ok(alpha)
}

/// Gaussian mixture anchored at the Dirichlet centroids, weights copied, every
/// component given the global training variance.
pub fn transfer_dmm_to_gmm(
    m: &DirichletMixture,
    global_variance: &DVector<f64>,
) -> Result<DiagonalGmm> {
    m.validate()?;
    if global_variance.len() != m.dim() {
        return Err(Error::dim(
            m.dim(),
            global_variance.len(),
            "transfer variance",
        ));
    }
    let means = m
        .alphas
        .iter()
        .map(expected_log)
        .collect::<Result<Vec<_>>>()?;
    DiagonalGmm::new(
        m.weights.clone(),
        means,
        vec![global_variance.clone(); m.n_components()],
    )
}

/// Dirichlet mixture whose centroids match the Gaussian means, weights copied.
pub fn transfer_gmm_to_dmm(m: &DiagonalGmm, epsilon: f64) -> Result<DirichletMixture> {
    m.validate()?;
    let alphas = m
        .means
        .iter()
        .enumerate()
        .map(|(k, mu)| {
            solve_alpha_for_centroid(mu).map_err(|e| Error::Newton(format!("component {k}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = DirichletMixture::new(m.weights.clone(), alphas)?;
    out.epsilon = epsilon;
    out.validate()?;
    Ok(out)
}

pub fn transfer_centroids(
    direction: TransferDirection,
    source: &TransferSource,
    epsilon: f64,
) -> Result<TransferTarget> {
    match (direction, source) {
        (TransferDirection::GmmToDmm, TransferSource::Gmm(g)) => {
            Ok(TransferTarget::Dmm(transfer_gmm_to_dmm(g, epsilon)?))
        }
        (TransferDirection::DmmToGmm, TransferSource::Dmm(d, var)) => {
            Ok(TransferTarget::Gmm(transfer_dmm_to_gmm(d, var)?))
        }
        _ => Err(Error::InvalidArgument(
            "transfer direction does not match the source model".into(),
        )),
    }
}
