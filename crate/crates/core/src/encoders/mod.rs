//! Fisher scores and Fisher vectors.
//!
//! Scores are gradients of the bag log-likelihood at the background model.
//! The GMM and DMM vectors carry a `1/n` prefactor; MFA scores are plain sums
//! over descriptors (use [`FisherEncoding::scaled`] to average them).

mod dmm;
mod generic;
mod gmm;
mod mfa;
mod transfer;

pub use dmm::{dmm_fisher_info, dmm_fv, dmm_score, DmmFisherInfo};
pub use generic::{generic_fv, Assignment, GenericFvSpec, Scaling};
pub use gmm::{gmm_fv_mean, gmm_fv_variance, gmm_scores};
pub use mfa::{
    mfa_fisher_scaling, mfa_fs_lambda, mfa_fs_mu, mfa_fs_mu_lambda, mfa_fv_lambda, mfa_fv_mu,
    mfa_loading_covariance, MfaFisherInfo,
};
pub use transfer::{
    alpha_centroid, solve_alpha_for_centroid, transfer_centroids, transfer_dmm_to_gmm,
    transfer_gmm_to_dmm, TransferDirection, TransferSource, TransferTarget,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied to eigenvalues before inverting square roots of Fisher blocks.
pub const EIGEN_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gmm,
    Dmm,
    Mfa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    GmmMu,
    GmmSigma,
    DmmAlpha,
    MfaMu,
    MfaLambda,
    /// `MfaMu` blocks followed by `MfaLambda` blocks.
    MfaMuLambda,
    Generic,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::GmmMu => "gmm_mu",
            Variant::GmmSigma => "gmm_sigma",
            Variant::DmmAlpha => "dmm_alpha",
            Variant::MfaMu => "mfa_mu",
            Variant::MfaLambda => "mfa_lambda",
            Variant::MfaMuLambda => "mfa_mu_lambda",
            Variant::Generic => "generic",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "gmm_mu" => Variant::GmmMu,
            "gmm_sigma" => Variant::GmmSigma,
            "dmm_alpha" => Variant::DmmAlpha,
            "mfa_mu" => Variant::MfaMu,
            "mfa_lambda" => Variant::MfaLambda,
            "mfa_mu_lambda" => Variant::MfaMuLambda,
            "generic" => Variant::Generic,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown encoding variant `{other}`"
                )))
            }
        })
    }

    /// Encoding length for `k` components of dimension `d` and latent dimension `r`.
    pub fn length(self, k: usize, d: usize, r: usize) -> usize {
        match self {
            Variant::GmmMu
            | Variant::GmmSigma
            | Variant::DmmAlpha
            | Variant::MfaMu
            | Variant::Generic => k * d,
            Variant::MfaLambda => k * d * r,
            Variant::MfaMuLambda => k * d + k * d * r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingLayout {
    pub model: ModelKind,
    pub variant: Variant,
    pub k: usize,
    pub d: usize,
    pub r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NormFlags {
    /// Exponent of the signed power step, if applied.
    pub power: Option<f64>,
    pub l2: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherEncoding {
    pub vector: DVector<f64>,
    pub layout: EncodingLayout,
    pub normalized: NormFlags,
}

impl FisherEncoding {
    pub(crate) fn new(vector: DVector<f64>, layout: EncodingLayout) -> Self {
        debug_assert_eq!(
            vector.len(),
            layout.variant.length(layout.k, layout.d, layout.r)
        );
        Self {
            vector,
            layout,
            normalized: NormFlags::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vector.is_empty()
    }

    /// Multiplies the raw encoding by `c`, e.g. `1/n` for per-descriptor averages.
    pub fn scaled(mut self, c: f64) -> Self {
        self.vector *= c;
        self
    }

    /// Block `k` of a single-variant encoding.
    pub fn block(&self, k: usize) -> DVector<f64> {
        let size = self.vector.len() / self.layout.k;
        self.vector.rows(k * size, size).into_owned()
    }
}

/// Signed power normalization followed by L2 normalization.
///
/// A zero vector stays zero.
pub fn normalize_fv(e: &FisherEncoding, power: f64) -> Result<FisherEncoding> {
    if !(power > 0.0 && power <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "power exponent must be in (0, 1], got {power}"
        )));
    }
    let mut v = e.vector.map(|x| x.signum() * x.abs().powf(power));
    v.iter_mut().for_each(|x| {
        if *x == 0.0 {
            *x = 0.0;
        }
    });
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    Ok(FisherEncoding {
        vector: v,
        layout: e.layout,
        normalized: NormFlags {
            power: Some(power),
            l2: true,
        },
    })
}

/// Concatenates single-variant MFA encodings as (μ blocks, Λ blocks).
pub fn concat_mu_lambda(mu: &FisherEncoding, lambda: &FisherEncoding) -> Result<FisherEncoding> {
    if mu.layout.variant != Variant::MfaMu || lambda.layout.variant != Variant::MfaLambda {
        return Err(Error::InvalidArgument(
            "expected an mfa_mu and an mfa_lambda encoding".into(),
        ));
    }
    let mut v = Vec::with_capacity(mu.len() + lambda.len());
    v.extend_from_slice(mu.vector.as_slice());
    v.extend_from_slice(lambda.vector.as_slice());
    Ok(FisherEncoding::new(
        DVector::from_vec(v),
        EncodingLayout {
            variant: Variant::MfaMuLambda,
            ..lambda.layout
        },
    ))
}

/// Symmetric inverse square root with eigenvalues floored at `floor`.
pub fn inv_sqrt_sym(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scales = eig.eigenvalues.map(|l| 1.0 / l.max(floor).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&scales) * eig.eigenvectors.transpose()
}

pub(crate) fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}
