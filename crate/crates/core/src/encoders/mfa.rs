use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    concat_mu_lambda, inv_sqrt_sym, EncodingLayout, FisherEncoding, ModelKind, Variant, EIGEN_FLOOR,
};
use crate::descriptors::DescriptorBag;
use crate::mixtures::{mfa_derived, ComponentFactor, MfaDerived, MfaModel};
use crate::numerics::log_sum_exp;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-component Fisher scalings (inverse square roots) for MFA scores.
///
/// `mean[k]` is `(w_k S_k⁻¹)^{-1/2}`, `D × D`. `loading[k]` is the inverse
/// square root of `w_k Cov_k`, `DR × DR`, or the identity when that
/// covariance vanishes (`Λ_k = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfaFisherInfo {
    pub mean: Vec<DMatrix<f64>>,
    pub loading: Vec<DMatrix<f64>>,
}

fn layout(m: &MfaModel, variant: Variant) -> EncodingLayout {
    EncodingLayout {
        model: ModelKind::Mfa,
        variant,
        k: m.n_components(),
        d: m.dim(),
        r: m.latent_dim(),
    }
}

/// Sums `Σ_i h_ik S⁻¹Δ` and `Σ_i h_ik S⁻¹Δ(βΔ)ᵀ − (Σ_i h_ik) S⁻¹Λ`.
fn score_pass(
    m: &MfaModel,
    derived: &MfaDerived,
    bag: &DescriptorBag,
    want_lambda: bool,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if bag.dim() != m.dim() {
        return Err(Error::dim(m.dim(), bag.dim(), "mfa scores"));
    }
    let (k, d, r) = (m.n_components(), m.dim(), m.latent_dim());
    let mut mu = DVector::zeros(k * d);
    let mut lam: Vec<DMatrix<f64>> = if want_lambda {
        vec![DMatrix::zeros(d, r); k]
    } else {
        Vec::new()
    };
    let mut mass = vec![0.0; k];
    let mut logj = vec![0.0; k];
    let mut terms: Vec<(DVector<f64>, DVector<f64>)> = Vec::with_capacity(k);
    for x in &bag.descriptors {
        terms.clear();
        for (j, f) in derived.components.iter().enumerate() {
            let delta = x - &m.means[j];
            let (s_inv_delta, z, quad) = f.residual_terms(&delta);
            logj[j] = m.weights[j].ln() - 0.5 * (d as f64 * LN_2PI + f.log_det + quad);
            terms.push((s_inv_delta, z));
        }
        let lse = log_sum_exp(&logj)?;
        for (j, (f, g)) in terms.iter().enumerate() {
            let h = (logj[j] - lse).exp();
            if h == 0.0 {
                continue;
            }
            mass[j] += h;
            mu.rows_mut(j * d, d).axpy(h, f, 1.0);
            if want_lambda {
                lam[j].ger(h, f, g, 1.0);
            }
        }
    }
    let mut flat = DVector::zeros(if want_lambda { k * d * r } else { 0 });
    if want_lambda {
        for (j, f) in derived.components.iter().enumerate() {
            let block = &lam[j] - f.s_inv_lambda() * mass[j];
            for i in 0..d {
                for c in 0..r {
                    flat[j * d * r + i * r + c] = block[(i, c)];
                }
            }
        }
    }
    Ok((mu, flat))
}

/// Mean scores `Σ_i h_ik S_k⁻¹(x_i − μ_k)`, summed over descriptors.
pub fn mfa_fs_mu(m: &MfaModel, bag: &DescriptorBag) -> Result<FisherEncoding> {
    let derived = mfa_derived(m)?;
    let (mu, _) = score_pass(m, &derived, bag, false)?;
    Ok(FisherEncoding::new(mu, layout(m, Variant::MfaMu)))
}

/// Loading scores `Σ_i h_ik [S⁻¹ΔΔᵀβᵀ − S⁻¹Λ]`, each block a row-major
/// `D × R` matrix.
pub fn mfa_fs_lambda(m: &MfaModel, bag: &DescriptorBag) -> Result<FisherEncoding> {
    let derived = mfa_derived(m)?;
    let (_, lam) = score_pass(m, &derived, bag, true)?;
    Ok(FisherEncoding::new(lam, layout(m, Variant::MfaLambda)))
}

/// Mean scores followed by loading scores, from a single pass.
pub fn mfa_fs_mu_lambda(m: &MfaModel, bag: &DescriptorBag) -> Result<FisherEncoding> {
    let derived = mfa_derived(m)?;
    let (mu, lam) = score_pass(m, &derived, bag, true)?;
    concat_mu_lambda(
        &FisherEncoding::new(mu, layout(m, Variant::MfaMu)),
        &FisherEncoding::new(lam, layout(m, Variant::MfaLambda)),
    )
}

/// Covariance of the single-sample loading data term `vec(f gᵀ)` under one
/// component, with `f = S⁻¹Δ`, `g = βΔ`:
/// `Cov_{(i,j),(l,m)} = A_{im} A_{lj} + (S⁻¹)_{il} C_{jm}`, `A = S⁻¹Λ`, `C = βΛ`.
pub fn mfa_loading_covariance(f: &ComponentFactor) -> DMatrix<f64> {
    let d = f.dim();
    let r = f.lambda.ncols();
    let a = f.s_inv_lambda();
    let c = f.beta_lambda();
    let s_inv = f.dense_inverse();
    let n = d * r;
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..d {
        for j in 0..r {
            let row = i * r + j;
            for l in 0..d {
                for mm in 0..r {
                    cov[(row, l * r + mm)] = a[(i, mm)] * a[(l, j)] + s_inv[(i, l)] * c[(j, mm)];
                }
            }
        }
    }
    cov
}

/// Fisher scalings for every component. The loading blocks are `DR × DR`,
/// so this is expensive for large models.
pub fn mfa_fisher_scaling(m: &MfaModel) -> Result<MfaFisherInfo> {
    m.validate()?;
    let derived = mfa_derived(m)?;
    let mut mean = Vec::with_capacity(m.n_components());
    let mut loading = Vec::with_capacity(m.n_components());
    for (w, f) in m.weights.iter().zip(&derived.components) {
        mean.push(inv_sqrt_sym(&(f.dense_inverse() * *w), EIGEN_FLOOR));
        let cov = mfa_loading_covariance(f);
        if cov.amax() == 0.0 {
            loading.push(DMatrix::identity(cov.nrows(), cov.ncols()));
        } else {
            loading.push(inv_sqrt_sym(&(cov * *w), EIGEN_FLOOR));
        }
    }
    Ok(MfaFisherInfo { mean, loading })
}

fn apply_blocks(v: &mut DVector<f64>, blocks: &[DMatrix<f64>]) -> Result<()> {
    let size = v.len() / blocks.len().max(1);
    for (j, b) in blocks.iter().enumerate() {
        if b.ncols() != size {
            return Err(Error::dim(size, b.ncols(), "mfa fisher block"));
        }
        let out = b * v.rows(j * size, size);
        v.rows_mut(j * size, size).copy_from(&out);
    }
    Ok(())
}

fn check_info(m: &MfaModel, blocks: &[DMatrix<f64>]) -> Result<()> {
    if blocks.len() != m.n_components() {
        return Err(Error::dim(
            m.n_components(),
            blocks.len(),
            "mfa fisher blocks",
        ));
    }
    Ok(())
}

/// Mean scores scaled by `(w_k S_k⁻¹)^{-1/2}` per component.
pub fn mfa_fv_mu(
    m: &MfaModel,
    bag: &DescriptorBag,
    info: &MfaFisherInfo,
) -> Result<FisherEncoding> {
    check_info(m, &info.mean)?;
    let mut e = mfa_fs_mu(m, bag)?;
    apply_blocks(&mut e.vector, &info.mean)?;
    Ok(e)
}

/// Loading scores scaled by the inverse square root of their Fisher information.
pub fn mfa_fv_lambda(
    m: &MfaModel,
    bag: &DescriptorBag,
    info: &MfaFisherInfo,
) -> Result<FisherEncoding> {
    check_info(m, &info.loading)?;
    let mut e = mfa_fs_lambda(m, bag)?;
    apply_blocks(&mut e.vector, &info.loading)?;
    Ok(e)
}
