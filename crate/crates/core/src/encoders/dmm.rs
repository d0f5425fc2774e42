use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{
    inv_sqrt_sym, min_eigenvalue, EncodingLayout, FisherEncoding, ModelKind, Variant, EIGEN_FLOOR,
};
use crate::descriptors::DescriptorBag;
use crate::mixtures::{log_probs, DirichletMixture};
use crate::numerics::{digamma, log_sum_exp, trigamma};
use crate::{Error, Result};

/// Block-diagonal Fisher information of a Dirichlet mixture with respect to α.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmmFisherInfo {
    pub blocks: Vec<DMatrix<f64>>,
    pub inv_sqrt: Vec<DMatrix<f64>>,
}

impl DmmFisherInfo {
    pub fn n_components(&self) -> usize {
        self.blocks.len()
    }
}

/// `ψ(α) − ψ(Σα)`: the expected `log π` under `Dir(α)`.
pub(crate) fn expected_log(alpha: &DVector<f64>) -> Result<DVector<f64>> {
    let ds = digamma(alpha.sum())?;
    let mut out = DVector::zeros(alpha.len());
    for (o, a) in out.iter_mut().zip(alpha.iter()) {
        *o = digamma(*a)? - ds;
    }
    Ok(out)
}

/// Raw score of the bag log-likelihood with respect to every `α_k`, summed
/// over descriptors. Length `K·S`.
pub fn dmm_score(m: &DirichletMixture, bag: &DescriptorBag) -> Result<DVector<f64>> {
    if bag.dim() != m.dim() {
        return Err(Error::dim(m.dim(), bag.dim(), "dmm score"));
    }
    score_from_logs(m, &log_probs(bag, m.epsilon)?)
}

/// Score for descriptors already mapped to `log π`.
pub(crate) fn score_from_logs(m: &DirichletMixture, logs: &[DVector<f64>]) -> Result<DVector<f64>> {
    let (k, s) = (m.n_components(), m.dim());
    let norms = m.log_norms()?;
    let centroids = m
        .alphas
        .iter()
        .map(expected_log)
        .collect::<Result<Vec<_>>>()?;
    let mut out = DVector::zeros(k * s);
    let mut joint = vec![0.0; k];
    for lp in logs {
        for (j, o) in joint.iter_mut().enumerate() {
            *o = m.weights[j].ln() + (&m.alphas[j] - DVector::from_element(s, 1.0)).dot(lp)
                - norms[j];
        }
        let lse = log_sum_exp(&joint)?;
        for j in 0..k {
            let h = (joint[j] - lse).exp();
            out.rows_mut(j * s, s).axpy(h, &(lp - &centroids[j]), 1.0);
        }
    }
    Ok(out)
}

/// `F_k = w_k (diag ψ′(α_k) − ψ′(Σα_k) 𝟙𝟙ᵀ)` and its inverse square root.
pub fn dmm_fisher_info(m: &DirichletMixture) -> Result<DmmFisherInfo> {
    m.validate()?;
    let s = m.dim();
    let mut blocks = Vec::with_capacity(m.n_components());
    let mut inv = Vec::with_capacity(m.n_components());
    for (k, (w, a)) in m.weights.iter().zip(&m.alphas).enumerate() {
        let ts = trigamma(a.sum())?;
        let mut f = DMatrix::from_element(s, s, -ts);
        for l in 0..s {
            f[(l, l)] += trigamma(a[l])?;
        }
        f *= *w;
        let lo = min_eigenvalue(&f);
        if !(lo > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "dirichlet fisher block {k} has minimum eigenvalue {lo:e}"
            )));
        }
        inv.push(inv_sqrt_sym(&f, EIGEN_FLOOR));
        blocks.push(f);
    }
    Ok(DmmFisherInfo {
        blocks,
        inv_sqrt: inv,
    })
}

/// DMM-FV: per component, `F_k^{-1/2}` applied to the `1/n`-averaged score.
pub fn dmm_fv(
    m: &DirichletMixture,
    bag: &DescriptorBag,
    fim: &DmmFisherInfo,
) -> Result<FisherEncoding> {
    if fim.n_components() != m.n_components() {
        return Err(Error::dim(
            m.n_components(),
            fim.n_components(),
            "dmm fisher blocks",
        ));
    }
    let (k, s) = (m.n_components(), m.dim());
    let mut v = dmm_score(m, bag)? / bag.len() as f64;
    for j in 0..k {
        let block = &fim.inv_sqrt[j] * v.rows(j * s, s);
        v.rows_mut(j * s, s).copy_from(&block);
    }
    Ok(FisherEncoding::new(
        v,
        EncodingLayout {
            model: ModelKind::Dmm,
            variant: Variant::DmmAlpha,
            k,
            d: s,
            r: 0,
        },
    ))
}
