use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dmm::expected_log;
use super::{DmmFisherInfo, EncodingLayout, FisherEncoding, ModelKind, Variant};
use crate::descriptors::{embed_values, DescriptorBag, EmbeddingTag};
use crate::mixtures::{
    dmm_posteriors_loglik, gmm_posteriors_loglik, DiagonalGmm, DirichletMixture,
};
use crate::{Error, Result};

/// Source of the soft assignments `p(k|π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Gaussian posteriors `h_k`, evaluated on `π` embedded with `input`.
    Gaussian {
        model: DiagonalGmm,
        input: EmbeddingTag,
    },
    /// Dirichlet posteriors `q_k`, evaluated on `π` directly.
    Dirichlet(DirichletMixture),
}

impl Assignment {
    fn n_components(&self) -> usize {
        match self {
            Assignment::Gaussian { model, .. } => model.n_components(),
            Assignment::Dirichlet(m) => m.n_components(),
        }
    }
}

/// The per-component scaling `γ(θ_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// `diag(1/(√w_k σ_k))`.
    GaussDiag {
        weights: Vec<f64>,
        variances: Vec<DVector<f64>>,
    },
    /// `F_k^{-1/2}` of a Dirichlet mixture.
    DmmFim(DmmFisherInfo),
    /// Arbitrary per-component matrices.
    Matrices(Vec<DMatrix<f64>>),
}

impl Scaling {
    fn n_components(&self) -> usize {
        match self {
            Scaling::GaussDiag { weights, .. } => weights.len(),
            Scaling::DmmFim(f) => f.n_components(),
            Scaling::Matrices(m) => m.len(),
        }
    }

    fn apply(&self, k: usize, r: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Scaling::GaussDiag { weights, variances } => {
                let v = &variances[k];
                if v.len() != r.len() {
                    return Err(Error::dim(r.len(), v.len(), "gaussian scaling"));
                }
                let c = 1.0 / weights[k].sqrt();
                Ok(DVector::from_fn(r.len(), |i, _| c * r[i] / v[i].sqrt()))
            }
            Scaling::DmmFim(f) => apply_matrix(&f.inv_sqrt[k], r),
            Scaling::Matrices(m) => apply_matrix(&m[k], r),
        }
    }
}

fn apply_matrix(m: &DMatrix<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    if m.ncols() != r.len() {
        return Err(Error::dim(r.len(), m.ncols(), "scaling matrix"));
    }
    Ok(m * r)
}

/// Pooling template `𝒱_k = (1/n) Σ_i p(k|π_i) γ(θ_k)(ν(π_i) − ξ(θ_k))`.
///
/// Input bags hold raw probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenericFvSpec {
    pub assignment: Assignment,
    /// The embedding `ν`.
    pub embedding: EmbeddingTag,
    pub epsilon: f64,
    /// The centroids `ξ(θ_k)`, in the embedding space.
    pub centroids: Vec<DVector<f64>>,
    pub scaling: Scaling,
}

impl GenericFvSpec {
    /// Gaussian assignment, Gaussian scaling and the GMM means as centroids,
    /// with `ν` the embedding the GMM was trained on.
    pub fn gmm_column(model: &DiagonalGmm, embedding: EmbeddingTag, epsilon: f64) -> Self {
        Self {
            assignment: Assignment::Gaussian {
                model: model.clone(),
                input: embedding,
            },
            embedding,
            epsilon,
            centroids: model.means.clone(),
            scaling: Scaling::GaussDiag {
                weights: model.weights.clone(),
                variances: model.variances.clone(),
            },
        }
    }

    /// Dirichlet assignment, Fisher-information scaling, `ν = log π` and
    /// centroids `ψ(α_k) − ψ(Σα_k)`.
    pub fn dmm_column(model: &DirichletMixture, fim: &DmmFisherInfo) -> Result<Self> {
        Ok(Self {
            assignment: Assignment::Dirichlet(model.clone()),
            embedding: EmbeddingTag::Nu1,
            epsilon: model.epsilon,
            centroids: model
                .alphas
                .iter()
                .map(expected_log)
                .collect::<Result<_>>()?,
            scaling: Scaling::DmmFim(fim.clone()),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.assignment.n_components();
        if self.centroids.len() != k {
            return Err(Error::dim(k, self.centroids.len(), "generic centroids"));
        }
        if self.scaling.n_components() != k {
            return Err(Error::dim(
                k,
                self.scaling.n_components(),
                "generic scaling",
            ));
        }
        let d = self.centroids[0].len();
        if let Some(c) = self.centroids.iter().find(|c| c.len() != d) {
            return Err(Error::dim(d, c.len(), "generic centroids"));
        }
        Ok(())
    }
}

pub fn generic_fv(spec: &GenericFvSpec, bag: &DescriptorBag) -> Result<FisherEncoding> {
    spec.validate()?;
    if bag.tag != EmbeddingTag::Raw {
        return Err(Error::InvalidArgument(
            "generic encoder expects raw probability bags".into(),
        ));
    }
    let post = match &spec.assignment {
        Assignment::Gaussian { model, input } => {
            gmm_posteriors_loglik(model, &bag.embed(*input, spec.epsilon)?)?
        }
        Assignment::Dirichlet(m) => dmm_posteriors_loglik(m, bag)?,
    };
    let k = spec.centroids.len();
    let d = spec.centroids[0].len();
    let nu = bag
        .descriptors
        .iter()
        .map(|p| embed_values(p, spec.embedding, spec.epsilon))
        .collect::<Result<Vec<_>>>()?;
    if nu[0].len() != d {
        return Err(Error::dim(d, nu[0].len(), "generic embedding"));
    }
    let mut v = DVector::zeros(k * d);
    for j in 0..k {
        let mut acc = DVector::<f64>::zeros(d);
        for (i, x) in nu.iter().enumerate() {
            acc.axpy(
                post.responsibilities[(i, j)],
                &(x - &spec.centroids[j]),
                1.0,
            );
        }
        let block = spec.scaling.apply(j, &acc)? / bag.len() as f64;
        v.rows_mut(j * d, d).copy_from(&block);
    }
    let model = match spec.assignment {
        Assignment::Gaussian { .. } => ModelKind::Gmm,
        Assignment::Dirichlet(_) => ModelKind::Dmm,
    };
    Ok(FisherEncoding::new(
        v,
        EncodingLayout {
            model,
            variant: Variant::Generic,
            k,
            d,
            r: 0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{dmm_fisher_info, dmm_fv, gmm_fv_mean, transfer_dmm_to_gmm};
    use crate::rng::seeded;
    use crate::synth::sample_dirichlet;
    use rand::Rng;

    fn prob_bag(n: usize, s: usize, seed: u64) -> DescriptorBag {
        let mut rng = seeded(seed);
        let alpha = DVector::from_fn(s, |_, _| rng.random_range(0.5..3.0));
        let rows = (0..n).map(|_| sample_dirichlet(&alpha, &mut rng)).collect();
        DescriptorBag::new(rows, EmbeddingTag::Raw, None).unwrap()
    }

    fn dmm(k: usize, s: usize, seed: u64) -> DirichletMixture {
        let mut rng = seeded(seed);
        let alphas = (0..k)
            .map(|_| DVector::from_fn(s, |_, _| rng.random_range(0.5..5.0)))
            .collect();
        DirichletMixture::new(vec![1.0 / k as f64; k], alphas).unwrap()
    }

    #[test]
    fn gmm_column_matches_dedicated_encoder() {
        let bag = prob_bag(30, 4, 1);
        let mut rng = seeded(2);
        let g = DiagonalGmm::new(
            vec![0.3, 0.7],
            (0..2)
                .map(|_| DVector::from_fn(4, |_, _| rng.random_range(-3.0..-0.5)))
                .collect(),
            (0..2)
                .map(|_| DVector::from_fn(4, |_, _| rng.random_range(0.5..2.0)))
                .collect(),
        )
        .unwrap();
        let spec = GenericFvSpec::gmm_column(&g, EmbeddingTag::Nu1, 1e-10);
        let a = generic_fv(&spec, &bag).unwrap();
        let b = gmm_fv_mean(&g, &bag.embed(EmbeddingTag::Nu1, 1e-10).unwrap()).unwrap();
        assert!((a.vector - b.vector).amax() <= 1e-12);
    }

    #[test]
    fn dmm_column_matches_dedicated_encoder() {
        let bag = prob_bag(30, 4, 3);
        let m = dmm(3, 4, 4);
        let fim = dmm_fisher_info(&m).unwrap();
        let spec = GenericFvSpec::dmm_column(&m, &fim).unwrap();
        let a = generic_fv(&spec, &bag).unwrap();
        let b = dmm_fv(&m, &bag, &fim).unwrap();
        assert!((a.vector - b.vector).amax() <= 1e-12);
    }

    #[test]
    fn scaling_one_block_rescales_only_that_block() {
        let bag = prob_bag(20, 3, 5);
        let m = dmm(2, 3, 6);
        let mats = vec![DMatrix::from_fn(3, 3, |i, j| (i + 2 * j) as f64 * 0.1 + 0.3); 2];
        let spec = GenericFvSpec {
            assignment: Assignment::Dirichlet(m.clone()),
            embedding: EmbeddingTag::Nu1,
            epsilon: m.epsilon,
            centroids: m.alphas.iter().map(|a| expected_log(a).unwrap()).collect(),
            scaling: Scaling::Matrices(mats.clone()),
        };
        let base = generic_fv(&spec, &bag).unwrap();
        let mut scaled = spec.clone();
        let mut m2 = mats;
        m2[1] *= 2.5;
        scaled.scaling = Scaling::Matrices(m2);
        let out = generic_fv(&scaled, &bag).unwrap();
        assert_eq!(out.block(0), base.block(0));
        assert!((out.block(1) - base.block(1) * 2.5).amax() <= 1e-15);
    }

    #[test]
    fn hybrid_differs_from_both_columns() {
        let bag = prob_bag(40, 4, 7);
        let m = dmm(2, 4, 8);
        let fim = dmm_fisher_info(&m).unwrap();
        let g = transfer_dmm_to_gmm(&m, &DVector::from_element(4, 1.0)).unwrap();
        let mut hybrid = GenericFvSpec::dmm_column(&m, &fim).unwrap();
        hybrid.scaling = Scaling::GaussDiag {
            weights: g.weights.clone(),
            variances: g.variances.clone(),
        };
        let h = generic_fv(&hybrid, &bag).unwrap();
        let d = generic_fv(&GenericFvSpec::dmm_column(&m, &fim).unwrap(), &bag).unwrap();
        let gg = generic_fv(
            &GenericFvSpec::gmm_column(&g, EmbeddingTag::Nu1, m.epsilon),
            &bag,
        )
        .unwrap();
        assert!((&h.vector - &d.vector).amax() > 1e-6);
        assert!((&h.vector - &gg.vector).amax() > 1e-6);
    }

    #[test]
    fn mismatched_components_rejected() {
        let m = dmm(2, 3, 9);
        let fim = dmm_fisher_info(&m).unwrap();
        let mut spec = GenericFvSpec::dmm_column(&m, &fim).unwrap();
        spec.centroids.pop();
        assert!(matches!(
            generic_fv(&spec, &prob_bag(5, 3, 1)),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
