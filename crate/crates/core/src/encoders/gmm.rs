use nalgebra::DVector;

use super::{EncodingLayout, FisherEncoding, ModelKind, Variant};
use crate::descriptors::DescriptorBag;
use crate::mixtures::{gmm_posteriors_loglik, DiagonalGmm};
use crate::Result;

fn layout(m: &DiagonalGmm, variant: Variant) -> EncodingLayout {
    EncodingLayout {
        model: ModelKind::Gmm,
        variant,
        k: m.n_components(),
        d: m.dim(),
        r: 0,
    }
}

/// Unscaled Fisher scores: gradients of the bag log-likelihood with respect to
/// the means and the standard deviations `σ_k`, each `K·D` long.
pub fn gmm_scores(m: &DiagonalGmm, bag: &DescriptorBag) -> Result<(DVector<f64>, DVector<f64>)> {
    let post = gmm_posteriors_loglik(m, bag)?;
    let (k, d) = (m.n_components(), m.dim());
    let mut mu = DVector::zeros(k * d);
    let mut sigma = DVector::zeros(k * d);
    for (i, x) in bag.descriptors.iter().enumerate() {
        for j in 0..k {
            let h = post.responsibilities[(i, j)];
            for l in 0..d {
                let var = m.variances[j][l];
                let sd = var.sqrt();
                let r = x[l] - m.means[j][l];
                mu[j * d + l] += h * r / var;
                sigma[j * d + l] += h * (r * r / (var * sd) - 1.0 / sd);
            }
        }
    }
    Ok((mu, sigma))
}

/// Mean component of the GMM-FV: `(1/(n√w_k)) Σ_i p(k|x_i) (x_i − μ_k)/σ_k`.
pub fn gmm_fv_mean(m: &DiagonalGmm, bag: &DescriptorBag) -> Result<FisherEncoding> {
    let post = gmm_posteriors_loglik(m, bag)?;
    let (k, d) = (m.n_components(), m.dim());
    let mut v = DVector::zeros(k * d);
    for j in 0..k {
        let mut acc = DVector::<f64>::zeros(d);
        for (i, x) in bag.descriptors.iter().enumerate() {
            acc.axpy(post.responsibilities[(i, j)], &(x - &m.means[j]), 1.0);
        }
        let c = 1.0 / (bag.len() as f64 * m.weights[j].sqrt());
        for l in 0..d {
            v[j * d + l] = c * acc[l] / m.variances[j][l].sqrt();
        }
    }
    Ok(FisherEncoding::new(v, layout(m, Variant::GmmMu)))
}

/// Variance component: `(1/(n√(2w_k))) Σ_i p(k|x_i) [(x_i − μ_k)²/σ_k² − 1]`.
pub fn gmm_fv_variance(m: &DiagonalGmm, bag: &DescriptorBag) -> Result<FisherEncoding> {
    let post = gmm_posteriors_loglik(m, bag)?;
    let (k, d) = (m.n_components(), m.dim());
    let mut v = DVector::zeros(k * d);
    for j in 0..k {
        let c = 1.0 / (bag.len() as f64 * (2.0 * m.weights[j]).sqrt());
        for (i, x) in bag.descriptors.iter().enumerate() {
            let h = post.responsibilities[(i, j)];
            for l in 0..d {
                let r = x[l] - m.means[j][l];
                v[j * d + l] += c * h * (r * r / m.variances[j][l] - 1.0);
            }
        }
    }
    Ok(FisherEncoding::new(v, layout(m, Variant::GmmSigma)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::EmbeddingTag;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn bag(rows: Vec<DVector<f64>>) -> DescriptorBag {
        DescriptorBag::new(rows, EmbeddingTag::Raw, None).unwrap()
    }

    fn random_model(k: usize, d: usize, seed: u64) -> DiagonalGmm {
        let mut rng = seeded(seed);
        let mut w: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= s);
        DiagonalGmm::new(
            w,
            (0..k)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)))
                .collect(),
            (0..k)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(0.3..2.0)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_standard_component_is_average_pooling() {
        let m = DiagonalGmm::new(
            vec![1.0],
            vec![DVector::zeros(3)],
            vec![DVector::from_element(3, 1.0)],
        )
        .unwrap();
        let mut rng = seeded(1);
        let rows: Vec<DVector<f64>> = (0..7)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let mut avg = DVector::zeros(3);
        for r in &rows {
            avg += r;
        }
        avg /= 7.0;
        let e = gmm_fv_mean(&m, &bag(rows)).unwrap();
        assert!((e.vector - avg).amax() < 1e-15);
    }

    #[test]
    fn component_means_give_near_zero() {
        let mut m = random_model(2, 3, 2);
        m.means[1] = DVector::from_element(3, 50.0);
        let e = gmm_fv_mean(&m, &bag(m.means.clone())).unwrap();
        assert!(e.vector.amax() < 1e-12);
    }

    #[test]
    fn matches_term_by_term_sum() {
        let m = random_model(2, 3, 3);
        let mut rng = seeded(4);
        let rows: Vec<DVector<f64>> = (0..9)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let b = bag(rows.clone());
        let e = gmm_fv_mean(&m, &b).unwrap();
        let ev = gmm_fv_variance(&m, &b).unwrap();
        let post = gmm_posteriors_loglik(&m, &b).unwrap();
        let n = rows.len() as f64;
        for k in 0..2 {
            for d in 0..3 {
                let sd = m.variances[k][d].sqrt();
                let mut a = 0.0;
                let mut s = 0.0;
                for (i, x) in rows.iter().enumerate() {
                    let h = post.responsibilities[(i, k)];
                    a += h * (x[d] - m.means[k][d]) / sd;
                    s += h * ((x[d] - m.means[k][d]).powi(2) / m.variances[k][d] - 1.0);
                }
                a /= n * m.weights[k].sqrt();
                s /= n * (2.0 * m.weights[k]).sqrt();
                assert!((e.vector[k * 3 + d] - a).abs() < 1e-12);
                assert!((ev.vector[k * 3 + d] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_sigma_offset_has_zero_variance_block() {
        let m = random_model(1, 4, 5);
        let x = &m.means[0] + m.variances[0].map(f64::sqrt);
        let e = gmm_fv_variance(&m, &bag(vec![x])).unwrap();
        assert!(e.vector.amax() < 1e-14);
    }

    #[test]
    fn variance_score_vanishes_at_sample_moments() {
        let mut rng = seeded(6);
        let rows: Vec<DVector<f64>> = (0..10_000)
            .map(|_| DVector::from_fn(2, |_, _| 1.0 + 2.0 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let pts: Vec<&DVector<f64>> = rows.iter().collect();
        let (mean, var) = crate::mixtures::global_variance(&pts).unwrap();
        let m = DiagonalGmm::new(vec![1.0], vec![mean], vec![var]).unwrap();
        let e = gmm_fv_variance(&m, &bag(rows)).unwrap();
        assert!(e.vector.norm() <= 0.05);
    }

    #[test]
    fn dimension_mismatch() {
        let m = random_model(2, 3, 7);
        assert!(gmm_fv_mean(&m, &bag(vec![DVector::zeros(2)])).is_err());
    }
}
