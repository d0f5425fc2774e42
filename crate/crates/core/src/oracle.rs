//! Slow, independent reference computations used to check the main modules.
//!
//! Nothing here reuses the encoder or mixture kernels: log-likelihoods are
//! recomputed from dense formulas, gradients by central differences, and
//! Fisher information by Monte-Carlo sampling. Only the special functions
//! from [`crate::numerics`] are shared.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{DescriptorBag, EmbeddingTag};
use crate::encoders::{dmm_score, gmm_scores, mfa_fs_mu_lambda};
use crate::mixtures::{DiagonalGmm, DirichletMixture, MfaModel};
use crate::numerics::{digamma, log_gamma, log_sum_exp};
use crate::rng::stream_rng;
use crate::synth::sample_dirichlet;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Samples per Monte-Carlo chunk; each chunk owns a random stream.
pub const MC_CHUNK: usize = 10_000;

pub fn naive_gmm_loglik(m: &DiagonalGmm, bag: &DescriptorBag) -> Result<f64> {
    let mut total = 0.0;
    for x in &bag.descriptors {
        let terms: Vec<f64> = (0..m.weights.len())
            .map(|k| {
                let mut acc = m.weights[k].ln();
                for d in 0..x.len() {
                    let v = m.variances[k][d];
                    let r = x[d] - m.means[k][d];
                    acc += -0.5 * (LN_2PI + v.ln() + r * r / v);
                }
                acc
            })
            .collect();
        total += log_sum_exp(&terms)?;
    }
    Ok(total)
}

pub fn naive_dmm_loglik(m: &DirichletMixture, bag: &DescriptorBag) -> Result<f64> {
    let mut total = 0.0;
    for p in &bag.descriptors {
        let mut terms = Vec::with_capacity(m.weights.len());
        for (w, a) in m.weights.iter().zip(&m.alphas) {
            let mut acc = w.ln() + log_gamma(a.sum())?;
            for l in 0..p.len() {
                acc += (a[l] - 1.0) * p[l].max(m.epsilon).ln() - log_gamma(a[l])?;
            }
            terms.push(acc);
        }
        total += log_sum_exp(&terms)?;
    }
    Ok(total)
}

fn dense_cov(m: &MfaModel, k: usize) -> DMatrix<f64> {
    &m.loadings[k] * m.loadings[k].transpose() + DMatrix::from_diagonal(m.noise_of(k))
}

/// Log-likelihood with dense `S_k = Λ_kΛ_kᵀ + ψ` factored by Cholesky.
pub fn naive_mfa_loglik(m: &MfaModel, bag: &DescriptorBag) -> Result<f64> {
    let d = m.dim() as f64;
    let mut chols = Vec::with_capacity(m.weights.len());
    for k in 0..m.weights.len() {
        let c = dense_cov(m, k)
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("component {k} covariance")))?;
        let logdet = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        chols.push((c, logdet));
    }
    let mut total = 0.0;
    for x in &bag.descriptors {
        let terms: Vec<f64> = chols
            .iter()
            .enumerate()
            .map(|(k, (c, logdet))| {
                let r = x - &m.means[k];
                let quad = r.dot(&c.solve(&r));
                m.weights[k].ln() - 0.5 * (d * LN_2PI + logdet + quad)
            })
            .collect();
        total += log_sum_exp(&terms)?;
    }
    Ok(total)
}

/// A mixture whose scalar parameters can be perturbed one at a time.
#[derive(Debug, Clone)]
pub enum OracleModel {
    Gmm(DiagonalGmm),
    Dmm(DirichletMixture),
    Mfa(MfaModel),
}

/// One scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Param {
    GmmMean {
        k: usize,
        d: usize,
    },
    /// The standard deviation `σ_kd` (the variance is `σ²`).
    GmmSigma {
        k: usize,
        d: usize,
    },
    DmmAlpha {
        k: usize,
        l: usize,
    },
    MfaMean {
        k: usize,
        d: usize,
    },
    MfaLoading {
        k: usize,
        i: usize,
        j: usize,
    },
}

impl OracleModel {
    pub fn loglik(&self, bag: &DescriptorBag) -> Result<f64> {
        match self {
            OracleModel::Gmm(m) => naive_gmm_loglik(m, bag),
            OracleModel::Dmm(m) => naive_dmm_loglik(m, bag),
            OracleModel::Mfa(m) => naive_mfa_loglik(m, bag),
        }
    }

    fn get(&self, p: Param) -> Result<f64> {
        Ok(match (self, p) {
            (OracleModel::Gmm(m), Param::GmmMean { k, d }) => m.means[k][d],
            (OracleModel::Gmm(m), Param::GmmSigma { k, d }) => m.variances[k][d].sqrt(),
            (OracleModel::Dmm(m), Param::DmmAlpha { k, l }) => m.alphas[k][l],
            (OracleModel::Mfa(m), Param::MfaMean { k, d }) => m.means[k][d],
            (OracleModel::Mfa(m), Param::MfaLoading { k, i, j }) => m.loadings[k][(i, j)],
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "parameter {p:?} does not belong to this model"
                )))
            }
        })
    }

    fn with(&self, p: Param, v: f64) -> Self {
        let mut out = self.clone();
        match (&mut out, p) {
            (OracleModel::Gmm(m), Param::GmmMean { k, d }) => m.means[k][d] = v,
            (OracleModel::Gmm(m), Param::GmmSigma { k, d }) => m.variances[k][d] = v * v,
            (OracleModel::Dmm(m), Param::DmmAlpha { k, l }) => m.alphas[k][l] = v,
            (OracleModel::Mfa(m), Param::MfaMean { k, d }) => m.means[k][d] = v,
            (OracleModel::Mfa(m), Param::MfaLoading { k, i, j }) => m.loadings[k][(i, j)] = v,
            _ => unreachable!("checked by get"),
        }
        out
    }

    /// Lower bound of the valid domain, if the parameter is constrained.
    fn lower_bound(p: Param) -> Option<f64> {
        match p {
            Param::GmmSigma { .. } | Param::DmmAlpha { .. } => Some(0.0),
            _ => None,
        }
    }

    /// Every scalar parameter in a fixed order matching the encoders' layout:
    /// GMM means then σ, DMM α, MFA means then loadings (row-major).
    pub fn all_params(&self) -> Vec<Param> {
        let mut out = Vec::new();
        match self {
            OracleModel::Gmm(m) => {
                let (k, d) = (m.weights.len(), m.means[0].len());
                out.extend((0..k * d).map(|i| Param::GmmMean { k: i / d, d: i % d }));
                out.extend((0..k * d).map(|i| Param::GmmSigma { k: i / d, d: i % d }));
            }
            OracleModel::Dmm(m) => {
                let (k, s) = (m.weights.len(), m.alphas[0].len());
                out.extend((0..k * s).map(|i| Param::DmmAlpha { k: i / s, l: i % s }));
            }
            OracleModel::Mfa(m) => {
                let (k, d, r) = (m.weights.len(), m.dim(), m.latent_dim());
                out.extend((0..k * d).map(|i| Param::MfaMean { k: i / d, d: i % d }));
                for kk in 0..k {
                    for i in 0..d {
                        for j in 0..r {
                            out.push(Param::MfaLoading { k: kk, i, j });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Central difference `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEstimate {
    pub values: Vec<f64>,
    /// Indices whose step was shrunk to stay inside the parameter domain.
    pub clipped: Vec<usize>,
}

/// Central differences of the total bag log-likelihood for each selected
/// parameter. Steps for positive parameters are shrunk to half the current
/// value when `h` would cross zero; such indices are reported.
pub fn finite_diff_score(
    model: &OracleModel,
    bag: &DescriptorBag,
    params: &[Param],
    step: f64,
) -> Result<FdEstimate> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut values = Vec::with_capacity(params.len());
    let mut clipped = Vec::new();
    for (idx, &p) in params.iter().enumerate() {
        let x = model.get(p)?;
        let mut h = step;
        if let Some(lo) = OracleModel::lower_bound(p) {
            if !(x > lo) {
                return Err(Error::InvalidArgument(format!(
                    "parameter {p:?} = {x} outside its domain"
                )));
            }
            if x - h <= lo {
                h = 0.5 * (x - lo);
                clipped.push(idx);
            }
        }
        let up = model.with(p, x + h).loglik(bag)?;
        let dn = model.with(p, x - h).loglik(bag)?;
        values.push((up - dn) / (2.0 * h));
    }
    Ok(FdEstimate { values, clipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tolerance: f64,
    /// Indices whose relative error exceeds the tolerance.
    pub failing: Vec<usize>,
    pub clipped: Vec<usize>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failing.is_empty()
    }
}

/// Relative error `|a − b| / max(|a|, |b|, floor)` per entry.
///
/// `floor` keeps entries that are zero up to roundoff from dominating.
pub fn compare_gradients(
    analytic: &[f64],
    fd: &FdEstimate,
    tolerance: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != fd.values.len() {
        return Err(Error::dim(
            fd.values.len(),
            analytic.len(),
            "gradient check",
        ));
    }
    let errs: Vec<f64> = analytic
        .iter()
        .zip(&fd.values)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .collect();
    let n = errs.len().max(1) as f64;
    Ok(GradCheckReport {
        max_rel_err: errs.iter().fold(0.0, |m, e| m.max(*e)),
        mean_rel_err: errs.iter().sum::<f64>() / n,
        tolerance,
        failing: errs
            .iter()
            .enumerate()
            .filter(|(_, e)| !(**e <= tolerance))
            .map(|(i, _)| i)
            .collect(),
        clipped: fd.clipped.clone(),
    })
}

/// Which single-sample score data term to sample.
#[derive(Debug, Clone)]
pub enum McTarget {
    /// Score `(x − μ)/σ²` of a 1-D Gaussian with weight `w`.
    Gaussian1d { mu: f64, sigma: f64, weight: f64 },
    /// `S_k⁻¹(x − μ_k)` for component `k`.
    MfaMean(MfaModel, usize),
    /// `vec(S_k⁻¹Δ (βΔ)ᵀ)` for component `k`, row-major.
    MfaLoading(MfaModel, usize),
    /// `log π − E[log π]` for component `k`.
    Dirichlet(DirichletMixture, usize),
}

#[derive(Debug, Clone)]
pub struct McEstimate {
    /// `w_k` times the sample covariance of the score data term.
    pub fisher: DMatrix<f64>,
    /// Standard error of each entry of `fisher`.
    pub stderr: DMatrix<f64>,
    pub n: usize,
}

struct Sampler {
    weight: f64,
    dim: usize,
    draw: Box<dyn Fn(&mut rand_chacha::ChaCha8Rng) -> DVector<f64> + Sync>,
}

fn sampler(target: &McTarget) -> Result<Sampler> {
    Ok(match target.clone() {
        McTarget::Gaussian1d { mu, sigma, weight } => {
            if !(sigma > 0.0) {
                return Err(Error::InvalidArgument("sigma must be positive".into()));
            }
            Sampler {
                weight,
                dim: 1,
                draw: Box::new(move |rng| {
                    let x = mu + sigma * rng.sample::<f64, _>(StandardNormal);
                    DVector::from_element(1, (x - mu) / (sigma * sigma))
                }),
            }
        }
        McTarget::MfaMean(m, k) | McTarget::MfaLoading(m, k) => {
            let loading = matches!(target, McTarget::MfaLoading(..));
            if k >= m.weights.len() {
                return Err(Error::InvalidArgument(format!(
                    "component {k} out of range"
                )));
            }
            let s = dense_cov(&m, k);
            let s_inv = s
                .clone()
                .try_inverse()
                .ok_or_else(|| Error::NotPositiveDefinite("component covariance".into()))?;
            let beta = m.loadings[k].transpose() * &s_inv;
            let chol = s
                .cholesky()
                .ok_or_else(|| Error::NotPositiveDefinite("component covariance".into()))?;
            let l = chol.l();
            let (d, r) = (m.dim(), m.latent_dim());
            Sampler {
                weight: m.weights[k],
                dim: if loading { d * r } else { d },
                draw: Box::new(move |rng| {
                    let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let delta = &l * e;
                    let f = &s_inv * &delta;
                    if loading {
                        let g = &beta * &delta;
                        DVector::from_fn(d * r, |idx, _| f[idx / r] * g[idx % r])
                    } else {
                        f
                    }
                }),
            }
        }
        McTarget::Dirichlet(m, k) => {
            if k >= m.weights.len() {
                return Err(Error::InvalidArgument(format!(
                    "component {k} out of range"
                )));
            }
            let a = m.alphas[k].clone();
            let ds = digamma(a.sum())?;
            let centre = a
                .iter()
                .map(|v| digamma(*v).map(|x| x - ds))
                .collect::<Result<Vec<_>>>()?;
            let gammas = a
                .iter()
                .map(|v| Gamma::new(*v, 1.0).expect("positive shape"))
                .collect::<Vec<_>>();
            let s = a.len();
            Sampler {
                weight: m.weights[k],
                dim: s,
                draw: Box::new(move |rng| {
                    let g: Vec<f64> = gammas.iter().map(|d| d.sample(rng)).collect();
                    // log π_l = log g_l − log Σ g, computed without forming π.
                    let total = g.iter().sum::<f64>().ln();
                    DVector::from_fn(s, |l, _| g[l].ln() - total - centre[l])
                }),
            }
        }
    })
}

/// Monte-Carlo estimate of `w_k Cov_k(𝒢_k(x))`.
///
/// Chunks of [`MC_CHUNK`] samples run in parallel, chunk `c` on stream `c`
/// of `seed`; sums are merged in chunk order.
pub fn mc_fisher_info(target: &McTarget, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if n_samples < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            have: n_samples,
        });
    }
    let s = sampler(target)?;
    let dim = s.dim;
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let parts: Vec<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c as u64);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut sum = DVector::zeros(dim);
            let mut outer = DMatrix::zeros(dim, dim);
            let mut fourth = DMatrix::zeros(dim, dim);
            for _ in 0..count {
                let g = (s.draw)(&mut rng);
                sum += &g;
                let gg = &g * g.transpose();
                fourth += gg.map(|v| v * v);
                outer += gg;
            }
            (sum, outer, fourth)
        })
        .collect();
    let mut sum = DVector::zeros(dim);
    let mut outer = DMatrix::zeros(dim, dim);
    let mut fourth = DMatrix::zeros(dim, dim);
    for (a, b, c) in parts {
        sum += a;
        outer += b;
        fourth += c;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let second = outer / n;
    let cov = &second - &mean * mean.transpose();
    // Var(g_i g_j) ≈ E[(g_i g_j)²] − E[g_i g_j]²; the mean correction is
    // second order and ignored in the error bar.
    let var = fourth / n - second.map(|v| v * v);
    let stderr = var.map(|v| (v.max(0.0) / n).sqrt()) * s.weight;
    Ok(McEstimate {
        fisher: cov * s.weight,
        stderr,
        n: n_samples,
    })
}

/// Model family of a random gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    Gmm,
    Dmm,
    Mfa,
}

/// A random model with `D ≤ 8`, `K ≤ 3`, `R ≤ 2` and a bag of at most 50
/// descriptors. The bag for a Dirichlet mixture is drawn from the model.
pub fn random_instance<R: Rng + ?Sized>(
    kind: InstanceKind,
    rng: &mut R,
) -> Result<(OracleModel, DescriptorBag)> {
    let k = rng.random_range(1..=3);
    let n = rng.random_range(1..=50);
    let weights = |rng: &mut R| {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let t: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / t).collect::<Vec<_>>()
    };
    let normal = |rng: &mut R, d: usize, scale: f64| {
        DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
    };
    Ok(match kind {
        InstanceKind::Gmm => {
            let d = rng.random_range(1..=8);
            let w = weights(rng);
            let means = (0..k).map(|_| normal(rng, d, 1.5)).collect();
            let vars = (0..k)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(0.3..2.0)))
                .collect();
            let m = DiagonalGmm::new(w, means, vars)?;
            let bag = (0..n).map(|_| normal(rng, d, 2.0)).collect();
            (
                OracleModel::Gmm(m),
                DescriptorBag::new(bag, EmbeddingTag::Raw, None)?,
            )
        }
        InstanceKind::Dmm => {
            let s = rng.random_range(2..=8);
            let w = weights(rng);
            let alphas: Vec<DVector<f64>> = (0..k)
                .map(|_| DVector::from_fn(s, |_, _| rng.random_range(0.5..5.0)))
                .collect();
            let bag = (0..n)
                .map(|_| sample_dirichlet(&alphas[rng.random_range(0..k)], rng))
                .collect();
            let m = DirichletMixture::new(w, alphas)?;
            (
                OracleModel::Dmm(m),
                DescriptorBag::new(bag, EmbeddingTag::Raw, None)?,
            )
        }
        InstanceKind::Mfa => {
            let d = rng.random_range(2..=8);
            let r = rng.random_range(1..=(d - 1).min(2));
            let w = weights(rng);
            let means = (0..k).map(|_| normal(rng, d, 1.5)).collect();
            let loadings = (0..k)
                .map(|_| DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let noise = (0..k)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(0.3..1.5)))
                .collect();
            let m = MfaModel::new(w, means, loadings, noise)?;
            let bag = (0..n).map(|_| normal(rng, d, 2.0)).collect();
            (
                OracleModel::Mfa(m),
                DescriptorBag::new(bag, EmbeddingTag::Raw, None)?,
            )
        }
    })
}

/// The production score for `model`, in [`OracleModel::all_params`] order.
pub fn analytic_score(model: &OracleModel, bag: &DescriptorBag) -> Result<DVector<f64>> {
    Ok(match model {
        OracleModel::Gmm(m) => {
            let (mu, sigma) = gmm_scores(m, bag)?;
            DVector::from_iterator(
                mu.len() + sigma.len(),
                mu.iter().chain(sigma.iter()).copied(),
            )
        }
        OracleModel::Dmm(m) => dmm_score(m, bag)?,
        OracleModel::Mfa(m) => mfa_fs_mu_lambda(m, bag)?.vector,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub kind: InstanceKind,
    pub instance: usize,
    pub n_params: usize,
    pub report: GradCheckReport,
}

/// Finite-difference step used by [`gradient_suite`].
pub const SUITE_STEP: f64 = 1e-5;
/// Absolute floor of the relative-error denominator in [`gradient_suite`].
pub const SUITE_FLOOR: f64 = 1e-3;

/// Checks analytic scores against central differences on `instances` random
/// models of each family. Instance `i` of family `f` uses stream `3i + f`.
pub fn gradient_suite(instances: usize, seed: u64, tolerance: f64) -> Result<Vec<SuiteEntry>> {
    let kinds = [InstanceKind::Gmm, InstanceKind::Dmm, InstanceKind::Mfa];
    let jobs: Vec<(usize, usize)> = (0..instances)
        .flat_map(|i| (0..3).map(move |f| (i, f)))
        .collect();
    jobs.par_iter()
        .map(|&(i, f)| {
            let mut rng = stream_rng(seed, (3 * i + f) as u64);
            let (model, bag) = random_instance(kinds[f], &mut rng)?;
            let params = model.all_params();
            let fd = finite_diff_score(&model, &bag, &params, SUITE_STEP)?;
            let g = analytic_score(&model, &bag)?;
            Ok(SuiteEntry {
                kind: kinds[f],
                instance: i,
                n_params: params.len(),
                report: compare_gradients(g.as_slice(), &fd, tolerance, SUITE_FLOOR)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{dmm_fisher_info, mfa_fs_lambda, mfa_fs_mu, mfa_loading_covariance};
    use crate::mixtures::{gmm_posteriors_loglik, mfa_derived, mfa_posteriors_loglik};
    use crate::rng::seeded;

    fn bag(rows: Vec<DVector<f64>>) -> DescriptorBag {
        DescriptorBag::new(rows, EmbeddingTag::Raw, None).unwrap()
    }

    fn random_gmm(seed: u64) -> (DiagonalGmm, DescriptorBag) {
        let mut rng = seeded(seed);
        let g = DiagonalGmm::new(
            vec![0.25, 0.75],
            (0..2)
                .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            (0..2)
                .map(|_| DVector::from_fn(3, |_, _| rng.random_range(0.5..2.0)))
                .collect(),
        )
        .unwrap();
        let b = bag((0..10)
            .map(|_| DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0)))
            .collect());
        (g, b)
    }

    #[test]
    fn quadratic_derivative_is_exact() {
        let a = 1.7;
        let f = |t: f64| -0.5 * (t - a) * (t - a);
        for theta in [-3.0, 0.0, 2.5] {
            let d = central_difference(f, theta, 1e-3);
            assert!((d - (a - theta)).abs() < 1e-10);
        }
    }

    #[test]
    fn naive_logliks_agree_with_models() {
        let (g, b) = random_gmm(1);
        let fast = gmm_posteriors_loglik(&g, &b).unwrap().loglik;
        assert!((naive_gmm_loglik(&g, &b).unwrap() - fast).abs() <= 1e-10 * fast.abs());
    }

    #[test]
    fn gmm_scores_match_and_steps_are_consistent() {
        let (g, b) = random_gmm(2);
        let (mu, sigma) = gmm_scores(&g, &b).unwrap();
        let analytic: Vec<f64> = mu.iter().chain(sigma.iter()).copied().collect();
        let model = OracleModel::Gmm(g);
        let params = model.all_params();
        let fd5 = finite_diff_score(&model, &b, &params, 1e-5).unwrap();
        let fd4 = finite_diff_score(&model, &b, &params, 1e-4).unwrap();
        let rep = compare_gradients(&analytic, &fd5, 1e-5, 1e-3).unwrap();
        assert!(rep.passed(), "{rep:?}");
        // Both steps are in the O(h²) regime, so they agree closely.
        let rep = compare_gradients(&fd4.values, &fd5, 1e-6, 1e-3).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn small_alpha_step_is_clipped() {
        let m = DirichletMixture::new(
            vec![1.0],
            vec![DVector::from_column_slice(&[0.01, 2.0, 1.0])],
        )
        .unwrap();
        let b = bag(vec![DVector::from_column_slice(&[0.2, 0.5, 0.3])]);
        let model = OracleModel::Dmm(m.clone());
        let fd = finite_diff_score(&model, &b, &model.all_params(), 0.05).unwrap();
        assert_eq!(fd.clipped, vec![0]);
        // The clipped entry is flagged; the unclipped ones stay accurate.
        let g = dmm_score(&m, &b).unwrap();
        let rest = FdEstimate {
            values: fd.values[1..].to_vec(),
            clipped: vec![],
        };
        let rep = compare_gradients(&g.as_slice()[1..], &rest, 1e-2, 1e-3).unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert!(finite_diff_score(&model, &b, &model.all_params(), 1e-3)
            .unwrap()
            .clipped
            .is_empty());
    }

    #[test]
    fn mfa_scores_match_naive_differences() {
        let mut rng = seeded(3);
        let m = MfaModel::new(
            vec![0.5, 0.5],
            (0..2)
                .map(|_| DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            (0..2)
                .map(|_| DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            vec![DVector::from_fn(4, |_, _| rng.random_range(0.3..1.0))],
        )
        .unwrap();
        let b = bag((0..8)
            .map(|_| DVector::from_fn(4, |_, _| rng.random_range(-2.0..2.0)))
            .collect());
        let fast = mfa_posteriors_loglik(&m, &b).unwrap().0.loglik;
        assert!((naive_mfa_loglik(&m, &b).unwrap() - fast).abs() <= 1e-10 * fast.abs());
        let analytic: Vec<f64> = mfa_fs_mu(&m, &b)
            .unwrap()
            .vector
            .iter()
            .chain(mfa_fs_lambda(&m, &b).unwrap().vector.iter())
            .copied()
            .collect();
        let model = OracleModel::Mfa(m);
        let fd = finite_diff_score(&model, &b, &model.all_params(), 1e-5).unwrap();
        let rep = compare_gradients(&analytic, &fd, 1e-5, 1e-3).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn gaussian_fisher_within_three_standard_errors() {
        let sigma = 1.7;
        let est = mc_fisher_info(
            &McTarget::Gaussian1d {
                mu: 0.3,
                sigma,
                weight: 1.0,
            },
            200_000,
            5,
        )
        .unwrap();
        let truth = 1.0 / (sigma * sigma);
        assert!((est.fisher[(0, 0)] - truth).abs() <= 3.0 * est.stderr[(0, 0)]);
    }

    #[test]
    fn dirichlet_fisher_matches_closed_form() {
        let m = DirichletMixture::new(vec![1.0], vec![DVector::from_column_slice(&[2.0, 3.0])])
            .unwrap();
        let est = mc_fisher_info(&McTarget::Dirichlet(m.clone(), 0), 1_000_000, 6).unwrap();
        let f = &dmm_fisher_info(&m).unwrap().blocks[0];
        assert!((&est.fisher - f).norm() / f.norm() <= 0.02);
    }

    #[test]
    fn mfa_loading_fisher_matches_isserlis() {
        let mut rng = seeded(7);
        let m = MfaModel::new(
            vec![0.4, 0.6],
            vec![DVector::zeros(2), DVector::from_element(2, 3.0)],
            (0..2)
                .map(|_| DMatrix::from_fn(2, 1, |_, _| rng.random_range(-1.0..1.0)))
                .collect(),
            vec![DVector::from_fn(2, |_, _| rng.random_range(0.3..1.0))],
        )
        .unwrap();
        let est = mc_fisher_info(&McTarget::MfaLoading(m.clone(), 1), 1_000_000, 8).unwrap();
        let closed = mfa_loading_covariance(&mfa_derived(&m).unwrap().components[1]) * m.weights[1];
        assert!((&est.fisher - &closed).norm() / closed.norm() <= 0.02);
    }

    #[test]
    fn monte_carlo_error_shrinks_like_root_n() {
        let target = McTarget::Gaussian1d {
            mu: 0.0,
            sigma: 0.8,
            weight: 1.0,
        };
        let errs: Vec<f64> = [10_000, 100_000, 1_000_000]
            .iter()
            .map(|n| mc_fisher_info(&target, *n, 11).unwrap().stderr[(0, 0)])
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 10f64.sqrt()).abs() < 0.3, "ratio {ratio}");
        }
    }

    #[test]
    fn random_suite_passes() {
        let entries = gradient_suite(5, 77, 1e-5).unwrap();
        assert_eq!(entries.len(), 15);
        for e in &entries {
            assert!(e.report.passed(), "{e:?}");
            assert!(e.report.clipped.is_empty());
        }
    }
}
