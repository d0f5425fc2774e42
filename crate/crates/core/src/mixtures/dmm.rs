use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::init::kmeans_pp;
use super::{check_weights, relative_improvement, EmConfig, Fitted, Posteriors, CHUNK};
use crate::descriptors::{check_bags, pooled, DescriptorBag, DEFAULT_EPSILON};
use crate::numerics::{digamma, log_gamma, log_sum_exp, trigamma};
use crate::{Error, Result};

/// Mixture of Dirichlet distributions over the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletMixture {
    pub weights: Vec<f64>,
    pub alphas: Vec<DVector<f64>>,
    /// Probability floor applied before `log π`.
    pub epsilon: f64,
}

impl DirichletMixture {
    pub fn new(weights: Vec<f64>, alphas: Vec<DVector<f64>>) -> Result<Self> {
        let m = Self {
            weights,
            alphas,
            epsilon: DEFAULT_EPSILON,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_weights(&self.weights)?;
        if self.alphas.len() != self.weights.len() {
            return Err(Error::dim(
                self.weights.len(),
                self.alphas.len(),
                "dmm components",
            ));
        }
        let s = self.alphas[0].len();
        for a in &self.alphas {
            if a.len() != s {
                return Err(Error::dim(s, a.len(), "dmm dimension"));
            }
            if a.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
                return Err(Error::InvalidArgument(
                    "dirichlet parameters must be positive".into(),
                ));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.alphas[0].len()
    }

    pub(crate) fn log_norms(&self) -> Result<Vec<f64>> {
        self.alphas.iter().map(dirichlet_log_norm).collect()
    }
}

/// `log B(α) = Σ ln Γ(α_l) − ln Γ(Σ α_l)`, the log of the Dirichlet normalizer.
pub fn dirichlet_log_norm(alpha: &DVector<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for a in alpha.iter() {
        acc += log_gamma(*a)?;
    }
    Ok(acc - log_gamma(alpha.sum())?)
}

/// `log max(π, ε)` for every descriptor, after checking that each lies on the simplex.
pub fn log_probs(bag: &DescriptorBag, epsilon: f64) -> Result<Vec<DVector<f64>>> {
    bag.descriptors
        .iter()
        .map(|p| {
            if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::InvalidDescriptor(
                    "dirichlet input must be nonnegative probabilities".into(),
                ));
            }
            let s = p.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidDescriptor(format!(
                    "dirichlet input must sum to 1 (got {s})"
                )));
            }
            Ok(p.map(|x| x.max(epsilon).ln()))
        })
        .collect()
}

fn log_joint(m: &DirichletMixture, norms: &[f64], logp: &DVector<f64>, out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let a = &m.alphas[k];
        let mut acc = 0.0;
        for l in 0..logp.len() {
            acc += (a[l] - 1.0) * logp[l];
        }
        *o = m.weights[k].ln() + acc - norms[k];
    }
}

fn e_step(m: &DirichletMixture, logs: &[DVector<f64>], resp: &mut [f64]) -> Result<f64> {
    let k = m.n_components();
    let norms = m.log_norms()?;
    let partial: Vec<Result<f64>> = logs
        .par_chunks(CHUNK)
        .zip(resp.par_chunks_mut(CHUNK * k))
        .map(|(pts, rows)| {
            let mut ll = 0.0;
            for (x, row) in pts.iter().zip(rows.chunks_mut(k)) {
                log_joint(m, &norms, x, row);
                let lse = log_sum_exp(row)?;
                for r in row.iter_mut() {
                    *r = (*r - lse).exp();
                }
                ll += lse;
            }
            Ok(ll)
        })
        .collect();
    let mut total = 0.0;
    for p in partial {
        total += p?;
    }
    Ok(total)
}

/// Posteriors under the full Dirichlet densities (normalizers included) and the
/// bag log-likelihood.
pub fn dmm_posteriors_loglik(m: &DirichletMixture, bag: &DescriptorBag) -> Result<Posteriors> {
    if bag.dim() != m.dim() {
        return Err(Error::dim(m.dim(), bag.dim(), "dmm posteriors"));
    }
    let logs = log_probs(bag, m.epsilon)?;
    let k = m.n_components();
    let mut resp = vec![0.0; logs.len() * k];
    let loglik = e_step(m, &logs, &mut resp)?;
    Ok(Posteriors {
        responsibilities: DMatrix::from_row_slice(logs.len(), k, &resp),
        loglik,
    })
}

/// Per-component objective `(α − 1)·ḡ − log B(α)`, i.e. Q / N_k.
fn component_objective(alpha: &DVector<f64>, mean_log: &DVector<f64>) -> Result<f64> {
    let lin: f64 = alpha
        .iter()
        .zip(mean_log.iter())
        .map(|(a, g)| (a - 1.0) * g)
        .sum();
    Ok(lin - dirichlet_log_norm(alpha)?)
}

/// Damped Newton ascent on one component's objective.
///
/// The Hessian is `ψ′(Σα) 𝟙𝟙ᵀ − diag ψ′(α)`, inverted in closed form.
/// Steps are halved until the objective does not decrease.
pub(crate) fn newton_alpha(
    alpha: &DVector<f64>,
    mean_log: &DVector<f64>,
    config: &EmConfig,
) -> Result<DVector<f64>> {
    let mut a = alpha.clone();
    let mut q = component_objective(&a, mean_log)?;
    for _ in 0..config.newton_max_iter {
        let total = a.sum();
        let psi_total = digamma(total)?;
        let tri_total = trigamma(total)?;
        let mut grad = DVector::zeros(a.len());
        let mut diag = DVector::zeros(a.len());
        for l in 0..a.len() {
            grad[l] = mean_log[l] - digamma(a[l])? + psi_total;
            diag[l] = -trigamma(a[l])?;
        }
        // H = diag + c 𝟙𝟙ᵀ, (H⁻¹ g)_l = (g_l − b) / diag_l
        let num: f64 = grad.iter().zip(diag.iter()).map(|(g, d)| g / d).sum();
        let den: f64 = 1.0 / tri_total + diag.iter().map(|d| 1.0 / d).sum::<f64>();
        let b = num / den;
        let step = DVector::from_fn(a.len(), |l, _| (grad[l] - b) / diag[l]);
        if step.iter().any(|s| !s.is_finite()) {
            return Err(Error::Newton(format!(
                "non-finite newton step at alpha = {:?}",
                a.as_slice()
            )));
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = (&a - &step * t).map(|x| x.clamp(config.alpha_min, config.alpha_max));
            let qt = component_objective(&trial, mean_log)?;
            if qt >= q {
                accepted = Some((trial, qt));
                break;
            }
            t *= 0.5;
        }
        let Some((next, qn)) = accepted else { break };
        let moved = (&next - &a).amax() / a.amax();
        a = next;
        q = qn;
        if moved < 1e-12 {
            break;
        }
    }
    if !q.is_finite() || a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Newton("dirichlet newton iterations diverged".into()));
    }
    Ok(a)
}

/// Dirichlet moment-matching estimate for a set of simplex points.
fn moment_match(points: &[&DVector<f64>], config: &EmConfig) -> DVector<f64> {
    let s = points[0].len();
    let n = points.len() as f64;
    let mut mean = DVector::zeros(s);
    for p in points {
        mean += *p;
    }
    mean /= n;
    let mut var = DVector::zeros(s);
    for p in points {
        var += (*p - &mean).map(|x| x * x);
    }
    var /= n;
    let mut precisions = Vec::new();
    for l in 0..s {
        if var[l] > 0.0 && mean[l] > 0.0 && mean[l] < 1.0 {
            precisions.push(mean[l] * (1.0 - mean[l]) / var[l] - 1.0);
        }
    }
    let cap = config.alpha_max / mean.max().max(1e-300);
    let precision = if precisions.is_empty() {
        cap
    } else {
        (precisions.iter().sum::<f64>() / precisions.len() as f64).clamp(1.0, cap)
    };
    mean.map(|m| (m * precision).clamp(config.alpha_min, config.alpha_max))
}

/// EM for a Dirichlet mixture. Bags must hold raw probabilities.
pub fn fit_dmm_em(
    bags: &[DescriptorBag],
    k: usize,
    config: &EmConfig,
) -> Result<Fitted<DirichletMixture>> {
    check_bags(bags)?;
    let eps = config.epsilon;
    let raw: Vec<&DVector<f64>> = pooled(bags).collect();
    if raw.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            have: raw.len(),
        });
    }
    let mut logs = Vec::with_capacity(raw.len());
    for b in bags {
        logs.extend(log_probs(b, eps)?);
    }
    let n = logs.len();
    let s = logs[0].len();

    let log_refs: Vec<&DVector<f64>> = logs.iter().collect();
    let (_, assign) = kmeans_pp(&log_refs, k, config.kmeans_iter, config.seed)?;
    let mut alphas = Vec::with_capacity(k);
    for j in 0..k {
        let members: Vec<&DVector<f64>> = raw
            .iter()
            .zip(&assign)
            .filter(|(_, a)| **a == j)
            .map(|(p, _)| *p)
            .collect();
        let pts = if members.is_empty() {
            raw.clone()
        } else {
            members
        };
        alphas.push(moment_match(&pts, config));
    }
    let mut model = DirichletMixture {
        weights: vec![1.0 / k as f64; k],
        alphas,
        epsilon: eps,
    };

    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 0..=config.max_iter {
        let ll = e_step(&model, &logs, &mut resp)?;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("dmm log-likelihood became {ll}")));
        }
        if let Some(prev) = trace.last() {
            if relative_improvement(*prev, ll) < config.tol {
                converged = true;
            }
        }
        trace.push(ll);
        if converged || it == config.max_iter {
            break;
        }
        let mut nk = vec![0.0; k];
        let mut sums = vec![DVector::<f64>::zeros(s); k];
        for (x, row) in logs.iter().zip(resp.chunks(k)) {
            for j in 0..k {
                nk[j] += row[j];
                sums[j].axpy(row[j], x, 1.0);
            }
        }
        for j in 0..k {
            if nk[j] > 0.0 {
                let mean_log = &sums[j] / nk[j];
                model.alphas[j] = newton_alpha(&model.alphas[j], &mean_log, config)?;
            }
            model.weights[j] = nk[j] / n as f64;
        }
    }
    Ok(Fitted {
        model,
        loglik_trace: trace,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::EmbeddingTag;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::{Distribution, Gamma};

    pub(crate) fn sample_dirichlet(alpha: &[f64], n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = seeded(seed);
        let gammas: Vec<Gamma<f64>> = alpha.iter().map(|a| Gamma::new(*a, 1.0).unwrap()).collect();
        (0..n)
            .map(|_| {
                let g =
                    DVector::from_iterator(alpha.len(), gammas.iter().map(|d| d.sample(&mut rng)));
                let s = g.sum();
                g / s
            })
            .collect()
    }

    fn bag(rows: Vec<DVector<f64>>) -> DescriptorBag {
        DescriptorBag::new(rows, EmbeddingTag::Raw, None).unwrap()
    }

    #[test]
    fn single_component_posteriors() {
        let m =
            DirichletMixture::new(vec![1.0], vec![DVector::from_vec(vec![2.0, 3.0, 1.5])]).unwrap();
        let b = bag(sample_dirichlet(&[1.0, 1.0, 1.0], 5, 1));
        let p = dmm_posteriors_loglik(&m, &b).unwrap();
        assert!(p.responsibilities.iter().all(|r| *r == 1.0));
    }

    #[test]
    fn uniform_components_return_weights() {
        let ones = DVector::from_element(3, 1.0);
        let m = DirichletMixture::new(vec![0.3, 0.7], vec![ones.clone(), ones]).unwrap();
        let b = bag(sample_dirichlet(&[0.5, 2.0, 1.0], 8, 2));
        let p = dmm_posteriors_loglik(&m, &b).unwrap();
        for i in 0..8 {
            assert!((p.responsibilities[(i, 0)] - 0.3).abs() < 1e-12);
            assert!((p.responsibilities[(i, 1)] - 0.7).abs() < 1e-12);
        }
        // uniform density on the 2-simplex is Γ(3) = 2
        assert!((p.loglik - 8.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn matches_direct_density() {
        let m = DirichletMixture::new(
            vec![0.4, 0.6],
            vec![
                DVector::from_vec(vec![2.0, 0.7, 3.1]),
                DVector::from_vec(vec![0.9, 4.0, 1.2]),
            ],
        )
        .unwrap();
        let rows = sample_dirichlet(&[1.0, 1.0, 1.0], 6, 3);
        let p = dmm_posteriors_loglik(&m, &bag(rows.clone())).unwrap();
        let mut ll = 0.0;
        for (i, x) in rows.iter().enumerate() {
            let dens: Vec<f64> = (0..2)
                .map(|k| {
                    let a = &m.alphas[k];
                    let gamma = |v: f64| log_gamma(v).unwrap().exp();
                    let mut z = gamma(a.sum());
                    for l in 0..3 {
                        z /= gamma(a[l]);
                        z *= x[l].powf(a[l] - 1.0);
                    }
                    m.weights[k] * z
                })
                .collect();
            let tot: f64 = dens.iter().sum();
            ll += tot.ln();
            for k in 0..2 {
                assert!((p.responsibilities[(i, k)] - dens[k] / tot).abs() < 1e-10);
            }
        }
        assert!((p.loglik - ll).abs() < 1e-10);
    }

    #[test]
    fn rejects_non_simplex_input() {
        let m = DirichletMixture::new(vec![1.0], vec![DVector::from_vec(vec![1.0, 1.0])]).unwrap();
        let b = bag(vec![DVector::from_vec(vec![0.7, 0.7])]);
        assert!(dmm_posteriors_loglik(&m, &b).is_err());
    }

    #[test]
    fn recovers_single_dirichlet() {
        let rows = sample_dirichlet(&[2.0, 5.0, 3.0], 10_000, 4);
        let fit = fit_dmm_em(&[bag(rows)], 1, &EmConfig::default()).unwrap();
        let a = &fit.model.alphas[0];
        for (got, want) in a.iter().zip([2.0, 5.0, 3.0]) {
            assert!(((got - want) / want).abs() < 0.1, "{got} vs {want}");
        }
    }

    #[test]
    fn exchangeable_data_gives_equal_alphas() {
        let rows = sample_dirichlet(&[1.5, 1.5, 1.5, 1.5], 5000, 5);
        let fit = fit_dmm_em(&[bag(rows)], 1, &EmConfig::default()).unwrap();
        let a = &fit.model.alphas[0];
        let mean = a.mean();
        assert!(a.iter().all(|x| ((x - mean) / mean).abs() < 0.05), "{a}");
    }

    #[test]
    fn repeated_descriptor_stays_finite() {
        let rows = vec![DVector::from_vec(vec![0.2, 0.3, 0.5]); 30];
        let config = EmConfig::default();
        let fit = fit_dmm_em(&[bag(rows)], 1, &config).unwrap();
        let a = &fit.model.alphas[0];
        assert!(a
            .iter()
            .all(|x| x.is_finite() && *x <= config.alpha_max && *x >= config.alpha_min));
        assert!(fit.loglik_trace.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn loglik_is_monotone() {
        for seed in 0..4 {
            let mut rows = sample_dirichlet(&[3.0, 1.0, 0.5], 150, 10 + seed);
            rows.extend(sample_dirichlet(&[0.6, 0.6, 4.0], 150, 20 + seed));
            let config = EmConfig {
                max_iter: 50,
                tol: f64::NEG_INFINITY,
                seed,
                ..EmConfig::default()
            };
            let fit = fit_dmm_em(&[bag(rows)], 3, &config).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn newton_reaches_stationary_point() {
        let mut rng = seeded(9);
        let rows = sample_dirichlet(&[0.8, 2.5, 1.7, 4.0], 500, 6);
        let n = rows.len() as f64;
        let mut g = DVector::zeros(4);
        for r in &rows {
            g += r.map(f64::ln);
        }
        g /= n;
        let start = DVector::from_fn(4, |_, _| rng.random_range(0.5..3.0));
        let a = newton_alpha(&start, &g, &EmConfig::default()).unwrap();
        let total = digamma(a.sum()).unwrap();
        for l in 0..4 {
            let grad = g[l] - digamma(a[l]).unwrap() + total;
            assert!(grad.abs() < 1e-9, "gradient {grad}");
        }
    }
}
