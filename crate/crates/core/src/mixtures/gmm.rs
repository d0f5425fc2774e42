use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::init::{global_variance, kmeans_pp};
use super::{check_weights, relative_improvement, EmConfig, Fitted, Posteriors, CHUNK};
use crate::descriptors::{check_bags, pooled, DescriptorBag};
use crate::numerics::log_sum_exp;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian mixture with diagonal covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGmm {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Per-dimension variances `σ²_k`.
    pub variances: Vec<DVector<f64>>,
}

impl DiagonalGmm {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        variances: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let m = Self {
            weights,
            means,
            variances,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_weights(&self.weights)?;
        let k = self.weights.len();
        if self.means.len() != k || self.variances.len() != k {
            return Err(Error::dim(
                k,
                self.means.len().min(self.variances.len()),
                "gmm components",
            ));
        }
        let d = self.means[0].len();
        for (mu, var) in self.means.iter().zip(&self.variances) {
            if mu.len() != d || var.len() != d {
                return Err(Error::dim(d, mu.len().max(var.len()), "gmm dimension"));
            }
            if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument(
                    "gmm variances must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// `log w_k + log G(x; μ_k, σ²_k)` for every component.
    pub(crate) fn log_joint(&self, x: &DVector<f64>, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mu = &self.means[k];
            let var = &self.variances[k];
            let mut acc = 0.0;
            for d in 0..x.len() {
                let r = x[d] - mu[d];
                acc += LN_2PI + var[d].ln() + r * r / var[d];
            }
            *o = self.weights[k].ln() - 0.5 * acc;
        }
    }
}

/// Posterior rows and log-likelihood of `points`; rows are written to `resp`
/// (row-major, `points.len() × K`).
fn e_step(m: &DiagonalGmm, points: &[&DVector<f64>], resp: &mut [f64]) -> Result<f64> {
    let k = m.n_components();
    let partial: Vec<Result<f64>> = points
        .par_chunks(CHUNK)
        .zip(resp.par_chunks_mut(CHUNK * k))
        .map(|(pts, rows)| {
            let mut ll = 0.0;
            for (x, row) in pts.iter().zip(rows.chunks_mut(k)) {
                m.log_joint(x, row);
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

/// Responsibilities `p(k | x_i)` and the bag log-likelihood.
pub fn gmm_posteriors_loglik(m: &DiagonalGmm, bag: &DescriptorBag) -> Result<Posteriors> {
    if bag.dim() != m.dim() {
        return Err(Error::dim(m.dim(), bag.dim(), "gmm posteriors"));
    }
    let points: Vec<&DVector<f64>> = bag.descriptors.iter().collect();
    let k = m.n_components();
    let mut resp = vec![0.0; points.len() * k];
    let loglik = e_step(m, &points, &mut resp)?;
    Ok(Posteriors {
        responsibilities: DMatrix::from_row_slice(points.len(), k, &resp),
        loglik,
    })
}

pub(crate) fn gmm_init(
    points: &[&DVector<f64>],
    k: usize,
    config: &EmConfig,
) -> Result<(DiagonalGmm, f64)> {
    if points.len() < k {
        return Err(Error::InsufficientSamples {
            needed: k,
            have: points.len(),
        });
    }
    let (_, var) = global_variance(points)?;
    let scale = var.mean();
    if !(scale > 0.0) {
        return Err(Error::DegenerateData(
            "all descriptors are identical; variance floor would be zero".into(),
        ));
    }
    let floor = config.floor_scale * scale;
    let (centers, _) = kmeans_pp(points, k, config.kmeans_iter, config.seed)?;
    let init_var = var.map(|v| v.max(floor));
    let model = DiagonalGmm {
        weights: vec![1.0 / k as f64; k],
        means: centers,
        variances: vec![init_var; k],
    };
    Ok((model, floor))
}

/// EM for a diagonal GMM over all descriptors of all bags.
pub fn fit_gmm_em(
    bags: &[DescriptorBag],
    k: usize,
    config: &EmConfig,
) -> Result<Fitted<DiagonalGmm>> {
    check_bags(bags)?;
    let points: Vec<&DVector<f64>> = pooled(bags).collect();
    let (mut model, floor) = gmm_init(&points, k, config)?;
    let n = points.len();
    let dim = model.dim();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 0..=config.max_iter {
        let ll = e_step(&model, &points, &mut resp)?;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("gmm log-likelihood became {ll}")));
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
        let mut sums = vec![DVector::<f64>::zeros(dim); k];
        for (x, row) in points.iter().zip(resp.chunks(k)) {
            for j in 0..k {
                nk[j] += row[j];
                sums[j].axpy(row[j], x, 1.0);
            }
        }
        for j in 0..k {
            if nk[j] > 0.0 {
                model.means[j] = &sums[j] / nk[j];
            }
        }
        let mut sq = vec![DVector::<f64>::zeros(dim); k];
        for (x, row) in points.iter().zip(resp.chunks(k)) {
            for j in 0..k {
                let r = *x - &model.means[j];
                sq[j] += r.map(|v| v * v) * row[j];
            }
        }
        for j in 0..k {
            if nk[j] > 0.0 {
                model.variances[j] = (&sq[j] / nk[j]).map(|v| v.max(floor));
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
