use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gmm::gmm_init;
use super::{check_weights, relative_improvement, EmConfig, Fitted, Posteriors, CHUNK};
use crate::descriptors::{check_bags, pooled, DescriptorBag};
use crate::numerics::log_sum_exp;
use crate::rng::stream_rng;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Upper bound on the number of E-step blocks reduced per iteration.
const MAX_BLOCKS: usize = 16;

/// Mixture of factor analyzers: component `k` is `G(x; μ_k, Λ_kΛ_kᵀ + ψ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfaModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    /// Factor loadings, `D × R` each.
    pub loadings: Vec<DMatrix<f64>>,
    /// Diagonal noise: one vector when shared, otherwise one per component.
    pub noise: Vec<DVector<f64>>,
}

impl MfaModel {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        loadings: Vec<DMatrix<f64>>,
        noise: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let m = Self {
            weights,
            means,
            loadings,
            noise,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_weights(&self.weights)?;
        let k = self.weights.len();
        if self.means.len() != k || self.loadings.len() != k {
            return Err(Error::dim(
                k,
                self.means.len().min(self.loadings.len()),
                "mfa components",
            ));
        }
        if self.noise.len() != 1 && self.noise.len() != k {
            return Err(Error::dim(k, self.noise.len(), "mfa noise vectors"));
        }
        let d = self.means[0].len();
        let r = self.loadings[0].ncols();
        if r >= d {
            return Err(Error::InvalidArgument(format!(
                "latent dimension {r} must be below data dimension {d}"
            )));
        }
        for (mu, l) in self.means.iter().zip(&self.loadings) {
            if mu.len() != d || l.nrows() != d || l.ncols() != r {
                return Err(Error::dim(d, mu.len(), "mfa component shape"));
            }
        }
        for psi in &self.noise {
            if psi.len() != d {
                return Err(Error::dim(d, psi.len(), "mfa noise"));
            }
            if psi.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::InvalidArgument("mfa noise must be positive".into()));
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

    pub fn latent_dim(&self) -> usize {
        self.loadings[0].ncols()
    }

    pub fn shared_noise(&self) -> bool {
        self.noise.len() == 1
    }

    pub fn noise_of(&self, k: usize) -> &DVector<f64> {
        if self.shared_noise() {
            &self.noise[0]
        } else {
            &self.noise[k]
        }
    }
}

/// Woodbury factorization of one component covariance `S = ΛΛᵀ + ψ`.
#[derive(Debug, Clone)]
pub struct ComponentFactor {
    pub psi_inv: DVector<f64>,
    pub lambda: DMatrix<f64>,
    /// `ψ⁻¹Λ`
    pub psi_inv_lambda: DMatrix<f64>,
    /// `(I + Λᵀψ⁻¹Λ)⁻¹`
    pub core_inv: DMatrix<f64>,
    /// `β = ΛᵀS⁻¹ = (I + Λᵀψ⁻¹Λ)⁻¹Λᵀψ⁻¹`, `R × D`
    pub beta: DMatrix<f64>,
    /// `log det S`
    pub log_det: f64,
}

impl ComponentFactor {
    pub fn new(lambda: &DMatrix<f64>, psi: &DVector<f64>) -> Result<Self> {
        let d = psi.len();
        let r = lambda.ncols();
        let psi_inv = psi.map(|v| 1.0 / v);
        let log_det_psi: f64 = psi.iter().map(|v| v.ln()).sum();
        let mut psi_inv_lambda = lambda.clone();
        for (i, mut row) in psi_inv_lambda.row_iter_mut().enumerate() {
            row *= psi_inv[i];
        }
        if r == 0 {
            return Ok(Self {
                psi_inv,
                lambda: lambda.clone(),
                psi_inv_lambda,
                core_inv: DMatrix::zeros(0, 0),
                beta: DMatrix::zeros(0, d),
                log_det: log_det_psi,
            });
        }
        let core = DMatrix::identity(r, r) + lambda.transpose() * &psi_inv_lambda;
        let chol = core.clone().cholesky().ok_or_else(|| {
            Error::Numerical("singular core matrix I + Λᵀψ⁻¹Λ; loadings are ill-conditioned".into())
        })?;
        let log_det_core = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let core_inv = chol.inverse();
        let beta = &core_inv * psi_inv_lambda.transpose();
        if !log_det_core.is_finite() || beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite woodbury factors".into()));
        }
        Ok(Self {
            psi_inv,
            lambda: lambda.clone(),
            psi_inv_lambda,
            core_inv,
            beta,
            log_det: log_det_psi + log_det_core,
        })
    }

    pub fn dim(&self) -> usize {
        self.psi_inv.len()
    }

    /// `S⁻¹v = ψ⁻¹v − ψ⁻¹Λ(βv)`
    pub fn apply_inv(&self, v: &DVector<f64>) -> DVector<f64> {
        let bv = &self.beta * v;
        v.component_mul(&self.psi_inv) - &self.psi_inv_lambda * bv
    }

    /// `(S⁻¹Δ, βΔ, ΔᵀS⁻¹Δ)` for a residual `Δ`.
    pub fn residual_terms(&self, delta: &DVector<f64>) -> (DVector<f64>, DVector<f64>, f64) {
        let ez = &self.beta * delta;
        let scaled = delta.component_mul(&self.psi_inv);
        let s_inv_delta = &scaled - &self.psi_inv_lambda * &ez;
        let quad = delta.dot(&s_inv_delta);
        (s_inv_delta, ez, quad)
    }

    /// `S⁻¹Λ = βᵀ`
    pub fn s_inv_lambda(&self) -> DMatrix<f64> {
        self.beta.transpose()
    }

    /// `βΛ`, the `R × R` matrix entering `E[zzᵀ|x]`.
    pub fn beta_lambda(&self) -> DMatrix<f64> {
        &self.beta * &self.lambda
    }

    pub fn dense_inverse(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.psi_inv) - &self.psi_inv_lambda * &self.beta
    }

    pub fn dense_covariance(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.psi_inv.map(|v| 1.0 / v))
            + &self.lambda * self.lambda.transpose()
    }

    /// `log G(x; μ, S)` given the residual.
    pub fn log_density(&self, delta: &DVector<f64>) -> f64 {
        let (_, _, quad) = self.residual_terms(delta);
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + quad)
    }
}

/// Derived per-component quantities `S_k` (factored) and `β_k`.
#[derive(Debug, Clone)]
pub struct MfaDerived {
    pub components: Vec<ComponentFactor>,
}

pub fn mfa_derived(m: &MfaModel) -> Result<MfaDerived> {
    let components = (0..m.n_components())
        .map(|k| ComponentFactor::new(&m.loadings[k], m.noise_of(k)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MfaDerived { components })
}

/// Latent posterior moments per descriptor and component: `ez[i][k] = E[z|x_i,k]`,
/// `ezz[i][k] = E[zzᵀ|x_i,k]`.
#[derive(Debug, Clone)]
pub struct MfaEStats {
    pub ez: Vec<Vec<DVector<f64>>>,
    pub ezz: Vec<Vec<DMatrix<f64>>>,
}

/// Responsibilities, bag log-likelihood and latent moments.
pub fn mfa_posteriors_loglik(m: &MfaModel, bag: &DescriptorBag) -> Result<(Posteriors, MfaEStats)> {
    if bag.dim() != m.dim() {
        return Err(Error::dim(m.dim(), bag.dim(), "mfa posteriors"));
    }
    let derived = mfa_derived(m)?;
    let k = m.n_components();
    let r = m.latent_dim();
    let n = bag.len();
    let mut resp = DMatrix::zeros(n, k);
    let mut ez = Vec::with_capacity(n);
    let mut ezz = Vec::with_capacity(n);
    let mut loglik = 0.0;
    let mut logj = vec![0.0; k];
    for (i, x) in bag.descriptors.iter().enumerate() {
        let mut ez_i = Vec::with_capacity(k);
        let mut ezz_i = Vec::with_capacity(k);
        for (j, f) in derived.components.iter().enumerate() {
            let delta = x - &m.means[j];
            let (_, z, quad) = f.residual_terms(&delta);
            logj[j] = m.weights[j].ln() - 0.5 * (m.dim() as f64 * LN_2PI + f.log_det + quad);
            let second = DMatrix::identity(r, r) - f.beta_lambda() + &z * z.transpose();
            ez_i.push(z);
            ezz_i.push(second);
        }
        let lse = log_sum_exp(&logj)?;
        for j in 0..k {
            resp[(i, j)] = (logj[j] - lse).exp();
        }
        loglik += lse;
        ez.push(ez_i);
        ezz.push(ezz_i);
    }
    Ok((
        Posteriors {
            responsibilities: resp,
            loglik,
        },
        MfaEStats { ez, ezz },
    ))
}

/// Responsibility-weighted sufficient statistics of one block of descriptors.
struct BlockStats {
    loglik: f64,
    nk: Vec<f64>,
    sx: Vec<DVector<f64>>,
    sxx: Vec<DVector<f64>>,
    sxz: Vec<DMatrix<f64>>,
    sz: Vec<DVector<f64>>,
    szz: Vec<DMatrix<f64>>,
}

impl BlockStats {
    fn zeros(k: usize, d: usize, r: usize) -> Self {
        Self {
            loglik: 0.0,
            nk: vec![0.0; k],
            sx: vec![DVector::zeros(d); k],
            sxx: vec![DVector::zeros(d); k],
            sxz: vec![DMatrix::zeros(d, r); k],
            sz: vec![DVector::zeros(r); k],
            szz: vec![DMatrix::zeros(r, r); k],
        }
    }

    fn merge(&mut self, other: BlockStats) {
        self.loglik += other.loglik;
        for j in 0..self.nk.len() {
            self.nk[j] += other.nk[j];
            self.sx[j] += &other.sx[j];
            self.sxx[j] += &other.sxx[j];
            self.sxz[j] += &other.sxz[j];
            self.sz[j] += &other.sz[j];
            self.szz[j] += &other.szz[j];
        }
    }
}

fn block_stats(m: &MfaModel, derived: &MfaDerived, points: &[&DVector<f64>]) -> Result<BlockStats> {
    let k = m.n_components();
    let d = m.dim();
    let r = m.latent_dim();
    let mut st = BlockStats::zeros(k, d, r);
    let mut logj = vec![0.0; k];
    let mut zs = vec![DVector::zeros(r); k];
    for x in points {
        for (j, f) in derived.components.iter().enumerate() {
            let delta = *x - &m.means[j];
            let (_, z, quad) = f.residual_terms(&delta);
            logj[j] = m.weights[j].ln() - 0.5 * (d as f64 * LN_2PI + f.log_det + quad);
            zs[j] = z;
        }
        let lse = log_sum_exp(&logj)?;
        st.loglik += lse;
        let xsq = x.map(|v| v * v);
        for j in 0..k {
            let h = (logj[j] - lse).exp();
            if h == 0.0 {
                continue;
            }
            st.nk[j] += h;
            st.sx[j].axpy(h, x, 1.0);
            st.sxx[j].axpy(h, &xsq, 1.0);
            st.sxz[j].ger(h, x, &zs[j], 1.0);
            st.sz[j].axpy(h, &zs[j], 1.0);
            st.szz[j].ger(h, &zs[j], &zs[j], 1.0);
        }
    }
    Ok(st)
}

fn e_step(m: &MfaModel, points: &[&DVector<f64>]) -> Result<BlockStats> {
    let derived = mfa_derived(m)?;
    let blocks = points.len().div_ceil(CHUNK).clamp(1, MAX_BLOCKS);
    let size = points.len().div_ceil(blocks);
    let parts: Vec<Result<BlockStats>> = points
        .par_chunks(size)
        .map(|chunk| block_stats(m, &derived, chunk))
        .collect();
    let mut iter = parts.into_iter();
    let mut total = iter.next().expect("at least one block")?;
    for p in iter {
        total.merge(p?);
    }
    Ok(total)
}

/// Closed-form M-step. Returns the updated model; components whose
/// responsibility mass vanished keep their parameters.
fn m_step(m: &MfaModel, st: &BlockStats, n: usize, floor: f64) -> Result<MfaModel> {
    let k = m.n_components();
    let d = m.dim();
    let r = m.latent_dim();
    let derived = mfa_derived(m)?;
    let mut next = m.clone();
    let mut contrib: Vec<DVector<f64>> = vec![DVector::zeros(d); k];
    for j in 0..k {
        let nk = st.nk[j];
        next.weights[j] = nk / n as f64;
        if nk <= 0.0 {
            continue;
        }
        let f = &derived.components[j];
        let szz = (DMatrix::identity(r, r) - f.beta_lambda()) * nk + &st.szz[j];
        let mut b = DMatrix::zeros(r + 1, r + 1);
        b.view_mut((0, 0), (r, r)).copy_from(&szz);
        for a in 0..r {
            b[(a, r)] = st.sz[j][a];
            b[(r, a)] = st.sz[j][a];
        }
        b[(r, r)] = nk;
        let mut a_mat = DMatrix::zeros(d, r + 1);
        a_mat.view_mut((0, 0), (d, r)).copy_from(&st.sxz[j]);
        a_mat.set_column(r, &st.sx[j]);
        let chol = b.cholesky().ok_or_else(|| {
            Error::Numerical(format!("singular M-step normal equations in component {j}"))
        })?;
        let aug = chol.solve(&a_mat.transpose()).transpose();
        if aug.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite M-step update in component {j}"
            )));
        }
        let mut c = st.sxx[j].clone();
        for row in 0..d {
            let mut acc = 0.0;
            for col in 0..=r {
                acc += aug[(row, col)] * a_mat[(row, col)];
            }
            c[row] -= acc;
        }
        contrib[j] = c;
        next.loadings[j] = aug.columns(0, r).into_owned();
        next.means[j] = aug.column(r).into_owned();
    }
    if m.shared_noise() {
        let mut psi = DVector::zeros(d);
        for c in &contrib {
            psi += c;
        }
        next.noise[0] = (psi / n as f64).map(|v| v.max(floor));
    } else {
        for j in 0..k {
            if st.nk[j] > 0.0 {
                next.noise[j] = (&contrib[j] / st.nk[j]).map(|v| v.max(floor));
            }
        }
    }
    Ok(next)
}

/// Initial MFA: k-means++ means, scaled random orthonormal loadings and the
/// global per-dimension variance as noise.
pub(crate) fn mfa_init(
    points: &[&DVector<f64>],
    k: usize,
    r: usize,
    config: &EmConfig,
) -> Result<(MfaModel, f64)> {
    let (gmm, floor) = gmm_init(points, k, config)?;
    let d = gmm.dim();
    let var = gmm.variances[0].clone();
    let scale = 0.1 * var.mean().sqrt();
    let mut rng = stream_rng(config.seed, 1);
    let loadings = (0..k)
        .map(|_| {
            if r == 0 {
                return DMatrix::zeros(d, 0);
            }
            let g = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
            g.qr().q() * scale
        })
        .collect();
    let noise = if config.shared_noise {
        vec![var]
    } else {
        vec![var; k]
    };
    Ok((
        MfaModel {
            weights: gmm.weights,
            means: gmm.means,
            loadings,
            noise,
        },
        floor,
    ))
}

/// EM for a mixture of factor analyzers with `k` components of latent dimension `r`.
pub fn fit_mfa_em(
    bags: &[DescriptorBag],
    k: usize,
    r: usize,
    config: &EmConfig,
) -> Result<Fitted<MfaModel>> {
    let d = check_bags(bags)?;
    if r >= d {
        return Err(Error::InvalidArgument(format!(
            "latent dimension {r} must be below data dimension {d}"
        )));
    }
    let points: Vec<&DVector<f64>> = pooled(bags).collect();
    let needed = k * (r + 1);
    if points.len() < needed {
        return Err(Error::InsufficientSamples {
            needed,
            have: points.len(),
        });
    }
    let (mut model, floor) = mfa_init(&points, k, r, config)?;
    let n = points.len();
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 0..=config.max_iter {
        let st = e_step(&model, &points)?;
        let ll = st.loglik;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("mfa log-likelihood became {ll}")));
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
        model = m_step(&model, &st, n, floor)?;
    }
    Ok(Fitted {
        model,
        loglik_trace: trace,
        converged,
    })
}
