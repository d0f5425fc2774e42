//! The MFA-FS(Λ) computation as a trainable layer.
//!
//! A bag `u_1..u_n` in the PCA input space goes through
//!
//! ```text
//! x_i  = B (u_i − m)                                   trainable PCA
//! Δ_ik = x_i − μ_k
//! p_ik ∝ κ_k exp(−½ Δ_ikᵀ P_k Δ_ik)                     softmax over k
//! Y_k  = Σ_i p_ik [ (P_k Δ_ik)(P_k Δ_ik)ᵀ Λ_k − Ω_k ]    D × R block
//! e    = l2(sign(y) |y|^ρ)                              normalization
//! s    = W e + b                                        classifier
//! ```
//!
//! With `P = S⁻¹`, `Ω = S⁻¹Λ` and `log κ = log w − ½ log det S` the layer
//! output equals [`mfa_fs_lambda`](crate::encoders::mfa_fs_lambda) exactly,
//! same sign: the encoder already returns the gradient of the log-likelihood,
//! and `S⁻¹ΔΔᵀβᵀ = (PΔ)(PΔ)ᵀΛ`.
//!
//! The training loss is the mean squared hinge plus
//! `λ₁ Σ ‖Ω_k − P_kΛ_k‖²_F + λ₂ Σ ‖P_k − P_kᵀ‖²_F`. Gradients are analytic.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, train_linear, ClassifierConfig, LinearClassifier};
use crate::descriptors::{DescriptorBag, PcaProjection};
use crate::encoders::{normalize_fv, EncodingLayout, FisherEncoding, ModelKind, Variant};
use crate::mixtures::{mfa_derived, MfaModel};
use crate::numerics::log_sum_exp;
use crate::rng::stream_rng;
use crate::{io, Error, Result};

/// Bags per parallel work unit. Fixed so the gradient sum does not depend on
/// the thread count.
const BAG_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfaFsLayerParams {
    pub mu_b: Vec<DVector<f64>>,
    /// `D × R` each.
    pub lambda_b: Vec<DMatrix<f64>>,
    /// `D × D` each, dense.
    pub p: Vec<DMatrix<f64>>,
    /// `D × R` each.
    pub omega: Vec<DMatrix<f64>>,
    pub log_kappa: Vec<f64>,
    pub pca: PcaProjection,
}

impl MfaFsLayerParams {
    pub fn n_components(&self) -> usize {
        self.mu_b.len()
    }

    pub fn dim(&self) -> usize {
        self.pca.output_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.lambda_b.first().map_or(0, |l| l.ncols())
    }

    pub fn input_dim(&self) -> usize {
        self.pca.input_dim()
    }

    pub fn output_len(&self) -> usize {
        self.n_components() * self.dim() * self.latent_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, d, r) = (self.n_components(), self.dim(), self.latent_dim());
        if k == 0 {
            return Err(Error::Empty("layer components"));
        }
        if r == 0 {
            return Err(Error::InvalidArgument(
                "latent dimension must be positive".into(),
            ));
        }
        if self.lambda_b.len() != k
            || self.p.len() != k
            || self.omega.len() != k
            || self.log_kappa.len() != k
        {
            return Err(Error::InvalidArgument(
                "per-component parameter counts differ".into(),
            ));
        }
        if self.pca.mean.len() != self.pca.input_dim() {
            return Err(Error::dim(
                self.pca.input_dim(),
                self.pca.mean.len(),
                "pca mean",
            ));
        }
        for j in 0..k {
            if self.mu_b[j].len() != d {
                return Err(Error::dim(d, self.mu_b[j].len(), "layer mean"));
            }
            if self.lambda_b[j].shape() != (d, r) || self.omega[j].shape() != (d, r) {
                return Err(Error::InvalidArgument(format!(
                    "component {j}: loading blocks must be {d}×{r}"
                )));
            }
            if self.p[j].shape() != (d, d) {
                return Err(Error::InvalidArgument(format!(
                    "component {j}: P must be {d}×{d}"
                )));
            }
        }
        Ok(())
    }

    /// `Σ_k ‖Ω_k − P_kΛ_k‖²_F`
    pub fn omega_deviation_sq(&self) -> f64 {
        (0..self.n_components())
            .map(|j| (&self.omega[j] - &self.p[j] * &self.lambda_b[j]).norm_squared())
            .sum()
    }

    /// `Σ_k ‖P_k − P_kᵀ‖²_F`
    pub fn asymmetry_sq(&self) -> f64 {
        self.p
            .iter()
            .map(|p| (p - p.transpose()).norm_squared())
            .sum()
    }

    /// `‖Ω − PΛ‖_F / ‖Ω‖_F` over all components.
    pub fn omega_deviation_rel(&self) -> f64 {
        let den: f64 = self.omega.iter().map(|o| o.norm_squared()).sum();
        if den == 0.0 {
            return self.omega_deviation_sq().sqrt();
        }
        (self.omega_deviation_sq() / den).sqrt()
    }

    fn zeros_like(&self) -> Self {
        Self {
            mu_b: self.mu_b.iter().map(|v| DVector::zeros(v.len())).collect(),
            lambda_b: self
                .lambda_b
                .iter()
                .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
                .collect(),
            p: self
                .p
                .iter()
                .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
                .collect(),
            omega: self
                .omega
                .iter()
                .map(|m| DMatrix::zeros(m.nrows(), m.ncols()))
                .collect(),
            log_kappa: vec![0.0; self.log_kappa.len()],
            pca: PcaProjection {
                mean: DVector::zeros(self.pca.mean.len()),
                basis: DMatrix::zeros(self.pca.basis.nrows(), self.pca.basis.ncols()),
                variances: DVector::zeros(self.pca.variances.len()),
            },
        }
    }

    /// Every trainable tensor, in a fixed order. PCA variances are not trainable.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (j, v) in self.mu_b.iter().enumerate() {
            out.push((format!("mu_b[{j}]"), v.as_slice()));
        }
        for (j, v) in self.lambda_b.iter().enumerate() {
            out.push((format!("lambda_b[{j}]"), v.as_slice()));
        }
        for (j, v) in self.p.iter().enumerate() {
            out.push((format!("p[{j}]"), v.as_slice()));
        }
        for (j, v) in self.omega.iter().enumerate() {
            out.push((format!("omega[{j}]"), v.as_slice()));
        }
        out.push(("log_kappa".into(), &self.log_kappa));
        out.push(("pca.mean".into(), self.pca.mean.as_slice()));
        out.push(("pca.basis".into(), self.pca.basis.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.mu_b.iter_mut().map(|v| v.as_mut_slice()));
        out.extend(self.lambda_b.iter_mut().map(|v| v.as_mut_slice()));
        out.extend(self.p.iter_mut().map(|v| v.as_mut_slice()));
        out.extend(self.omega.iter_mut().map(|v| v.as_mut_slice()));
        out.push(&mut self.log_kappa);
        out.push(self.pca.mean.as_mut_slice());
        out.push(self.pca.basis.as_mut_slice());
        out
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b.1).for_each(|(x, y)| *x += y);
        }
    }
}

/// Copies an MFA into layer form. `pca` maps raw descriptors into the
/// model's space; pass [`PcaProjection::identity`] when there is none.
pub fn layer_init_from_mfa(m: &MfaModel, pca: PcaProjection) -> Result<MfaFsLayerParams> {
    m.validate()?;
    if pca.output_dim() != m.dim() {
        return Err(Error::dim(m.dim(), pca.output_dim(), "pca output vs model"));
    }
    let derived = mfa_derived(m)?;
    let mut p = Vec::with_capacity(m.n_components());
    let mut omega = Vec::with_capacity(m.n_components());
    let mut log_kappa = Vec::with_capacity(m.n_components());
    for (j, f) in derived.components.iter().enumerate() {
        let inv = f.dense_inverse();
        let sym = (&inv + inv.transpose()) * 0.5;
        if !f.log_det.is_finite() || sym.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!(
                "component {j}: singular covariance"
            )));
        }
        omega.push(&sym * &m.loadings[j]);
        p.push(sym);
        log_kappa.push(m.weights[j].ln() - 0.5 * f.log_det);
    }
    Ok(MfaFsLayerParams {
        mu_b: m.means.clone(),
        lambda_b: m.loadings.clone(),
        p,
        omega,
        log_kappa,
        pca,
    })
}

struct Forward {
    centered: Vec<DVector<f64>>,
    delta: Vec<Vec<DVector<f64>>>,
    a: Vec<Vec<DVector<f64>>>,
    c: Vec<Vec<DVector<f64>>>,
    post: Vec<Vec<f64>>,
    y: DVector<f64>,
}

fn forward(p: &MfaFsLayerParams, bag: &DescriptorBag) -> Result<Forward> {
    if bag.dim() != p.input_dim() {
        return Err(Error::dim(p.input_dim(), bag.dim(), "layer input"));
    }
    let (k, d, r) = (p.n_components(), p.dim(), p.latent_dim());
    let n = bag.len();
    let mut fw = Forward {
        centered: Vec::with_capacity(n),
        delta: Vec::with_capacity(n),
        a: Vec::with_capacity(n),
        c: Vec::with_capacity(n),
        post: Vec::with_capacity(n),
        y: DVector::zeros(k * d * r),
    };
    let mut blocks = vec![DMatrix::<f64>::zeros(d, r); k];
    let mut mass = vec![0.0; k];
    let mut logits = vec![0.0; k];
    for u in &bag.descriptors {
        let cu = u - &p.pca.mean;
        let x = &p.pca.basis * &cu;
        let mut deltas = Vec::with_capacity(k);
        let mut avec = Vec::with_capacity(k);
        let mut cvec = Vec::with_capacity(k);
        for j in 0..k {
            let delta = &x - &p.mu_b[j];
            let a = &p.p[j] * &delta;
            logits[j] = p.log_kappa[j] - 0.5 * delta.dot(&a);
            cvec.push(p.lambda_b[j].tr_mul(&a));
            avec.push(a);
            deltas.push(delta);
        }
        let lse = log_sum_exp(&logits)?;
        let post: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        for j in 0..k {
            if post[j] != 0.0 {
                blocks[j].ger(post[j], &avec[j], &cvec[j], 1.0);
                mass[j] += post[j];
            }
        }
        fw.centered.push(cu);
        fw.delta.push(deltas);
        fw.a.push(avec);
        fw.c.push(cvec);
        fw.post.push(post);
    }
    for j in 0..k {
        let b = &blocks[j] - &p.omega[j] * mass[j];
        for row in 0..d {
            for col in 0..r {
                fw.y[j * d * r + row * r + col] = b[(row, col)];
            }
        }
    }
    Ok(fw)
}

fn layout_of(p: &MfaFsLayerParams) -> EncodingLayout {
    EncodingLayout {
        model: ModelKind::Mfa,
        variant: Variant::MfaLambda,
        k: p.n_components(),
        d: p.dim(),
        r: p.latent_dim(),
    }
}

/// Raw layer output, laid out like an `mfa_lambda` encoding (row-major
/// `D × R` blocks in component order), before normalization.
pub fn layer_forward(p: &MfaFsLayerParams, bag: &DescriptorBag) -> Result<FisherEncoding> {
    p.validate()?;
    Ok(FisherEncoding::new(forward(p, bag)?.y, layout_of(p)))
}

/// Layer output after the power and L2 stages, as fed to the classifier.
pub fn layer_features(
    p: &MfaFsLayerParams,
    bag: &DescriptorBag,
    power: f64,
) -> Result<FisherEncoding> {
    normalize_fv(&layer_forward(p, bag)?, power)
}

/// Per-descriptor component posteriors, one row per descriptor.
pub fn layer_posteriors(p: &MfaFsLayerParams, bag: &DescriptorBag) -> Result<Vec<Vec<f64>>> {
    p.validate()?;
    Ok(forward(p, bag)?.post)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_classifier: f64,
    /// Learning rate for everything below the classifier.
    pub lr_layers: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Exponent of the signed power normalization.
    pub power: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lr_classifier: 1e-3,
            lr_layers: 1e-5,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 10,
            batch_size: 16,
            power: 0.5,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lr_classifier", self.lr_classifier),
            ("lr_layers", self.lr_layers),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in reals {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a nonnegative number, got {v}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.power > 0.0 && self.power <= 1.0) {
            return Err(Error::Config(format!(
                "power must be in (0, 1], got {}",
                self.power
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Mean squared hinge over the batch.
    pub classification: f64,
    /// `Σ‖Ω − PΛ‖²_F`, before the λ₁ factor.
    pub omega_reg: f64,
    /// `Σ‖P − Pᵀ‖²_F`, before the λ₂ factor.
    pub symmetry_reg: f64,
    /// Bags in the batch whose arg-max score hits the label.
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layer: MfaFsLayerParams,
    pub classifier: LinearClassifier,
}

impl Gradients {
    fn zeros(p: &MfaFsLayerParams, clf: &LinearClassifier) -> Self {
        Self {
            layer: p.zeros_like(),
            classifier: LinearClassifier::zeros(clf.n_classes(), clf.dim()),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        self.layer.add_assign(&other.layer);
        self.classifier.weights += &other.classifier.weights;
        self.classifier.bias += &other.classifier.bias;
    }
}

fn power_derivative(y: f64, power: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else if power == 1.0 {
        1.0
    } else {
        power * y.abs().powf(power - 1.0)
    }
}

/// Hinge loss of one bag (unscaled) and, into `g`, its gradient times `scale`.
fn bag_backward(
    p: &MfaFsLayerParams,
    clf: &LinearClassifier,
    bag: &DescriptorBag,
    label: usize,
    power: f64,
    scale: f64,
    g: &mut Gradients,
) -> Result<(f64, bool)> {
    let (k, d, r) = (p.n_components(), p.dim(), p.latent_dim());
    let fw = forward(p, bag)?;
    let u = fw.y.map(|v| v.signum() * v.abs().powf(power));
    let norm = u.norm();
    let e = if norm > 0.0 {
        &u / norm
    } else {
        DVector::zeros(u.len())
    };
    let s = &clf.weights * &e + &clf.bias;
    let mut loss = 0.0;
    let mut ds = DVector::zeros(s.len());
    for c in 0..s.len() {
        let t = if c == label { 1.0 } else { -1.0 };
        let m = (1.0 - t * s[c]).max(0.0);
        loss += m * m;
        ds[c] = -2.0 * t * m * scale;
    }
    let hit = argmax(&s) == label;
    g.classifier.weights.ger(1.0, &ds, &e, 1.0);
    g.classifier.bias += &ds;
    if norm == 0.0 {
        return Ok((loss, hit));
    }
    let ge = clf.weights.tr_mul(&ds);
    let du = (&ge - &e * e.dot(&ge)) / norm;
    let dy = DVector::from_iterator(
        du.len(),
        du.iter()
            .zip(fw.y.iter())
            .map(|(a, y)| a * power_derivative(*y, power)),
    );
    if dy.iter().all(|v| *v == 0.0) {
        return Ok((loss, hit));
    }
    let gblk: Vec<DMatrix<f64>> = (0..k)
        .map(|j| DMatrix::from_fn(d, r, |row, col| dy[j * d * r + row * r + col]))
        .collect();
    let g_dot_omega: Vec<f64> = (0..k).map(|j| gblk[j].dot(&p.omega[j])).collect();
    let gl = &mut g.layer;
    let mut dl = vec![0.0; k];
    let mut dp = vec![0.0; k];
    let mut mass = vec![0.0; k];
    for i in 0..bag.len() {
        let post = &fw.post[i];
        let mut gc = Vec::with_capacity(k);
        for j in 0..k {
            let v = &gblk[j] * &fw.c[i][j];
            dp[j] = fw.a[i][j].dot(&v) - g_dot_omega[j];
            gc.push(v);
            mass[j] += post[j];
        }
        let mean: f64 = (0..k).map(|j| post[j] * dp[j]).sum();
        for j in 0..k {
            dl[j] = post[j] * (dp[j] - mean);
        }
        let mut dx = DVector::zeros(d);
        for j in 0..k {
            let (delta, a) = (&fw.delta[i][j], &fw.a[i][j]);
            // gradient w.r.t. a = PΔ
            let gta = gblk[j].tr_mul(a);
            let mut ga = &p.lambda_b[j] * &gta;
            ga += &gc[j];
            ga *= post[j];
            gl.lambda_b[j].ger(post[j], a, &gta, 1.0);
            gl.log_kappa[j] += dl[j];
            gl.p[j].ger(-0.5 * dl[j], delta, delta, 1.0);
            gl.p[j].ger(1.0, &ga, delta, 1.0);
            let mut ddelta = p.p[j].tr_mul(&ga);
            ddelta.axpy(-0.5 * dl[j], &(&p.p[j] * delta + p.p[j].tr_mul(delta)), 1.0);
            gl.mu_b[j] -= &ddelta;
            dx += ddelta;
        }
        gl.pca.basis.ger(1.0, &dx, &fw.centered[i], 1.0);
        let back = p.pca.basis.tr_mul(&dx);
        gl.pca.mean -= back;
    }
    for j in 0..k {
        gl.omega[j] -= &gblk[j] * mass[j];
    }
    Ok((loss, hit))
}

fn batch_labels(batch: &[DescriptorBag], classes: usize) -> Result<Vec<usize>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, b)| match b.label {
            Some(l) if l < classes => Ok(l),
            Some(l) => Err(Error::InvalidArgument(format!(
                "bag {i}: label {l} out of range for {classes} classes"
            ))),
            None => Err(Error::InvalidArgument(format!("bag {i} has no label"))),
        })
        .collect()
}

fn check_pair(p: &MfaFsLayerParams, clf: &LinearClassifier) -> Result<()> {
    p.validate()?;
    if clf.dim() != p.output_len() {
        return Err(Error::dim(
            p.output_len(),
            clf.dim(),
            "classifier input vs layer output",
        ));
    }
    Ok(())
}

/// Regularized squared-hinge loss over a labeled batch and its gradient with
/// respect to every layer, classifier and PCA parameter.
pub fn loss_and_gradients(
    p: &MfaFsLayerParams,
    clf: &LinearClassifier,
    batch: &[DescriptorBag],
    cfg: &TrainingConfig,
) -> Result<(LossBreakdown, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    check_pair(p, clf)?;
    let labels = batch_labels(batch, clf.n_classes())?;
    let scale = 1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, usize, Gradients)>> = batch
        .par_chunks(BAG_CHUNK)
        .zip(labels.par_chunks(BAG_CHUNK))
        .map(|(bags, labs)| {
            let mut g = Gradients::zeros(p, clf);
            let mut loss = 0.0;
            let mut correct = 0;
            for (b, &l) in bags.iter().zip(labs) {
                let (li, hit) = bag_backward(p, clf, b, l, cfg.power, scale, &mut g)?;
                loss += li;
                correct += hit as usize;
            }
            Ok((loss, correct, g))
        })
        .collect();
    let mut grads = Gradients::zeros(p, clf);
    let mut out = LossBreakdown::default();
    for part in parts {
        let (l, c, g) = part?;
        out.classification += l;
        out.correct += c;
        grads.add_assign(&g);
    }
    out.classification *= scale;
    for j in 0..p.n_components() {
        let resid = &p.omega[j] - &p.p[j] * &p.lambda_b[j];
        let asym = &p.p[j] - p.p[j].transpose();
        out.omega_reg += resid.norm_squared();
        out.symmetry_reg += asym.norm_squared();
        let gl = &mut grads.layer;
        gl.omega[j] += &resid * (2.0 * cfg.lambda1);
        gl.p[j].gemm(-2.0 * cfg.lambda1, &resid, &p.lambda_b[j].transpose(), 1.0);
        gl.lambda_b[j].gemm(-2.0 * cfg.lambda1, &p.p[j].transpose(), &resid, 1.0);
        gl.p[j] += &asym * (4.0 * cfg.lambda2);
    }
    out.total = out.classification + cfg.lambda1 * out.omega_reg + cfg.lambda2 * out.symmetry_reg;
    Ok((out, grads))
}

/// Trains the classifier alone on frozen layer features.
pub fn pretrain_classifier(
    p: &MfaFsLayerParams,
    bags: &[DescriptorBag],
    classes: usize,
    power: f64,
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier> {
    let labels = batch_labels(bags, classes)?;
    let feats: Vec<DVector<f64>> = bags
        .par_iter()
        .map(|b| layer_features(p, b, power).map(|e| e.vector))
        .collect::<Result<_>>()?;
    train_linear(&feats, &labels, classes, cfg)
}

/// Predicted class of one bag.
pub fn predict(
    p: &MfaFsLayerParams,
    clf: &LinearClassifier,
    bag: &DescriptorBag,
    power: f64,
) -> Result<usize> {
    clf.predict(&layer_features(p, bag, power)?.vector)
}

/// Fraction of labeled bags classified correctly.
pub fn accuracy(
    p: &MfaFsLayerParams,
    clf: &LinearClassifier,
    bags: &[DescriptorBag],
    power: f64,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::Empty("bags"));
    }
    let labels = batch_labels(bags, clf.n_classes())?;
    let hits: Vec<bool> = bags
        .par_iter()
        .zip(&labels)
        .map(|(b, &l)| predict(p, clf, b, power).map(|c| c == l))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / bags.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the batch losses seen during the epoch.
    pub loss: f64,
    pub classification: f64,
    /// Fraction of bags classified correctly as they were visited.
    pub running_accuracy: f64,
    /// `‖Ω − PΛ‖_F` and `‖P − Pᵀ‖_F` at the end of the epoch.
    pub omega_deviation: f64,
    pub asymmetry: f64,
    pub omega_deviation_rel: f64,
}

/// Everything needed to resume training: parameters, momentum buffers and
/// the epoch counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneState {
    pub layer: MfaFsLayerParams,
    pub classifier: LinearClassifier,
    pub momentum_layer: Vec<f64>,
    pub momentum_classifier: Vec<f64>,
    pub epochs_done: usize,
    pub history: Vec<EpochStats>,
}

pub const CHECKPOINT_KIND: &str = "mfafsnet_checkpoint";

impl FinetuneState {
    pub fn new(layer: MfaFsLayerParams, classifier: LinearClassifier) -> Self {
        let nl = layer.tensors().iter().map(|t| t.1.len()).sum();
        let nc = classifier.weights.len() + classifier.bias.len();
        Self {
            layer,
            classifier,
            momentum_layer: vec![0.0; nl],
            momentum_classifier: vec![0.0; nc],
            epochs_done: 0,
            history: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save_model(path, CHECKPOINT_KIND, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s: Self = io::load_model(path, CHECKPOINT_KIND)?;
        s.layer.validate()?;
        let nl: usize = s.layer.tensors().iter().map(|t| t.1.len()).sum();
        if s.momentum_layer.len() != nl
            || s.momentum_classifier.len() != s.classifier.weights.len() + s.classifier.bias.len()
        {
            return Err(Error::Format(
                "checkpoint momentum buffers do not match the parameters".into(),
            ));
        }
        Ok(s)
    }
}

/// `v ← μv + lr(g + wd·θ)`, `θ ← θ − v`.
fn sgd_step(theta: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for ((t, g), v) in theta.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = momentum * *v + lr * (g + wd * *t);
        *t -= *v;
    }
}

fn apply_update(state: &mut FinetuneState, g: &Gradients, cfg: &TrainingConfig) {
    let mut off = 0;
    let grads = g.layer.tensors();
    for (theta, (_, grad)) in state.layer.tensors_mut().into_iter().zip(grads) {
        let n = theta.len();
        sgd_step(
            theta,
            grad,
            &mut state.momentum_layer[off..off + n],
            cfg.lr_layers,
            cfg.momentum,
            cfg.weight_decay,
        );
        off += n;
    }
    let nw = state.classifier.weights.len();
    let (vw, vb) = state.momentum_classifier.split_at_mut(nw);
    sgd_step(
        state.classifier.weights.as_mut_slice(),
        g.classifier.weights.as_slice(),
        vw,
        cfg.lr_classifier,
        cfg.momentum,
        cfg.weight_decay,
    );
    // no decay on the bias
    sgd_step(
        state.classifier.bias.as_mut_slice(),
        g.classifier.bias.as_slice(),
        vb,
        cfg.lr_classifier,
        cfg.momentum,
        0.0,
    );
}

fn params_finite(state: &FinetuneState) -> bool {
    let c = &state.classifier;
    state
        .layer
        .tensors()
        .iter()
        .all(|t| t.1.iter().all(|v| v.is_finite()))
        && c.weights.iter().chain(c.bias.iter()).all(|v| v.is_finite())
}

fn check_coverage(bags: &[DescriptorBag], classes: usize) -> Result<()> {
    let labels = batch_labels(bags, classes)?;
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has no training bags"
        )));
    }
    Ok(())
}

/// Joint SGD fine-tuning from scratch. See [`resume`].
pub fn finetune(
    layer: MfaFsLayerParams,
    classifier: LinearClassifier,
    bags: &[DescriptorBag],
    cfg: &TrainingConfig,
) -> Result<FinetuneState> {
    resume(FinetuneState::new(layer, classifier), bags, cfg)
}

/// Runs epochs `state.epochs_done .. cfg.epochs`. Epoch `e` visits the bags
/// in an order drawn from stream `e` of the seed, so an interrupted and
/// resumed run matches an uninterrupted one.
pub fn resume(
    mut state: FinetuneState,
    bags: &[DescriptorBag],
    cfg: &TrainingConfig,
) -> Result<FinetuneState> {
    cfg.validate()?;
    check_pair(&state.layer, &state.classifier)?;
    if bags.is_empty() {
        return Err(Error::Empty("training bags"));
    }
    check_coverage(bags, state.classifier.n_classes())?;
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut batch: Vec<DescriptorBag> = Vec::with_capacity(cfg.batch_size);
    for epoch in state.epochs_done..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64));
        let (mut loss, mut cls, mut correct, mut batches) = (0.0, 0.0, 0usize, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            batch.clear();
            batch.extend(idx.iter().map(|&i| bags[i].clone()));
            let (lb, g) = loss_and_gradients(&state.layer, &state.classifier, &batch, cfg)
                .map_err(|e| match e {
                    Error::Domain { .. } | Error::Numerical(_) if epoch + bi > 0 => {
                        Error::Diverged(format!("epoch {epoch}, batch {bi}: {e}"))
                    }
                    e => e,
                })?;
            if !lb.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {bi}: loss {} (hinge {}, Ω reg {}, symmetry reg {})",
                    lb.total, lb.classification, lb.omega_reg, lb.symmetry_reg
                )));
            }
            apply_update(&mut state, &g, cfg);
            if !params_finite(&state) {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}, batch {bi}: parameters became non-finite"
                )));
            }
            loss += lb.total;
            cls += lb.classification;
            correct += lb.correct;
            batches += 1;
        }
        let stats = EpochStats {
            epoch,
            loss: loss / batches as f64,
            classification: cls / batches as f64,
            running_accuracy: correct as f64 / bags.len() as f64,
            omega_deviation: state.layer.omega_deviation_sq().sqrt(),
            asymmetry: state.layer.asymmetry_sq().sqrt(),
            omega_deviation_rel: state.layer.omega_deviation_rel(),
        };
        log::info!(
            "epoch {}: loss {:.6} hinge {:.6} acc {:.4} |Ω−PΛ| {:.3e} (rel {:.3e}) |P−Pᵀ| {:.3e}",
            epoch,
            stats.loss,
            stats.classification,
            stats.running_accuracy,
            stats.omega_deviation,
            stats.omega_deviation_rel,
            stats.asymmetry
        );
        state.history.push(stats);
        state.epochs_done = epoch + 1;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptors::EmbeddingTag;
    use crate::encoders::mfa_fs_lambda;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut impl Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn random_mfa(rng: &mut impl Rng, k: usize, d: usize, r: usize) -> MfaModel {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let tot: f64 = raw.iter().sum();
        MfaModel::new(
            raw.iter().map(|w| w / tot).collect(),
            (0..k)
                .map(|_| DVector::from_fn(d, |_, _| 2.0 * randn(rng)))
                .collect(),
            (0..k)
                .map(|_| DMatrix::from_fn(d, r, |_, _| randn(rng)))
                .collect(),
            (0..k)
                .map(|_| DVector::from_fn(d, |_, _| rng.random_range(0.3..1.5)))
                .collect(),
        )
        .unwrap()
    }

    fn random_bag(rng: &mut impl Rng, n: usize, d: usize, label: Option<usize>) -> DescriptorBag {
        DescriptorBag::new(
            (0..n)
                .map(|_| DVector::from_fn(d, |_, _| 2.0 * randn(rng)))
                .collect(),
            EmbeddingTag::Raw,
            label,
        )
        .unwrap()
    }

    fn random_layer(
        rng: &mut impl Rng,
        k: usize,
        d_in: usize,
        d: usize,
        r: usize,
    ) -> MfaFsLayerParams {
        MfaFsLayerParams {
            mu_b: (0..k)
                .map(|_| DVector::from_fn(d, |_, _| randn(rng)))
                .collect(),
            lambda_b: (0..k)
                .map(|_| DMatrix::from_fn(d, r, |_, _| randn(rng)))
                .collect(),
            p: (0..k)
                .map(|_| {
                    DMatrix::identity(d, d) * 0.5 + DMatrix::from_fn(d, d, |_, _| 0.1 * randn(rng))
                })
                .collect(),
            omega: (0..k)
                .map(|_| DMatrix::from_fn(d, r, |_, _| randn(rng)))
                .collect(),
            log_kappa: (0..k).map(|_| randn(rng)).collect(),
            pca: PcaProjection {
                mean: DVector::from_fn(d_in, |_, _| 0.3 * randn(rng)),
                basis: DMatrix::from_fn(d, d_in, |_, _| 0.5 * randn(rng)),
                variances: DVector::from_element(d, 1.0),
            },
        }
    }

    #[test]
    fn init_from_trivial_mfa() {
        let m = MfaModel::new(
            vec![0.25, 0.75],
            vec![DVector::zeros(3), DVector::from_element(3, 1.0)],
            vec![DMatrix::zeros(3, 2); 2],
            vec![DVector::from_element(3, 1.0); 2],
        )
        .unwrap();
        let l = layer_init_from_mfa(&m, PcaProjection::identity(3)).unwrap();
        for j in 0..2 {
            assert!((&l.p[j] - DMatrix::identity(3, 3)).amax() < 1e-15);
            assert_eq!(l.omega[j].amax(), 0.0);
            assert!((l.log_kappa[j] - m.weights[j].ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn init_is_mfa_consistent() {
        let mut rng = seeded(1);
        for _ in 0..10 {
            let m = random_mfa(&mut rng, 3, 5, 2);
            let l = layer_init_from_mfa(&m, PcaProjection::identity(5)).unwrap();
            assert_eq!(l.omega_deviation_sq(), 0.0);
            assert_eq!(l.asymmetry_sq(), 0.0);
            let derived = mfa_derived(&m).unwrap();
            for j in 0..3 {
                let s = derived.components[j].dense_covariance();
                assert!((&l.p[j] * &s - DMatrix::identity(5, 5)).amax() < 1e-10);
            }
        }
        let m = random_mfa(&mut rng, 2, 4, 1);
        assert!(layer_init_from_mfa(&m, PcaProjection::identity(3)).is_err());
    }

    #[test]
    fn tied_layer_matches_encoder() {
        let mut rng = seeded(2);
        for t in 0..100 {
            let (k, d) = (1 + t % 3, 2 + t % 5);
            let r = 1 + t % (d - 1);
            let m = random_mfa(&mut rng, k, d, r);
            let bag = random_bag(&mut rng, 1 + t % 7, d, None);
            let l = layer_init_from_mfa(&m, PcaProjection::identity(d)).unwrap();
            let y = layer_forward(&l, &bag).unwrap();
            let enc = mfa_fs_lambda(&m, &bag).unwrap();
            assert_eq!(y.layout, enc.layout);
            let scale = enc.vector.amax().max(1.0);
            assert!(
                (&y.vector - &enc.vector).amax() <= 1e-6 * scale,
                "trial {t}"
            );
        }
    }

    #[test]
    fn forward_matches_direct_sum() {
        let mut rng = seeded(3);
        let (k, d_in, d, r) = (2, 4, 3, 2);
        let l = random_layer(&mut rng, k, d_in, d, r);
        let bag = random_bag(&mut rng, 5, d_in, None);
        let y = layer_forward(&l, &bag).unwrap();
        let mut expect = vec![0.0; k * d * r];
        for u in &bag.descriptors {
            let mut x = vec![0.0; d];
            for a in 0..d {
                for b in 0..d_in {
                    x[a] += l.pca.basis[(a, b)] * (u[b] - l.pca.mean[b]);
                }
            }
            let mut w = vec![0.0; k];
            for j in 0..k {
                let dl: Vec<f64> = (0..d).map(|a| x[a] - l.mu_b[j][a]).collect();
                let mut q = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        q += dl[a] * l.p[j][(a, b)] * dl[b];
                    }
                }
                w[j] = l.log_kappa[j].exp() * (-0.5 * q).exp();
            }
            let z: f64 = w.iter().sum();
            for j in 0..k {
                let dl: Vec<f64> = (0..d).map(|a| x[a] - l.mu_b[j][a]).collect();
                let pd: Vec<f64> = (0..d)
                    .map(|a| (0..d).map(|b| l.p[j][(a, b)] * dl[b]).sum())
                    .collect();
                for a in 0..d {
                    for c in 0..r {
                        let mut v = 0.0;
                        for b in 0..d {
                            v += pd[a] * pd[b] * l.lambda_b[j][(b, c)];
                        }
                        expect[j * d * r + a * r + c] += w[j] / z * (v - l.omega[j][(a, c)]);
                    }
                }
            }
        }
        for (a, b) in y.vector.iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_component_posterior_is_one() {
        let mut rng = seeded(4);
        let mut l = random_layer(&mut rng, 1, 3, 3, 1);
        l.log_kappa[0] = -40.0;
        let bag = random_bag(&mut rng, 6, 3, None);
        for row in layer_posteriors(&l, &bag).unwrap() {
            assert_eq!(row, vec![1.0]);
        }
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let mut rng = seeded(5);
        for _ in 0..20 {
            let k = rng.random_range(2..5);
            let mut l = random_layer(&mut rng, k, 4, 4, 2);
            for p in &mut l.p {
                let a = DMatrix::from_fn(4, 4, |_, _| randn(&mut rng));
                *p = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
            }
            for lk in &mut l.log_kappa {
                *lk = rng.random_range(-20.0..20.0);
            }
            let bag = random_bag(&mut rng, 10, 4, None);
            for row in layer_posteriors(&l, &bag).unwrap() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    fn total_loss(
        l: &MfaFsLayerParams,
        c: &LinearClassifier,
        batch: &[DescriptorBag],
        cfg: &TrainingConfig,
    ) -> f64 {
        loss_and_gradients(l, c, batch, cfg).unwrap().0.total
    }

    fn check_gradients(lambda: f64, seed: u64) {
        let mut rng = seeded(seed);
        let (k, d_in, d, r, classes) = (2, 5, 4, 2, 3);
        let l = random_layer(&mut rng, k, d_in, d, r);
        let clf = LinearClassifier {
            weights: DMatrix::from_fn(classes, k * d * r, |_, _| randn(&mut rng)),
            bias: DVector::from_fn(classes, |_, _| 0.3 * randn(&mut rng)),
        };
        let batch: Vec<DescriptorBag> = (0..3)
            .map(|i| random_bag(&mut rng, 4, d_in, Some(i % classes)))
            .collect();
        let cfg = TrainingConfig {
            lambda1: lambda,
            lambda2: lambda,
            ..Default::default()
        };
        let (_, g) = loss_and_gradients(&l, &clf, &batch, &cfg).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let names: Vec<String> = l.tensors().into_iter().map(|t| t.0).collect();
        for (t, name) in names.iter().enumerate() {
            let analytic = g.layer.tensors()[t].1.to_vec();
            for (idx, &an) in analytic.iter().enumerate() {
                let mut plus = l.clone();
                plus.tensors_mut()[t][idx] += h;
                let mut minus = l.clone();
                minus.tensors_mut()[t][idx] -= h;
                let fd = (total_loss(&plus, &clf, &batch, &cfg)
                    - total_loss(&minus, &clf, &batch, &cfg))
                    / (2.0 * h);
                let err = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-2);
                assert!(err <= 1e-4, "{name}[{idx}]: analytic {an} fd {fd}");
                worst = worst.max(err);
            }
        }
        for idx in 0..clf.weights.len() {
            let mut plus = clf.clone();
            plus.weights.as_mut_slice()[idx] += h;
            let mut minus = clf.clone();
            minus.weights.as_mut_slice()[idx] -= h;
            let fd = (total_loss(&l, &plus, &batch, &cfg) - total_loss(&l, &minus, &batch, &cfg))
                / (2.0 * h);
            let an = g.classifier.weights.as_slice()[idx];
            assert!(
                (fd - an).abs() / an.abs().max(fd.abs()).max(1e-2) <= 1e-4,
                "W[{idx}]"
            );
        }
        for c in 0..classes {
            let mut plus = clf.clone();
            plus.bias[c] += h;
            let mut minus = clf.clone();
            minus.bias[c] -= h;
            let fd = (total_loss(&l, &plus, &batch, &cfg) - total_loss(&l, &minus, &batch, &cfg))
                / (2.0 * h);
            assert!(
                (fd - g.classifier.bias[c]).abs() <= 1e-4 * fd.abs().max(1e-2),
                "b[{c}]"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_unregularized() {
        check_gradients(0.0, 10);
    }

    #[test]
    fn gradients_match_finite_differences_regularized() {
        check_gradients(1.0, 11);
    }

    #[test]
    fn regularizer_is_frobenius_sum() {
        let mut rng = seeded(6);
        let m = random_mfa(&mut rng, 2, 3, 2);
        let mut l = layer_init_from_mfa(&m, PcaProjection::identity(3)).unwrap();
        let eta: Vec<DMatrix<f64>> = (0..2)
            .map(|_| DMatrix::from_fn(3, 2, |_, _| randn(&mut rng)))
            .collect();
        for j in 0..2 {
            l.omega[j] += &eta[j];
        }
        let mut direct = 0.0;
        for e in &eta {
            for v in e.iter() {
                direct += v * v;
            }
        }
        assert!((l.omega_deviation_sq() - direct).abs() <= 1e-12 * direct);
        l.p[0][(0, 1)] += 0.5;
        let mut asym = 0.0;
        for p in &l.p {
            for a in 0..3 {
                for b in 0..3 {
                    asym += (p[(a, b)] - p[(b, a)]).powi(2);
                }
            }
        }
        assert!((l.asymmetry_sq() - asym).abs() <= 1e-12);
    }

    #[test]
    fn confident_consistent_net_has_zero_loss() {
        let mut rng = seeded(7);
        let m = random_mfa(&mut rng, 2, 3, 1);
        let l = layer_init_from_mfa(&m, PcaProjection::identity(3)).unwrap();
        let bags: Vec<DescriptorBag> = (0..2)
            .map(|i| random_bag(&mut rng, 5, 3, Some(i)))
            .collect();
        let feats: Vec<DVector<f64>> = bags
            .iter()
            .map(|b| layer_features(&l, b, 0.5).unwrap().vector)
            .collect();
        // scores +2 for the true class, −2 otherwise
        let diff = &feats[0] - &feats[1];
        let w0 = &diff * (4.0 / diff.norm_squared());
        let b0 = 2.0 - w0.dot(&feats[0]);
        let clf = LinearClassifier {
            weights: DMatrix::from_rows(&[w0.transpose(), -w0.transpose()]),
            bias: DVector::from_vec(vec![b0, -b0]),
        };
        let (lb, g) = loss_and_gradients(&l, &clf, &bags, &TrainingConfig::default()).unwrap();
        assert_eq!(lb.classification, 0.0);
        assert_eq!(lb.omega_reg, 0.0);
        assert_eq!(lb.symmetry_reg, 0.0);
        assert_eq!(lb.correct, 2);
        assert_eq!(g.classifier.weights.amax(), 0.0);
    }

    fn separable_set(rng: &mut impl Rng, per_class: usize) -> (MfaModel, Vec<DescriptorBag>) {
        let m = MfaModel::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_vec(vec![-2.0, 0.0, 0.0]),
                DVector::from_vec(vec![2.0, 0.0, 0.0]),
            ],
            vec![
                DMatrix::from_vec(3, 1, vec![0.0, 1.0, 0.0]),
                DMatrix::from_vec(3, 1, vec![0.0, 0.0, 1.0]),
            ],
            vec![DVector::from_element(3, 0.5); 2],
        )
        .unwrap();
        let bags = (0..2 * per_class)
            .map(|i| {
                let c = i % 2;
                let dir = if c == 0 { 1 } else { 2 };
                let rows = (0..8)
                    .map(|_| {
                        let mut x = DVector::from_fn(3, |_, _| 0.5 * randn(rng));
                        x[0] += if rng.random_bool(0.5) { 2.0 } else { -2.0 };
                        x[dir] *= 4.0;
                        x
                    })
                    .collect();
                DescriptorBag::new(rows, EmbeddingTag::Raw, Some(c)).unwrap()
            })
            .collect();
        (m, bags)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut rng = seeded(8);
        let (m, bags) = separable_set(&mut rng, 10);
        let l = layer_init_from_mfa(&m, PcaProjection::identity(3)).unwrap();
        let clf = LinearClassifier {
            weights: DMatrix::from_fn(2, l.output_len(), |_, _| randn(&mut rng)),
            bias: DVector::zeros(2),
        };
        let cfg = TrainingConfig {
            lr_classifier: 0.0,
            lr_layers: 0.0,
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = finetune(l.clone(), clf.clone(), &bags, &cfg).unwrap();
        assert_eq!(out.layer, l);
        assert_eq!(out.classifier, clf);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn finetune_keeps_separable_set_and_tied_parameters() {
        let mut rng = seeded(9);
        let (m, bags) = separable_set(&mut rng, 20);
        let l = layer_init_from_mfa(&m, PcaProjection::identity(3)).unwrap();
        let clf = pretrain_classifier(&l, &bags, 2, 0.5, &ClassifierConfig::default()).unwrap();
        let cfg = TrainingConfig {
            batch_size: 8,
            ..Default::default()
        };
        let out = finetune(l, clf, &bags, &cfg).unwrap();
        assert_eq!(out.epochs_done, 10);
        assert!(out.layer.omega_deviation_rel() <= 0.05);
        assert!(accuracy(&out.layer, &out.classifier, &bags, 0.5).unwrap() >= 0.95);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let mut rng = seeded(12);
        let (m, bags) = separable_set(&mut rng, 6);
        let l = layer_init_from_mfa(&m, PcaProjection::identity(3)).unwrap();
        let clf = LinearClassifier::zeros(2, l.output_len());
        let cfg = TrainingConfig {
            epochs: 3,
            batch_size: 5,
            lr_layers: 1e-3,
            ..Default::default()
        };
        let full = finetune(l.clone(), clf.clone(), &bags, &cfg).unwrap();
        let half = finetune(
            l,
            clf,
            &bags,
            &TrainingConfig {
                epochs: 1,
                ..cfg.clone()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        half.save(&path).unwrap();
        let back = resume(FinetuneState::load(&path).unwrap(), &bags, &cfg).unwrap();
        assert_eq!(back, full);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = seeded(13);
        let (m, bags) = separable_set(&mut rng, 4);
        let l = layer_init_from_mfa(&m, PcaProjection::identity(3)).unwrap();
        let clf = LinearClassifier::zeros(2, l.output_len());
        let cfg = TrainingConfig {
            lr_classifier: 1e200,
            lr_layers: 1e200,
            epochs: 5,
            ..Default::default()
        };
        let r = finetune(l, clf, &bags, &cfg);
        assert!(matches!(r, Err(Error::Diverged(_))), "{r:?}");
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut rng = seeded(14);
        let l = random_layer(&mut rng, 2, 3, 3, 1);
        let clf = LinearClassifier::zeros(2, l.output_len());
        let cfg = TrainingConfig::default();
        assert!(matches!(
            loss_and_gradients(&l, &clf, &[], &cfg),
            Err(Error::Empty(_))
        ));
        let unlabeled = random_bag(&mut rng, 2, 3, None);
        assert!(loss_and_gradients(&l, &clf, &[unlabeled], &cfg).is_err());
        let out_of_range = random_bag(&mut rng, 2, 3, Some(5));
        assert!(loss_and_gradients(&l, &clf, &[out_of_range], &cfg).is_err());
        let wrong_dim = random_bag(&mut rng, 2, 4, None);
        assert!(layer_forward(&l, &wrong_dim).is_err());
        let one_class = vec![random_bag(&mut rng, 2, 3, Some(0))];
        assert!(finetune(l, clf, &one_class, &cfg).is_err());
    }
}
