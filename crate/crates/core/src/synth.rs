//! Synthetic bags of semantics and samplers for the mixture models.
//!
//! The simplex generator follows the two-object toy world: a patch is a 2-D
//! point `x`, two object classes have class-conditionals `∝ exp(−d(x, μ_y))`
//! with means `(±m, 0)`, and the patch's semantic descriptor is the object
//! posterior pair `(π, 1 − π)`, `π = sigmoid(d(x, μ₂) − d(x, μ₁))`.
//!
//! Scene classes differ only in how confidently their patches are
//! recognized. Every scene produces patches whose posteriors are saturated
//! (`|s| ≥ 10`), and the mean of the small probability is matched across
//! scenes, so the classes differ in `log π` while being nearly identical in
//! raw probability space.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptors::{DescriptorBag, EmbeddingTag};
use crate::mixtures::MfaModel;
use crate::numerics::sigmoid;
use crate::rng::stream_rng;
use crate::{Error, Result};

/// Object means sit at `(±OBJECT_OFFSET, 0)`.
pub const OBJECT_OFFSET: f64 = 12.0;

/// Score bands (`|s|`) used by the scene profiles.
const BAND_LOW: f64 = 15.0;
const BAND_HIGH: f64 = 22.0;
const OUTLIER: f64 = 11.0;
const HALF_WIDTH: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    /// `d(x, μ) = ½‖x − μ‖²`
    GaussianL2,
    /// `d(x, μ) = ‖x − μ‖₁`
    LaplacianL1,
}

impl std::str::FromStr for Geometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_l2" => Ok(Geometry::GaussianL2),
            "laplacian_l1" => Ok(Geometry::LaplacianL1),
            other => Err(Error::InvalidArgument(format!(
                "unknown geometry `{other}`"
            ))),
        }
    }
}

fn distance(g: Geometry, x: [f64; 2], mu: [f64; 2]) -> f64 {
    let (a, b) = (x[0] - mu[0], x[1] - mu[1]);
    match g {
        Geometry::GaussianL2 => 0.5 * (a * a + b * b),
        Geometry::LaplacianL1 => a.abs() + b.abs(),
    }
}

/// Score difference `s = d(x, μ₂) − d(x, μ₁)` and the posterior pair
/// `(sigmoid(s), sigmoid(−s))` for object means `μ₁ = (m, 0)`, `μ₂ = (−m, 0)`.
pub fn semantic_pair(g: Geometry, x: [f64; 2], m: f64) -> (f64, [f64; 2]) {
    let s = distance(g, x, [-m, 0.0]) - distance(g, x, [m, 0.0]);
    (s, [sigmoid(s), sigmoid(-s)])
}

/// First coordinate of a point with score `s` (second coordinate free).
fn abscissa_for_score(g: Geometry, s: f64, m: f64) -> f64 {
    match g {
        Geometry::GaussianL2 => s / (2.0 * m),
        Geometry::LaplacianL1 => s / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub classes: usize,
    pub descriptors_per_bag: usize,
    pub geometry: Geometry,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 500,
            classes: 2,
            descriptors_per_bag: 50,
            geometry: Geometry::GaussianL2,
            seed: 0,
        }
    }
}

/// Train and test splits as probability pairs, with the matching logits
/// `(s, 0)` in parallel bags.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Vec<DescriptorBag>,
    pub test: Vec<DescriptorBag>,
    pub train_logits: Vec<DescriptorBag>,
    pub test_logits: Vec<DescriptorBag>,
}

/// Center of the main score band and the probability of an outlier patch for
/// scene `c`, chosen so that `E[sigmoid(−|s|)]` is the same for every scene.
fn scene_profile(c: usize, classes: usize) -> (f64, f64) {
    let center = BAND_LOW + (BAND_HIGH - BAND_LOW) * c as f64 / (classes - 1) as f64;
    let band_mean = |a: f64| (-a).exp() * HALF_WIDTH.sinh() / HALF_WIDTH;
    let target = band_mean(BAND_LOW);
    let here = band_mean(center);
    let p = (target - here) / (band_mean(OUTLIER) - here);
    (center, p.max(0.0))
}

fn gen_bag(cfg: &SynthConfig, label: usize, stream: u64) -> (DescriptorBag, DescriptorBag) {
    let mut rng = stream_rng(cfg.seed, stream);
    let (center, p_out) = scene_profile(label, cfg.classes);
    let mut probs = Vec::with_capacity(cfg.descriptors_per_bag);
    let mut logits = Vec::with_capacity(cfg.descriptors_per_bag);
    for _ in 0..cfg.descriptors_per_bag {
        let c = if rng.random::<f64>() < p_out {
            OUTLIER
        } else {
            center
        };
        let mag = c + rng.random_range(-HALF_WIDTH..HALF_WIDTH);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let x = [
            abscissa_for_score(cfg.geometry, sign * mag, OBJECT_OFFSET),
            rng.sample::<f64, _>(StandardNormal),
        ];
        let (s, pi) = semantic_pair(cfg.geometry, x, OBJECT_OFFSET);
        // Stored values are exactly representable in f32 so files round-trip.
        probs.push(DVector::from_column_slice(&[
            pi[0] as f32 as f64,
            pi[1] as f32 as f64,
        ]));
        logits.push(DVector::from_column_slice(&[s as f32 as f64, 0.0]));
    }
    (
        DescriptorBag::new(probs, EmbeddingTag::Raw, Some(label)).expect("non-empty bag"),
        DescriptorBag::new(logits, EmbeddingTag::Nu2, Some(label)).expect("non-empty bag"),
    )
}

/// Generates `n_per_class` training and `n_per_class` test bags per scene.
///
/// Each bag draws from its own random stream, so output does not depend on
/// the thread count.
pub fn gen_synth_simplex(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.classes < 2 {
        return Err(Error::InvalidArgument(
            "synthetic data needs at least two classes".into(),
        ));
    }
    if cfg.n_per_class == 0 || cfg.descriptors_per_bag == 0 {
        return Err(Error::InvalidArgument(
            "bag and descriptor counts must be positive".into(),
        ));
    }
    let per_split = cfg.n_per_class * cfg.classes;
    let all: Vec<(DescriptorBag, DescriptorBag)> = (0..2 * per_split)
        .into_par_iter()
        .map(|i| gen_bag(cfg, (i % per_split) % cfg.classes, i as u64))
        .collect();
    let (probs, logits): (Vec<_>, Vec<_>) = all.into_iter().unzip();
    let mut probs = probs.into_iter();
    let mut logits = logits.into_iter();
    Ok(SynthData {
        train: probs.by_ref().take(per_split).collect(),
        test: probs.collect(),
        train_logits: logits.by_ref().take(per_split).collect(),
        test_logits: logits.collect(),
    })
}

/// One draw from `Dir(α)` via normalized Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let g = DVector::from_iterator(
        alpha.len(),
        alpha
            .iter()
            .map(|a| Gamma::new(*a, 1.0).expect("positive shape").sample(rng)),
    );
    let s = g.sum();
    g / s
}

/// One draw `μ_k + Λ_k z + ψ^{1/2} ε` from component `k` of an MFA.
pub fn sample_mfa<R: Rng + ?Sized>(m: &MfaModel, k: usize, rng: &mut R) -> DVector<f64> {
    let r = m.latent_dim();
    let d = m.dim();
    let z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let psi = m.noise_of(k);
    let eps = DVector::from_fn(d, |i, _| {
        psi[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
    });
    &m.means[k] + &m.loadings[k] * z + eps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_ambiguous() {
        for g in [Geometry::GaussianL2, Geometry::LaplacianL1] {
            let (s, pi) = semantic_pair(g, [0.0, 0.0], 3.0);
            assert_eq!(s, 0.0);
            assert_eq!(pi, [0.5, 0.5]);
        }
    }

    #[test]
    fn geometries_agree_on_the_boundary() {
        let mut worst: f64 = 0.0;
        for i in 0..101 {
            let y = -50.0 + i as f64;
            let (_, a) = semantic_pair(Geometry::GaussianL2, [0.0, y], 2.0);
            let (_, b) = semantic_pair(Geometry::LaplacianL1, [0.0, y], 2.0);
            worst = worst.max((a[0] - b[0]).abs());
        }
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn scenes_share_mean_probability() {
        for c in 0..4 {
            let (center, p) = scene_profile(c, 4);
            assert!((BAND_LOW..=BAND_HIGH).contains(&center));
            assert!((0.0..0.05).contains(&p));
        }
        assert_eq!(scene_profile(0, 2).1, 0.0);
    }

    #[test]
    fn bags_are_valid_and_deterministic() {
        let cfg = SynthConfig {
            n_per_class: 3,
            descriptors_per_bag: 7,
            ..SynthConfig::default()
        };
        let a = gen_synth_simplex(&cfg).unwrap();
        let b = gen_synth_simplex(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test_logits, b.test_logits);
        assert_eq!(a.train.len(), 6);
        for (bag, lg) in a.train.iter().zip(&a.train_logits) {
            assert_eq!(bag.label, lg.label);
            for (p, l) in bag.descriptors.iter().zip(&lg.descriptors) {
                assert!((p.sum() - 1.0).abs() < 1e-6);
                assert!((p[0] - sigmoid(l[0])).abs() < 1e-7);
                assert!(p.min() > 1e-10);
            }
        }
        assert!(gen_synth_simplex(&SynthConfig { classes: 1, ..cfg }).is_err());
    }
}
