//! Bag-of-semantics data model, natural-parameter embeddings and PCA.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::numerics::softmax;
use crate::{Error, Result};

/// Default probability floor applied before taking logs.
pub const DEFAULT_EPSILON: f64 = 1e-10;

const SIMPLEX_TOL: f64 = 1e-6;

/// How a descriptor vector was obtained from a semantic multinomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingTag {
    /// `log π`
    Nu1,
    /// Pre-softmax logits, `log π + C` for an unknown per-descriptor `C`.
    Nu2,
    /// `log(π / π_S)`, keeping the trailing zero.
    Nu3,
    Sqrt,
    VonMises,
    /// Probabilities as-is, or any descriptor that was never embedded.
    Raw,
}

impl EmbeddingTag {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingTag::Nu1 => "nu1",
            EmbeddingTag::Nu2 => "nu2",
            EmbeddingTag::Nu3 => "nu3",
            EmbeddingTag::Sqrt => "sqrt",
            EmbeddingTag::VonMises => "von_mises",
            EmbeddingTag::Raw => "raw",
        }
    }
}

impl std::str::FromStr for EmbeddingTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "nu1" => EmbeddingTag::Nu1,
            "nu2" => EmbeddingTag::Nu2,
            "nu3" => EmbeddingTag::Nu3,
            "sqrt" => EmbeddingTag::Sqrt,
            "von_mises" => EmbeddingTag::VonMises,
            "raw" => EmbeddingTag::Raw,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown embedding `{other}`"
                )))
            }
        })
    }
}

/// A semantic multinomial: a point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticDescriptor(DVector<f64>);

impl SemanticDescriptor {
    pub fn new(probs: DVector<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("semantic descriptor"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDescriptor(
                "probabilities must be finite and nonnegative".into(),
            ));
        }
        let sum = probs.sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidDescriptor(format!(
                "probabilities sum to {sum}, not 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn from_slice(probs: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(probs))
    }

    pub fn probs(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// An embedded descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalDescriptor {
    pub values: DVector<f64>,
    pub tag: EmbeddingTag,
}

/// Maps a semantic multinomial into one of the embedding spaces.
///
/// `Nu2` is rejected: logits cannot be recovered from probabilities, use
/// [`ingest_logits`] instead. `Raw` returns the probabilities unchanged.
pub fn embed(
    pi: &SemanticDescriptor,
    tag: EmbeddingTag,
    epsilon: f64,
) -> Result<NaturalDescriptor> {
    let values = embed_values(pi.probs(), tag, epsilon)?;
    Ok(NaturalDescriptor { values, tag })
}

pub(crate) fn embed_values(
    p: &DVector<f64>,
    tag: EmbeddingTag,
    epsilon: f64,
) -> Result<DVector<f64>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let floored_log = |x: f64| x.max(epsilon).ln();
    Ok(match tag {
        EmbeddingTag::Nu1 => p.map(floored_log),
        EmbeddingTag::Nu3 => {
            let last = floored_log(p[p.len() - 1]);
            let mut v = p.map(|x| floored_log(x) - last);
            let n = v.len();
            v[n - 1] = 0.0;
            v
        }
        EmbeddingTag::Sqrt => p.map(f64::sqrt),
        EmbeddingTag::VonMises => {
            let log_eps = epsilon.ln();
            let v = p.map(|x| (x + epsilon).ln() - log_eps);
            let norm = v.norm();
            if norm > 0.0 {
                v / norm
            } else {
                v
            }
        }
        EmbeddingTag::Raw => p.clone(),
        EmbeddingTag::Nu2 => {
            return Err(Error::InvalidArgument(
                "nu2 needs pre-softmax logits; probabilities do not determine the gauge constant"
                    .into(),
            ))
        }
    })
}

/// Accepts raw pre-softmax scores as the `ν⁽²⁾` embedding.
pub fn ingest_logits(logits: &[f64]) -> Result<NaturalDescriptor> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidDescriptor("logits must be finite".into()));
    }
    Ok(NaturalDescriptor {
        values: DVector::from_column_slice(logits),
        tag: EmbeddingTag::Nu2,
    })
}

/// Maps `ν⁽²⁾` back to the simplex.
pub fn logits_to_semantic(nu: &NaturalDescriptor) -> Result<SemanticDescriptor> {
    let p = softmax(nu.values.as_slice())?;
    SemanticDescriptor::new(DVector::from_vec(p))
}

/// One image (or sample): an unordered set of equal-length descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorBag {
    pub descriptors: Vec<DVector<f64>>,
    pub tag: EmbeddingTag,
    pub label: Option<usize>,
}

impl DescriptorBag {
    pub fn new(
        descriptors: Vec<DVector<f64>>,
        tag: EmbeddingTag,
        label: Option<usize>,
    ) -> Result<Self> {
        let first = descriptors.first().ok_or(Error::Empty("descriptor bag"))?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::Empty("descriptor dimension"));
        }
        if let Some(bad) = descriptors.iter().find(|d| d.len() != dim) {
            return Err(Error::dim(dim, bad.len(), "descriptor bag"));
        }
        Ok(Self {
            descriptors,
            tag,
            label,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], tag: EmbeddingTag, label: Option<usize>) -> Result<Self> {
        Self::new(
            rows.iter().map(|r| DVector::from_column_slice(r)).collect(),
            tag,
            label,
        )
    }

    pub fn dim(&self) -> usize {
        self.descriptors[0].len()
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Embeds every descriptor; the bag must hold raw probabilities.
    pub fn embed(&self, tag: EmbeddingTag, epsilon: f64) -> Result<Self> {
        if self.tag != EmbeddingTag::Raw {
            return Err(Error::InvalidArgument(format!(
                "bag is already embedded as {}",
                self.tag.name()
            )));
        }
        let descriptors = self
            .descriptors
            .iter()
            .map(|d| {
                let pi = SemanticDescriptor::new(d.clone())?;
                embed_values(pi.probs(), tag, epsilon)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            descriptors,
            tag,
            label: self.label,
        })
    }
}

pub(crate) fn check_bags(bags: &[DescriptorBag]) -> Result<usize> {
    let first = bags.first().ok_or(Error::Empty("bag list"))?;
    let dim = first.dim();
    for b in bags {
        if b.dim() != dim {
            return Err(Error::dim(dim, b.dim(), "bags"));
        }
    }
    Ok(dim)
}

pub(crate) fn pooled<'a>(bags: &'a [DescriptorBag]) -> impl Iterator<Item = &'a DVector<f64>> {
    bags.iter().flat_map(|b| b.descriptors.iter())
}

/// A fitted linear projection `x ↦ B (x − m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub mean: DVector<f64>,
    /// `D_out × D_in`, orthonormal rows.
    pub basis: DMatrix<f64>,
    /// Eigenvalues matching the basis rows, descending.
    pub variances: DVector<f64>,
}

impl PcaProjection {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            basis: DMatrix::identity(dim, dim),
            variances: DVector::from_element(dim, 1.0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(self.input_dim(), x.len(), "pca input"));
        }
        Ok(&self.basis * (x - &self.mean))
    }
}

/// Fits PCA by eigendecomposition of the pooled sample covariance.
pub fn fit_pca(bags: &[DescriptorBag], out_dim: usize) -> Result<PcaProjection> {
    let dim = check_bags(bags)?;
    if out_dim == 0 {
        return Err(Error::InvalidArgument(
            "PCA output dimension must be positive".into(),
        ));
    }
    if out_dim > dim {
        return Err(Error::InvalidArgument(format!(
            "PCA output dimension {out_dim} exceeds input dimension {dim}"
        )));
    }
    let count: usize = bags.iter().map(|b| b.len()).sum();
    if count < out_dim {
        return Err(Error::InsufficientSamples {
            needed: out_dim,
            have: count,
        });
    }
    let n = count as f64;
    let mut mean = DVector::zeros(dim);
    for x in pooled(bags) {
        mean += x;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for x in pooled(bags) {
        let c = x - &mean;
        cov.ger(1.0, &c, &c, 1.0);
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut basis = DMatrix::zeros(out_dim, dim);
    let mut variances = DVector::zeros(out_dim);
    for (row, &idx) in order.iter().take(out_dim).enumerate() {
        let mut v = eig.eigenvectors.column(idx).into_owned();
        // deterministic sign: largest-magnitude entry positive
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        basis.row_mut(row).copy_from(&v.transpose());
        variances[row] = eig.eigenvalues[idx].max(0.0);
    }
    Ok(PcaProjection {
        mean,
        basis,
        variances,
    })
}

/// Projects every descriptor of the bag; the label and embedding tag carry over.
pub fn apply_pca(p: &PcaProjection, bag: &DescriptorBag) -> Result<DescriptorBag> {
    let descriptors = bag
        .descriptors
        .iter()
        .map(|x| p.project(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(DescriptorBag {
        descriptors,
        tag: bag.tag,
        label: bag.label,
    })
}
