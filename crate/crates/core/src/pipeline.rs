//! End-to-end experiment driver: embed → PCA → fit mixture → encode →
//! normalize → classify → evaluate.
//!
//! Configuration is TOML; unknown keys are errors. Every stage failure is
//! wrapped in [`Error::Stage`] with the stage name.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{evaluate, train_linear, ClassifierConfig, Evaluation, LinearClassifier};
use crate::descriptors::{
    apply_pca, fit_pca, DescriptorBag, EmbeddingTag, PcaProjection, DEFAULT_EPSILON,
};
use crate::encoders::{
    concat_mu_lambda, dmm_fisher_info, dmm_fv, generic_fv, gmm_fv_mean, gmm_fv_variance,
    mfa_fisher_scaling, mfa_fs_lambda, mfa_fs_mu, mfa_fs_mu_lambda, mfa_fv_lambda, mfa_fv_mu,
    normalize_fv, transfer_dmm_to_gmm, transfer_gmm_to_dmm, Assignment, DmmFisherInfo,
    FisherEncoding, GenericFvSpec, MfaFisherInfo, ModelKind, Scaling, Variant,
};
use crate::io::{self, EncodingSet};
use crate::mfafsnet::TrainingConfig;
use crate::mixtures::{
    fit_dmm_em, fit_gmm_em, fit_mfa_em, global_variance, DiagonalGmm, DirichletMixture, EmConfig,
    MfaModel,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub tag: EmbeddingTag,
    /// Probability floor before logs.
    pub epsilon: f64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            tag: EmbeddingTag::Nu1,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Components; 50 for MFA and 100 otherwise when unset.
    pub k: Option<usize>,
    /// MFA latent dimension.
    pub r: usize,
    pub em: EmConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gmm,
            k: None,
            r: 10,
            em: EmConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn components(&self) -> usize {
        self.k.unwrap_or(match self.kind {
            ModelKind::Mfa => 50,
            ModelKind::Gmm | ModelKind::Dmm => 100,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Defaults to `gmm_mu`, `dmm_alpha` or `mfa_lambda` by model kind.
    pub variant: Option<Variant>,
    pub power: f64,
    /// Whiten MFA scores with the closed-form Fisher information.
    pub fisher_scaling: bool,
    /// Divide MFA scores by the bag size (GMM and DMM vectors already are).
    pub mean_pool: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: None,
            power: 0.5,
            fisher_scaling: false,
            mean_pool: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Seeds EM and the classifier; overrides the seeds in the subsections.
    pub seed: u64,
    pub embedding: EmbeddingConfig,
    /// Upper bound on the PCA output dimension; 0 disables PCA. Ignored by
    /// the Dirichlet mixture, which needs points on the simplex.
    pub pca_dim: usize,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub classifier: ClassifierConfig,
    pub finetune: TrainingConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            embedding: EmbeddingConfig::default(),
            pca_dim: 500,
            model: ModelConfig::default(),
            encoder: EncoderConfig::default(),
            classifier: ClassifierConfig::default(),
            finetune: TrainingConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// PCA output bound actually applied.
    pub fn effective_pca_dim(&self) -> usize {
        if self.model.kind == ModelKind::Dmm {
            0
        } else {
            self.pca_dim
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn variant(&self) -> Variant {
        self.encoder.variant.unwrap_or(match self.model.kind {
            ModelKind::Gmm => Variant::GmmMu,
            ModelKind::Dmm => Variant::DmmAlpha,
            ModelKind::Mfa => Variant::MfaLambda,
        })
    }

    pub fn em(&self) -> EmConfig {
        EmConfig {
            seed: self.seed,
            epsilon: self.embedding.epsilon,
            ..self.model.em.clone()
        }
    }

    pub fn classifier_cfg(&self) -> ClassifierConfig {
        ClassifierConfig {
            seed: self.seed,
            ..self.classifier.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.embedding;
        if !(e.epsilon > 0.0 && e.epsilon < 1.0) {
            return Err(Error::Config(format!(
                "embedding.epsilon must be in (0, 1), got {}",
                e.epsilon
            )));
        }
        if self.model.components() == 0 {
            return Err(Error::Config("model.k must be positive".into()));
        }
        if self.model.kind == ModelKind::Mfa && self.model.r == 0 {
            return Err(Error::Config("model.r must be positive".into()));
        }
        if self.model.kind == ModelKind::Dmm && e.tag != EmbeddingTag::Raw {
            return Err(Error::Config(
                "the Dirichlet mixture works on raw probabilities: use embedding.tag = \"raw\""
                    .into(),
            ));
        }
        let ok = match (self.model.kind, self.variant()) {
            (ModelKind::Gmm, Variant::GmmMu | Variant::GmmSigma) => true,
            (ModelKind::Dmm, Variant::DmmAlpha) => true,
            (ModelKind::Mfa, Variant::MfaMu | Variant::MfaLambda | Variant::MfaMuLambda) => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "encoder.variant `{}` does not apply to a {:?} model",
                self.variant().name(),
                self.model.kind
            )));
        }
        if !(self.encoder.power > 0.0 && self.encoder.power <= 1.0) {
            return Err(Error::Config(format!(
                "encoder.power must be in (0, 1], got {}",
                self.encoder.power
            )));
        }
        if !(self.classifier.reg >= 0.0) {
            return Err(Error::Config("classifier.reg must be nonnegative".into()));
        }
        self.finetune.validate()
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// A fitted background model with whatever the encoder needs alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedModel {
    Gmm(DiagonalGmm),
    Dmm {
        model: DirichletMixture,
        fisher: DmmFisherInfo,
    },
    Mfa {
        model: MfaModel,
        fisher: Option<MfaFisherInfo>,
    },
}

/// Everything the encode stage needs: PCA (if any), the mixture and the
/// encoder settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderBundle {
    pub embedding: EmbeddingConfig,
    pub pca: Option<PcaProjection>,
    pub model: TrainedModel,
    pub variant: Variant,
    pub power: f64,
    pub mean_pool: bool,
}

/// Embeds raw probability bags. `ν⁽²⁾` bags must arrive as logits already.
pub fn embed_bags(bags: &[DescriptorBag], cfg: &EmbeddingConfig) -> Result<Vec<DescriptorBag>> {
    match cfg.tag {
        EmbeddingTag::Nu2 => {
            if let Some(b) = bags.iter().find(|b| b.tag != EmbeddingTag::Nu2) {
                return Err(Error::InvalidArgument(format!(
                    "nu2 needs logit bags, got {} bags",
                    b.tag.name()
                )));
            }
            Ok(bags.to_vec())
        }
        EmbeddingTag::Raw => {
            if let Some(b) = bags.iter().find(|b| b.tag != EmbeddingTag::Raw) {
                return Err(Error::InvalidArgument(format!(
                    "expected raw bags, got {} bags",
                    b.tag.name()
                )));
            }
            Ok(bags.to_vec())
        }
        tag => bags.par_iter().map(|b| b.embed(tag, cfg.epsilon)).collect(),
    }
}

/// Fits PCA with `min(pca_dim, D)` outputs, or returns `None` when disabled.
pub fn fit_pca_stage(bags: &[DescriptorBag], pca_dim: usize) -> Result<Option<PcaProjection>> {
    if pca_dim == 0 {
        return Ok(None);
    }
    let d = bags.first().ok_or(Error::Empty("bags"))?.dim();
    fit_pca(bags, pca_dim.min(d)).map(Some)
}

pub fn project_bags(
    pca: Option<&PcaProjection>,
    bags: &[DescriptorBag],
) -> Result<Vec<DescriptorBag>> {
    match pca {
        None => Ok(bags.to_vec()),
        Some(p) => bags.par_iter().map(|b| apply_pca(p, b)).collect(),
    }
}

pub struct FitInfo {
    pub iterations: usize,
    pub converged: bool,
    pub final_loglik: f64,
}

pub fn fit_model(bags: &[DescriptorBag], cfg: &PipelineConfig) -> Result<(TrainedModel, FitInfo)> {
    let k = cfg.model.components();
    let em = cfg.em();
    let info = |trace: &[f64], converged| FitInfo {
        iterations: trace.len().saturating_sub(1),
        converged,
        final_loglik: trace.last().copied().unwrap_or(f64::NAN),
    };
    Ok(match cfg.model.kind {
        ModelKind::Gmm => {
            let f = fit_gmm_em(bags, k, &em)?;
            let i = info(&f.loglik_trace, f.converged);
            (TrainedModel::Gmm(f.model), i)
        }
        ModelKind::Dmm => {
            let f = fit_dmm_em(bags, k, &em)?;
            let i = info(&f.loglik_trace, f.converged);
            let fisher = dmm_fisher_info(&f.model)?;
            (
                TrainedModel::Dmm {
                    model: f.model,
                    fisher,
                },
                i,
            )
        }
        ModelKind::Mfa => {
            let f = fit_mfa_em(bags, k, cfg.model.r, &em)?;
            let i = info(&f.loglik_trace, f.converged);
            let fisher = if cfg.encoder.fisher_scaling {
                Some(mfa_fisher_scaling(&f.model)?)
            } else {
                None
            };
            (
                TrainedModel::Mfa {
                    model: f.model,
                    fisher,
                },
                i,
            )
        }
    })
}

/// Encodes one bag that is already embedded and projected.
pub fn encode_projected(bundle: &EncoderBundle, bag: &DescriptorBag) -> Result<FisherEncoding> {
    let raw = match (&bundle.model, bundle.variant) {
        (TrainedModel::Gmm(m), Variant::GmmMu) => gmm_fv_mean(m, bag)?,
        (TrainedModel::Gmm(m), Variant::GmmSigma) => gmm_fv_variance(m, bag)?,
        (TrainedModel::Dmm { model, fisher }, Variant::DmmAlpha) => dmm_fv(model, bag, fisher)?,
        (TrainedModel::Mfa { model, fisher }, v) => {
            let e = match (v, fisher) {
                (Variant::MfaMu, None) => mfa_fs_mu(model, bag)?,
                (Variant::MfaLambda, None) => mfa_fs_lambda(model, bag)?,
                (Variant::MfaMuLambda, None) => mfa_fs_mu_lambda(model, bag)?,
                (Variant::MfaMu, Some(f)) => mfa_fv_mu(model, bag, f)?,
                (Variant::MfaLambda, Some(f)) => mfa_fv_lambda(model, bag, f)?,
                (Variant::MfaMuLambda, Some(f)) => {
                    concat_mu_lambda(&mfa_fv_mu(model, bag, f)?, &mfa_fv_lambda(model, bag, f)?)?
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "variant {} needs a different model",
                        v.name()
                    )))
                }
            };
            if bundle.mean_pool {
                e.scaled(1.0 / bag.len() as f64)
            } else {
                e
            }
        }
        (_, v) => {
            return Err(Error::InvalidArgument(format!(
                "variant {} needs a different model",
                v.name()
            )))
        }
    };
    normalize_fv(&raw, bundle.power)
}

/// Embeds, projects and encodes raw bags.
pub fn encode_bags(bundle: &EncoderBundle, bags: &[DescriptorBag]) -> Result<Vec<FisherEncoding>> {
    let embedded = embed_bags(bags, &bundle.embedding)?;
    let projected = project_bags(bundle.pca.as_ref(), &embedded)?;
    projected
        .par_iter()
        .map(|b| encode_projected(bundle, b))
        .collect()
}

pub fn labels_of(bags: &[DescriptorBag]) -> Result<Vec<usize>> {
    bags.iter()
        .enumerate()
        .map(|(i, b)| {
            b.label
                .ok_or_else(|| Error::InvalidArgument(format!("bag {i} has no label")))
        })
        .collect()
}

/// Number of classes in a labeled training set; at least two must occur.
pub fn count_classes(labels: &[usize]) -> Result<usize> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l] = true);
    let present = seen.iter().filter(|s| **s).count();
    if present < 2 {
        return Err(Error::DegenerateData(format!(
            "training set has {present} distinct class(es); need at least 2"
        )));
    }
    Ok(classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub support: usize,
    /// `None` when the class has no test bags.
    pub accuracy: Option<f64>,
}

/// The deterministic part of a run. Wall-clock timings live in
/// [`Timings`] so that reruns produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub embedding: EmbeddingTag,
    pub model: ModelKind,
    pub variant: Variant,
    pub k: usize,
    pub d: usize,
    pub r: usize,
    pub encoding_length: usize,
    pub train_bags: usize,
    pub test_bags: usize,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub em_final_loglik: f64,
    pub train_accuracy: f64,
    pub mean_per_class_accuracy: f64,
    pub per_class: Vec<ClassRow>,
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

impl Timings {
    fn time<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let out = stage(name, f());
        self.stages
            .push((name.to_string(), t.elapsed().as_secs_f64()));
        out
    }
}

pub struct PipelineRun {
    pub bundle: EncoderBundle,
    pub classifier: LinearClassifier,
    pub train: EncodingSet,
    pub test: EncodingSet,
    pub report: MetricsReport,
    pub timings: Timings,
}

fn class_rows(eval: &Evaluation, test_labels: &[usize]) -> Vec<ClassRow> {
    eval.per_class_accuracy
        .iter()
        .enumerate()
        .map(|(c, a)| ClassRow {
            class: c,
            support: test_labels.iter().filter(|l| **l == c).count(),
            accuracy: *a,
        })
        .collect()
}

/// Runs every stage in memory. `train` and `test` hold raw probabilities, or
/// logits when the embedding is `nu2`.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    train: &[DescriptorBag],
    test: &[DescriptorBag],
) -> Result<PipelineRun> {
    stage("config", cfg.validate())?;
    let mut timings = Timings::default();
    let (train_labels, test_labels, classes) = timings.time("ingest", || {
        if train.is_empty() || test.is_empty() {
            return Err(Error::Empty("train or test bags"));
        }
        let tl = labels_of(train)?;
        let classes = count_classes(&tl)?;
        let sl = labels_of(test)?;
        if let Some(l) = sl.iter().find(|l| **l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "test label {l} never occurs in training"
            )));
        }
        Ok((tl, sl, classes))
    })?;
    let embedded = timings.time("embed", || embed_bags(train, &cfg.embedding))?;
    let pca = timings.time("pca", || fit_pca_stage(&embedded, cfg.effective_pca_dim()))?;
    let projected = timings.time("project", || project_bags(pca.as_ref(), &embedded))?;
    let (model, fit) = timings.time("fit", || fit_model(&projected, cfg))?;
    let bundle = EncoderBundle {
        embedding: cfg.embedding.clone(),
        pca,
        model,
        variant: cfg.variant(),
        power: cfg.encoder.power,
        mean_pool: cfg.encoder.mean_pool,
    };
    let train_enc = timings.time("encode", || {
        projected
            .par_iter()
            .map(|b| encode_projected(&bundle, b))
            .collect::<Result<Vec<_>>>()
    })?;
    let test_enc = timings.time("encode_test", || encode_bags(&bundle, test))?;
    let xs: Vec<DVector<f64>> = train_enc.iter().map(|e| e.vector.clone()).collect();
    let classifier = timings.time("classify", || {
        train_linear(&xs, &train_labels, classes, &cfg.classifier_cfg())
    })?;
    let (train_eval, test_eval) = timings.time("evaluate", || {
        let ts: Vec<DVector<f64>> = test_enc.iter().map(|e| e.vector.clone()).collect();
        Ok((
            evaluate(&classifier, &xs, &train_labels)?,
            evaluate(&classifier, &ts, &test_labels)?,
        ))
    })?;
    let layout = train_enc[0].layout;
    let train_acc = {
        let hits: usize = (0..classes).map(|c| train_eval.confusion[c][c]).sum();
        hits as f64 / train.len() as f64
    };
    let report = MetricsReport {
        embedding: cfg.embedding.tag,
        model: cfg.model.kind,
        variant: layout.variant,
        k: layout.k,
        d: layout.d,
        r: layout.r,
        encoding_length: train_enc[0].len(),
        train_bags: train.len(),
        test_bags: test.len(),
        em_iterations: fit.iterations,
        em_converged: fit.converged,
        em_final_loglik: fit.final_loglik,
        train_accuracy: train_acc,
        mean_per_class_accuracy: test_eval.mean_per_class_accuracy,
        per_class: class_rows(&test_eval, &test_labels),
        confusion: test_eval.confusion.clone(),
    };
    let train_set =
        EncodingSet::from_encodings(&train_enc, train_labels.into_iter().map(Some).collect())?;
    let test_set =
        EncodingSet::from_encodings(&test_enc, test_labels.into_iter().map(Some).collect())?;
    Ok(PipelineRun {
        bundle,
        classifier,
        train: train_set,
        test: test_set,
        report,
        timings,
    })
}

impl PipelineRun {
    /// Writes `encoder.json`, `classifier.json`, `train.enc`, `test.enc`,
    /// `metrics.json` and `timings.json` into `dir`.
    pub fn write_artifacts(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        io::save_model(dir.join("encoder.json"), ENCODER_KIND, &self.bundle)?;
        io::save_model(
            dir.join("classifier.json"),
            CLASSIFIER_KIND,
            &self.classifier,
        )?;
        io::save_encodings(dir.join("train.enc"), &self.train)?;
        io::save_encodings(dir.join("test.enc"), &self.test)?;
        io::save_model(dir.join("metrics.json"), METRICS_KIND, &self.report)?;
        io::save_model(dir.join("timings.json"), "timings", &self.timings)?;
        Ok(())
    }
}

pub const ENCODER_KIND: &str = "encoder";
pub const CLASSIFIER_KIND: &str = "linear_classifier";
pub const METRICS_KIND: &str = "metrics";

/// Assignment source of a generic encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentKind {
    Gaussian,
    Dirichlet,
}

/// Scaling source of a generic encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingKind {
    Gaussian,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRow {
    pub assignment: AssignmentKind,
    pub scaling: ScalingKind,
    pub mean_per_class_accuracy: f64,
}

/// Builds the four (assignment × scaling) generic encoders in `log π` space.
///
/// The Gaussian-assignment column uses a GMM fitted on `log π` and, for
/// Dirichlet scaling, the Dirichlet mixture whose centroids match the GMM
/// means. The Dirichlet-assignment column uses a fitted Dirichlet mixture and,
/// for Gaussian scaling, the GMM sharing its centroids with the global
/// `log π` variance. Centroids always come from the assignment model.
pub fn hybrid_specs(
    train: &[DescriptorBag],
    cfg: &PipelineConfig,
) -> Result<Vec<(AssignmentKind, ScalingKind, GenericFvSpec)>> {
    let eps = cfg.embedding.epsilon;
    let k = cfg.model.components();
    let em = cfg.em();
    let logs = embed_bags(
        train,
        &EmbeddingConfig {
            tag: EmbeddingTag::Nu1,
            epsilon: eps,
        },
    )?;
    let gmm = fit_gmm_em(&logs, k, &em)?.model;
    let dmm = fit_dmm_em(train, k, &em)?.model;
    let gmm_as_dmm = transfer_gmm_to_dmm(&gmm, eps)?;
    let points: Vec<&DVector<f64>> = logs.iter().flat_map(|b| b.descriptors.iter()).collect();
    let (_, var) = global_variance(&points)?;
    let dmm_as_gmm = transfer_dmm_to_gmm(&dmm, &var)?;
    let gg = GenericFvSpec::gmm_column(&gmm, EmbeddingTag::Nu1, eps);
    let gd = GenericFvSpec {
        scaling: Scaling::DmmFim(dmm_fisher_info(&gmm_as_dmm)?),
        ..gg.clone()
    };
    let dd = GenericFvSpec::dmm_column(&dmm, &dmm_fisher_info(&dmm)?)?;
    let dg = GenericFvSpec {
        scaling: Scaling::GaussDiag {
            weights: dmm_as_gmm.weights.clone(),
            variances: dmm_as_gmm.variances.clone(),
        },
        ..dd.clone()
    };
    debug_assert!(matches!(dd.assignment, Assignment::Dirichlet(_)));
    Ok(vec![
        (AssignmentKind::Gaussian, ScalingKind::Gaussian, gg),
        (AssignmentKind::Gaussian, ScalingKind::Dirichlet, gd),
        (AssignmentKind::Dirichlet, ScalingKind::Gaussian, dg),
        (AssignmentKind::Dirichlet, ScalingKind::Dirichlet, dd),
    ])
}

/// Runs the four generic encoders end to end on raw probability bags.
pub fn run_hybrids(
    cfg: &PipelineConfig,
    train: &[DescriptorBag],
    test: &[DescriptorBag],
) -> Result<Vec<HybridRow>> {
    let tl = stage("ingest", labels_of(train))?;
    let classes = stage("ingest", count_classes(&tl))?;
    let sl = stage("ingest", labels_of(test))?;
    let specs = stage("fit", hybrid_specs(train, cfg))?;
    specs
        .into_iter()
        .map(|(a, s, spec)| {
            let enc = |bags: &[DescriptorBag]| -> Result<Vec<DVector<f64>>> {
                bags.par_iter()
                    .map(|b| {
                        normalize_fv(&generic_fv(&spec, b)?, cfg.encoder.power).map(|e| e.vector)
                    })
                    .collect()
            };
            let xs = stage("encode", enc(train))?;
            let ts = stage("encode_test", enc(test))?;
            let clf = stage(
                "classify",
                train_linear(&xs, &tl, classes, &cfg.classifier_cfg()),
            )?;
            let ev = stage("evaluate", evaluate(&clf, &ts, &sl))?;
            Ok(HybridRow {
                assignment: a,
                scaling: s,
                mean_per_class_accuracy: ev.mean_per_class_accuracy,
            })
        })
        .collect()
}

/// Plain-text comparison table, one row per assignment, one column per scaling.
pub fn hybrid_table(rows: &[HybridRow]) -> String {
    let get = |a, s| {
        rows.iter()
            .find(|r| r.assignment == a && r.scaling == s)
            .map_or("-".to_string(), |r| {
                format!("{:.2}", 100.0 * r.mean_per_class_accuracy)
            })
    };
    let mut out = String::from("assignment \\ scaling | gaussian | dirichlet\n");
    for (name, a) in [
        ("gaussian", AssignmentKind::Gaussian),
        ("dirichlet", AssignmentKind::Dirichlet),
    ] {
        out.push_str(&format!(
            "{name:<20} | {:>8} | {:>9}\n",
            get(a, ScalingKind::Gaussian),
            get(a, ScalingKind::Dirichlet)
        ));
    }
    out
}
