//! One-vs-rest linear classifier with the squared hinge loss.
//!
//! The objective is
//! `(1/N) Σ_i Σ_c max(0, 1 − t_ic s_c(x_i))² + reg ‖W‖²_F`, with
//! `t_ic = +1` for the true class and `−1` otherwise, and the bias left
//! unregularized.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::seeded;
use crate::{Error, Result};

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `C × D_e`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: DMatrix::zeros(classes, dim),
            bias: DVector::zeros(classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn scores(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim() {
            return Err(Error::dim(self.dim(), x.len(), "classifier input"));
        }
        Ok(&self.weights * x + &self.bias)
    }

    /// Arg-max class; the lowest index wins ties.
    pub fn predict(&self, x: &DVector<f64>) -> Result<usize> {
        Ok(argmax(&self.scores(x)?))
    }
}

pub(crate) fn argmax(s: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, v) in s.iter().enumerate() {
        if *v > s[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Full-batch accelerated gradient descent with step `1/L`; deterministic
    /// and independent of sample order.
    FullBatch,
    /// Minibatch SGD with momentum 0.9, shuffled by the seed.
    Sgd { batch: usize, lr: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub reg: f64,
    /// Gradient iterations for the full-batch solver, passes for SGD.
    pub epochs: usize,
    pub seed: u64,
    pub solver: Solver,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            reg: 1e-4,
            epochs: 300,
            seed: 0,
            solver: Solver::FullBatch,
        }
    }
}

fn check_training_set(x: &[DVector<f64>], labels: &[usize], classes: usize) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if labels.len() != x.len() {
        return Err(Error::dim(x.len(), labels.len(), "labels"));
    }
    let dim = x[0].len();
    if let Some(bad) = x.iter().find(|v| v.len() != dim) {
        return Err(Error::dim(dim, bad.len(), "training encodings"));
    }
    let mut support = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        support[l] += 1;
    }
    if let Some(c) = support.iter().position(|n| *n == 0) {
        return Err(Error::InvalidArgument(format!(
            "class {c} has no training samples"
        )));
    }
    Ok(dim)
}

/// Mean squared-hinge loss plus penalty.
pub fn objective(clf: &LinearClassifier, x: &[DVector<f64>], labels: &[usize], reg: f64) -> f64 {
    let mut loss = 0.0;
    for (xi, &y) in x.iter().zip(labels) {
        let s = &clf.weights * xi + &clf.bias;
        for c in 0..s.len() {
            let t = if c == y { 1.0 } else { -1.0 };
            let m = (1.0 - t * s[c]).max(0.0);
            loss += m * m;
        }
    }
    loss / x.len() as f64 + reg * clf.weights.norm_squared()
}

/// Gradient of the mean loss term over a subset (not including the penalty).
fn loss_gradient(
    clf: &LinearClassifier,
    x: &[DVector<f64>],
    labels: &[usize],
    idx: &[usize],
) -> (DMatrix<f64>, DVector<f64>) {
    let (c, d) = (clf.n_classes(), clf.dim());
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut gw = DMatrix::zeros(c, d);
            let mut gb = DVector::zeros(c);
            for &i in chunk {
                let s = &clf.weights * &x[i] + &clf.bias;
                let mut coef = DVector::zeros(c);
                for k in 0..c {
                    let t = if k == labels[i] { 1.0 } else { -1.0 };
                    let m = (1.0 - t * s[k]).max(0.0);
                    coef[k] = -2.0 * t * m;
                }
                gw.ger(1.0, &coef, &x[i], 1.0);
                gb += coef;
            }
            (gw, gb)
        })
        .collect();
    let mut gw = DMatrix::zeros(c, d);
    let mut gb = DVector::zeros(c);
    for (w, b) in parts {
        gw += w;
        gb += b;
    }
    let n = idx.len() as f64;
    (gw / n, gb / n)
}

/// Trains a one-vs-rest squared-hinge classifier, starting from zero.
pub fn train_linear(
    x: &[DVector<f64>],
    labels: &[usize],
    classes: usize,
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier> {
    let dim = check_training_set(x, labels, classes)?;
    let init = LinearClassifier::zeros(classes, dim);
    train_linear_from(init, x, labels, cfg)
}

/// Continues training from an existing classifier.
pub fn train_linear_from(
    init: LinearClassifier,
    x: &[DVector<f64>],
    labels: &[usize],
    cfg: &ClassifierConfig,
) -> Result<LinearClassifier> {
    let dim = check_training_set(x, labels, init.n_classes())?;
    if dim != init.dim() {
        return Err(Error::dim(init.dim(), dim, "classifier warm start"));
    }
    if !(cfg.reg >= 0.0) {
        return Err(Error::InvalidArgument(
            "regularization must be nonnegative".into(),
        ));
    }
    let all: Vec<usize> = (0..x.len()).collect();
    match cfg.solver {
        Solver::FullBatch => {
            // Squared hinge has a gradient Lipschitz constant of at most
            // 2·mean‖(x, 1)‖² + 2·reg per class.
            let mean_sq = x.iter().map(|v| v.norm_squared() + 1.0).sum::<f64>() / x.len() as f64;
            let step = 1.0 / (2.0 * mean_sq + 2.0 * cfg.reg);
            let mut cur = init.clone();
            let mut look = init;
            let mut t = 1.0f64;
            let mut prev_obj = objective(&cur, x, labels, cfg.reg);
            for _ in 0..cfg.epochs {
                let (gw, gb) = loss_gradient(&look, x, labels, &all);
                let next = LinearClassifier {
                    weights: &look.weights - (gw + &look.weights * (2.0 * cfg.reg)) * step,
                    bias: &look.bias - gb * step,
                };
                let obj = objective(&next, x, labels, cfg.reg);
                let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
                if obj > prev_obj {
                    // Restart momentum when the objective goes up.
                    t = 1.0;
                    look = cur.clone();
                    continue;
                }
                let beta = (t - 1.0) / t_next;
                look = LinearClassifier {
                    weights: &next.weights + (&next.weights - &cur.weights) * beta,
                    bias: &next.bias + (&next.bias - &cur.bias) * beta,
                };
                cur = next;
                prev_obj = obj;
                t = t_next;
            }
            Ok(cur)
        }
        Solver::Sgd { batch, lr } => {
            if batch == 0 || !(lr >= 0.0) {
                return Err(Error::InvalidArgument(
                    "sgd needs batch > 0 and lr ≥ 0".into(),
                ));
            }
            let mut rng = seeded(cfg.seed);
            let mut clf = init;
            let mut vw = DMatrix::zeros(clf.n_classes(), dim);
            let mut vb = DVector::zeros(clf.n_classes());
            let mut order = all;
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for idx in order.chunks(batch) {
                    let (gw, gb) = loss_gradient(&clf, x, labels, idx);
                    vw = vw * 0.9 + (gw + &clf.weights * (2.0 * cfg.reg));
                    vb = vb * 0.9 + gb;
                    clf.weights -= &vw * lr;
                    clf.bias -= &vb * lr;
                }
            }
            Ok(clf)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Recall per class; `None` for classes absent from the evaluation set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Unweighted mean of the defined per-class recalls.
    pub mean_per_class_accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate_predictions(
    predicted: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Evaluation> {
    if predicted.len() != labels.len() {
        return Err(Error::dim(labels.len(), predicted.len(), "predictions"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &y) in predicted.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label out of range for {classes} classes"
            )));
        }
        confusion[y][p] += 1;
    }
    let per_class: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    Ok(Evaluation {
        mean_per_class_accuracy: defined.iter().sum::<f64>() / defined.len() as f64,
        per_class_accuracy: per_class,
        confusion,
    })
}

pub fn evaluate(
    clf: &LinearClassifier,
    x: &[DVector<f64>],
    labels: &[usize],
) -> Result<Evaluation> {
    let predicted = x
        .par_iter()
        .map(|v| clf.predict(v))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&predicted, labels, clf.n_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> (Vec<DVector<f64>>, Vec<usize>) {
        let pts = [
            (0.5, 1.2, 0),
            (1.0, 2.0, 0),
            (1.5, 0.9, 0),
            (0.2, 1.8, 0),
            (-0.4, -1.1, 1),
            (-1.2, -0.3, 1),
            (-0.8, -2.0, 1),
            (-1.9, -0.7, 1),
            (0.1, -0.9, 1),
            (0.9, 0.3, 0),
        ];
        (
            pts.iter()
                .map(|p| DVector::from_column_slice(&[p.0, p.1]))
                .collect(),
            pts.iter().map(|p| p.2).collect(),
        )
    }

    #[test]
    fn separable_toy_is_learned() {
        let (x, y) = toy();
        let clf = train_linear(&x, &y, 2, &ClassifierConfig::default()).unwrap();
        let ev = evaluate(&clf, &x, &y).unwrap();
        assert_eq!(ev.mean_per_class_accuracy, 1.0);
    }

    #[test]
    fn duplicating_samples_keeps_the_solution() {
        let (x, y) = toy();
        let a = train_linear(&x, &y, 2, &ClassifierConfig::default()).unwrap();
        let x2: Vec<_> = x.iter().chain(x.iter()).cloned().collect();
        let y2: Vec<_> = y.iter().chain(y.iter()).copied().collect();
        let b = train_linear(&x2, &y2, 2, &ClassifierConfig::default()).unwrap();
        assert!((a.weights - b.weights).amax() <= 1e-8);
        assert!((a.bias - b.bias).amax() <= 1e-8);
    }

    #[test]
    fn objective_near_grid_optimum() {
        let (x, y) = toy();
        let reg = 0.05;
        let cfg = ClassifierConfig {
            reg,
            epochs: 3000,
            ..ClassifierConfig::default()
        };
        let clf = train_linear(&x, &y, 2, &cfg).unwrap();
        let trained = objective(&clf, &x, &y, reg);
        // The objective separates over classes; search each row on a grid.
        let mut grid_total = 0.0;
        for c in 0..2 {
            let mut best = f64::INFINITY;
            let steps: Vec<f64> = (0..=120).map(|i| -3.0 + 0.05 * i as f64).collect();
            for &w0 in &steps {
                for &w1 in &steps {
                    for &b in &steps {
                        let mut l = 0.0;
                        for (xi, &yi) in x.iter().zip(&y) {
                            let t = if yi == c { 1.0 } else { -1.0 };
                            let m = (1.0 - t * (w0 * xi[0] + w1 * xi[1] + b)).max(0.0);
                            l += m * m;
                        }
                        best = best.min(l / x.len() as f64 + reg * (w0 * w0 + w1 * w1));
                    }
                }
            }
            grid_total += best;
        }
        assert!(
            trained <= grid_total * 1.01,
            "trained {trained} grid {grid_total}"
        );
    }

    #[test]
    fn missing_class_is_rejected() {
        let (x, _) = toy();
        let y = vec![0; x.len()];
        assert!(train_linear(&x, &y, 2, &ClassifierConfig::default()).is_err());
    }

    #[test]
    fn sgd_solver_is_seeded() {
        let (x, y) = toy();
        let cfg = ClassifierConfig {
            solver: Solver::Sgd { batch: 3, lr: 0.01 },
            epochs: 50,
            seed: 4,
            ..ClassifierConfig::default()
        };
        let a = train_linear(&x, &y, 2, &cfg).unwrap();
        let b = train_linear(&x, &y, 2, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(evaluate(&a, &x, &y).unwrap().mean_per_class_accuracy, 1.0);
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let ev = evaluate_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(ev.per_class_accuracy, vec![Some(1.0); 3]);
        assert_eq!(
            ev.confusion,
            vec![vec![1, 0, 0], vec![0, 2, 0], vec![0, 0, 1]]
        );
        let ev = evaluate_predictions(&[0; 6], &[0, 0, 0, 1, 1, 1], 2).unwrap();
        assert_eq!(ev.mean_per_class_accuracy, 0.5);
    }

    #[test]
    fn random_predictions_near_chance() {
        let mut rng = seeded(9);
        let n = 10_000;
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let ev = evaluate_predictions(&p, &y, 4).unwrap();
        assert!((ev.mean_per_class_accuracy - 0.25).abs() <= 0.02);
        for (c, row) in ev.confusion.iter().enumerate() {
            assert_eq!(
                row.iter().sum::<usize>(),
                y.iter().filter(|l| **l == c).count()
            );
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let clf = LinearClassifier::zeros(3, 2);
        assert_eq!(clf.predict(&DVector::from_element(2, 1.0)).unwrap(), 0);
    }

    proptest::proptest! {
        #[test]
        fn positive_scaling_keeps_predictions(
            w in proptest::collection::vec(-5.0f64..5.0, 6),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            x in proptest::collection::vec(-5.0f64..5.0, 2),
            c in 1e-3f64..1e3,
        ) {
            let clf = LinearClassifier {
                weights: DMatrix::from_row_slice(3, 2, &w),
                bias: DVector::from_vec(b),
            };
            let scaled = LinearClassifier { weights: &clf.weights * c, bias: &clf.bias * c };
            let x = DVector::from_vec(x);
            proptest::prop_assert_eq!(clf.predict(&x).unwrap(), scaled.predict(&x).unwrap());
        }
    }
}
