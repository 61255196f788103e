//! Cost-sensitive plug-in classification of test rows and its evaluation.
//!
//! With posterior `C_k(x)` and costs `q(k, j)` of predicting `j` for a true
//! `k`, the optimal rule picks `argmin_j sum_{k != j} q(k, j) C_k(x)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drm::{expand_basis, posterior_phi, BasisSpec, Theta};
use crate::em::ElSolution;
use crate::error::{OslsError, Result};

/// Misclassification costs, `cost(k, j)` for true class `k` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    q: Vec<Vec<f64>>,
}

impl CostMatrix {
    pub fn new(q: Vec<Vec<f64>>) -> Result<Self> {
        let size = q.len();
        if size < 2 || q.iter().any(|r| r.len() != size) {
            return Err(OslsError::InvalidInput("cost matrix must be square with at least 2 classes".into()));
        }
        for (k, row) in q.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if k == j && v != 0.0 {
                    return Err(OslsError::InvalidInput(format!("cost({k},{k}) = {v} must be 0")));
                }
                if k != j && !(v > 0.0 && v.is_finite()) {
                    return Err(OslsError::InvalidInput(format!(
                        "cost({k},{j}) = {v} must be positive and finite"
                    )));
                }
            }
        }
        Ok(Self { q })
    }

    /// Zero-one loss over `classes` labels.
    pub fn uniform(classes: usize) -> Self {
        let q = (0..classes)
            .map(|k| (0..classes).map(|j| if k == j { 0.0 } else { 1.0 }).collect())
            .collect();
        Self { q }
    }

    pub fn classes(&self) -> usize {
        self.q.len()
    }

    pub fn cost(&self, truth: usize, predicted: usize) -> f64 {
        self.q[truth][predicted]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.q
    }
}

/// Optimal label for one posterior vector; ties go to the smallest index.
pub fn assign_from_posterior(posterior: &[f64], cost: &CostMatrix) -> usize {
    let mut best = 0;
    let mut best_risk = f64::INFINITY;
    for j in 0..posterior.len() {
        let risk: f64 = posterior
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != j)
            .map(|(k, c)| cost.cost(k, j) * c)
            .sum();
        if risk < best_risk {
            best_risk = risk;
            best = j;
        }
    }
    best
}

/// Optimal label in `0..=K` for feature vector `x`.
pub fn optimal_assign(x: &[f64], basis: &BasisSpec, theta: &Theta, cost: &CostMatrix) -> Result<usize> {
    check_cost(theta, cost)?;
    Ok(assign_from_posterior(&posterior_phi(&expand_basis(x, basis)?, theta)?, cost))
}

fn check_cost(theta: &Theta, cost: &CostMatrix) -> Result<()> {
    if cost.classes() != theta.k() + 1 {
        return Err(OslsError::DimensionMismatch { expected: theta.k() + 1, found: cost.classes() });
    }
    Ok(())
}

/// Labels for every row of `x` under `theta`.
pub fn classify_rows(
    theta: &Theta,
    x: &DMatrix<f64>,
    basis: &BasisSpec,
    cost: &CostMatrix,
) -> Result<Vec<usize>> {
    check_cost(theta, cost)?;
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let phi = expand_basis(&row, basis)?;
            Ok(assign_from_posterior(&posterior_phi(&phi, theta)?, cost))
        })
        .collect()
}

/// Labels for the rows of `x` from a fitted solution.
pub fn classify_testset(
    solution: &ElSolution,
    x: &DMatrix<f64>,
    basis: &BasisSpec,
    cost: &CostMatrix,
) -> Result<Vec<usize>> {
    classify_rows(&solution.theta_hat, x, basis, cost)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub cost: f64,
    /// True classes absent from the evaluation labels (their term is skipped).
    pub skipped_classes: Vec<usize>,
}

/// Sample version of the expected cost:
/// `sum_k sum_{j != k} q(k, j) w_k #(true k, predicted j) / #(true k)` with
/// `w` the empirical class frequencies unless `pi_weights` is given.
pub fn empirical_cost(
    predicted: &[usize],
    truth: &[usize],
    cost: &CostMatrix,
    pi_weights: Option<&[f64]>,
) -> Result<CostSummary> {
    if predicted.len() != truth.len() {
        return Err(OslsError::DimensionMismatch { expected: truth.len(), found: predicted.len() });
    }
    let classes = cost.classes();
    if let Some(w) = pi_weights {
        if w.len() != classes {
            return Err(OslsError::DimensionMismatch { expected: classes, found: w.len() });
        }
    }
    let confusion = confusion_matrix(predicted, truth, classes)?;
    let total = truth.len() as f64;
    let mut value = 0.0;
    let mut skipped_classes = Vec::new();
    for k in 0..classes {
        let count: usize = confusion[k].iter().sum();
        if count == 0 {
            skipped_classes.push(k);
            continue;
        }
        let weight = pi_weights.map_or(count as f64 / total, |w| w[k]);
        for j in 0..classes {
            if j != k {
                value += cost.cost(k, j) * weight * confusion[k][j] as f64 / count as f64;
            }
        }
    }
    Ok(CostSummary { cost: value, skipped_classes })
}

fn confusion_matrix(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(OslsError::InvalidInput(format!("label outside 0..{classes}")));
        }
        confusion[t][p] += 1;
    }
    Ok(confusion)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// True-class counts.
    pub counts: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub empirical_cost: f64,
    pub skipped_classes: Vec<usize>,
}

pub fn classification_report(
    predicted: &[usize],
    truth: &[usize],
    cost: &CostMatrix,
    pi_weights: Option<&[f64]>,
) -> Result<ClassificationReport> {
    let confusion = confusion_matrix(predicted, truth, cost.classes())?;
    let summary = empirical_cost(predicted, truth, cost, pi_weights)?;
    Ok(ClassificationReport {
        counts: confusion.iter().map(|r| r.iter().sum()).collect(),
        confusion,
        accuracy: accuracy(predicted, truth),
        empirical_cost: summary.cost,
        skipped_classes: summary.skipped_classes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaComparison {
    /// `max_k (1/m*) sum_i |C_k(x_i; a) - C_k(x_i; b)|`.
    pub distance: f64,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
}

/// Sample L1 distance between the posteriors of two parameters over `x`,
/// together with the uniform-cost accuracies of both plug-in rules.
pub fn accuracy_vs_theta_distance(
    theta_a: &Theta,
    theta_b: &Theta,
    x: &DMatrix<f64>,
    truth: &[usize],
    basis: &BasisSpec,
) -> Result<ThetaComparison> {
    if theta_a.k() != theta_b.k() || theta_a.dim() != theta_b.dim() {
        return Err(OslsError::DimensionMismatch { expected: theta_a.dim(), found: theta_b.dim() });
    }
    if truth.len() != x.nrows() {
        return Err(OslsError::DimensionMismatch { expected: x.nrows(), found: truth.len() });
    }
    let classes = theta_a.k() + 1;
    let cost = CostMatrix::uniform(classes);
    let mut sums = vec![0.0; classes];
    let mut labels_a = Vec::with_capacity(truth.len());
    let mut labels_b = Vec::with_capacity(truth.len());
    for i in 0..x.nrows() {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let phi = expand_basis(&row, basis)?;
        let pa = posterior_phi(&phi, theta_a)?;
        let pb = posterior_phi(&phi, theta_b)?;
        for k in 0..classes {
            sums[k] += (pa[k] - pb[k]).abs();
        }
        labels_a.push(assign_from_posterior(&pa, &cost));
        labels_b.push(assign_from_posterior(&pb, &cost));
    }
    let m = x.nrows().max(1) as f64;
    Ok(ThetaComparison {
        distance: sums.iter().fold(0.0f64, |a, s| a.max(s / m)),
        accuracy_a: accuracy(&labels_a, truth),
        accuracy_b: accuracy(&labels_b, truth),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asymmetric_cost_prefers_cheaper_error() {
        let cost = CostMatrix::new(vec![vec![0.0, 10.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(assign_from_posterior(&[0.5, 0.5], &cost), 0);
        assert_eq!(assign_from_posterior(&[0.5, 0.5], &CostMatrix::uniform(2)), 0);
        assert_eq!(assign_from_posterior(&[0.0, 0.0, 1.0], &CostMatrix::uniform(3)), 2);
    }

    #[test]
    fn hand_evaluated_cost() {
        let cost = CostMatrix::new(vec![vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let s = empirical_cost(&[0, 1, 1, 1], &[0, 0, 1, 1], &cost, Some(&[0.5, 0.5])).unwrap();
        assert!((s.cost - 0.5).abs() < 1e-15);
        assert_eq!(empirical_cost(&[0, 1], &[0, 1], &cost, None).unwrap().cost, 0.0);
    }

    #[test]
    fn uniform_cost_is_error_rate() {
        let truth = [0, 1, 2, 2, 1, 0, 0];
        let pred = [0, 2, 2, 1, 1, 0, 1];
        let s = empirical_cost(&pred, &truth, &CostMatrix::uniform(3), None).unwrap();
        assert!((s.cost - (1.0 - accuracy(&pred, &truth))).abs() < 1e-15);
    }

    #[test]
    fn missing_class_is_skipped() {
        let s = empirical_cost(&[0, 0], &[0, 0], &CostMatrix::uniform(3), None).unwrap();
        assert_eq!(s.skipped_classes, vec![1, 2]);
    }

    #[test]
    fn cost_validation() {
        assert!(CostMatrix::new(vec![vec![1.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(CostMatrix::new(vec![vec![0.0, 0.0], vec![1.0, 0.0]]).is_err());
    }
}
