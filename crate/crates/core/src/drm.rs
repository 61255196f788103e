//! Domain types for the open-set label shift model and the density ratio
//! model (DRM) primitives: basis expansion, log density ratios, the test
//! mixture term and the posterior class probabilities.
//!
//! Class `0` is the DRM baseline, classes `1..K-1` are the remaining known
//! classes and class `K` is the novel class that only appears in the test
//! sample. The baseline tilt `gamma_0` is identically zero and never stored.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{OslsError, Result};

/// Exponents are clamped to this magnitude before `exp` in EL formulas.
pub const EXP_CLAMP: f64 = 700.0;

/// `exp(x)` with the argument clamped to `[-EXP_CLAMP, EXP_CLAMP]`; bumps
/// `clamps` whenever the clamp was active.
#[inline]
pub fn clamped_exp(x: f64, clamps: &mut usize) -> f64 {
    if x > EXP_CLAMP {
        *clamps += 1;
        EXP_CLAMP.exp()
    } else if x < -EXP_CLAMP {
        *clamps += 1;
        (-EXP_CLAMP).exp()
    } else {
        x.exp()
    }
}

/// Feature map `phi(x)`; the extended map prepends a constant 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    /// `phi(x) = x`.
    Identity,
    /// Per-coordinate monomials `x_j, x_j^2, .., x_j^degree` (no cross terms).
    Polynomial { degree: usize },
    /// Feature rows already hold `phi(x)` (e.g. embeddings); passed through as-is.
    Precomputed { q: usize },
}

impl BasisSpec {
    /// Dimension `q` of `phi` for `d`-dimensional inputs.
    pub fn output_dim(&self, d: usize) -> usize {
        match self {
            BasisSpec::Identity => d,
            BasisSpec::Polynomial { degree } => d * degree,
            BasisSpec::Precomputed { q } => *q,
        }
    }

    fn check_input(&self, d: usize) -> Result<()> {
        match self {
            BasisSpec::Polynomial { degree } if *degree == 0 => Err(OslsError::InvalidInput(
                "polynomial basis needs degree >= 1".into(),
            )),
            BasisSpec::Precomputed { q } if *q != d => {
                Err(OslsError::DimensionMismatch { expected: *q, found: d })
            }
            _ => Ok(()),
        }
    }

    fn write_extended(&self, x: &[f64], out: &mut Vec<f64>) {
        out.push(1.0);
        match self {
            BasisSpec::Identity | BasisSpec::Precomputed { .. } => out.extend_from_slice(x),
            BasisSpec::Polynomial { degree } => {
                for &v in x {
                    let mut p = 1.0;
                    for _ in 0..*degree {
                        p *= v;
                        out.push(p);
                    }
                }
            }
        }
    }
}

/// Extended basis `phi_e(x) = (1, phi(x))`.
pub fn expand_basis(x: &[f64], spec: &BasisSpec) -> Result<Vec<f64>> {
    spec.check_input(x.len())?;
    let mut out = Vec::with_capacity(spec.output_dim(x.len()) + 1);
    spec.write_extended(x, &mut out);
    Ok(out)
}

/// Labelled training block plus unlabelled test block.
#[derive(Clone, Debug)]
pub struct OslsDataset {
    train_x: DMatrix<f64>,
    train_y: Vec<usize>,
    test_x: DMatrix<f64>,
    k_known: usize,
}

impl OslsDataset {
    /// Builds a dataset; `k_known` is the number of classes seen in training
    /// (labels must be exactly `0..k_known-1`, each present at least once).
    pub fn new(
        train_x: DMatrix<f64>,
        train_y: Vec<usize>,
        test_x: DMatrix<f64>,
        k_known: usize,
    ) -> Result<Self> {
        if k_known == 0 {
            return Err(OslsError::InvalidInput("need at least one known class".into()));
        }
        if train_x.nrows() != train_y.len() {
            return Err(OslsError::DimensionMismatch {
                expected: train_x.nrows(),
                found: train_y.len(),
            });
        }
        if train_x.ncols() != test_x.ncols() {
            return Err(OslsError::DimensionMismatch {
                expected: train_x.ncols(),
                found: test_x.ncols(),
            });
        }
        if test_x.nrows() == 0 {
            return Err(OslsError::InvalidInput("test block is empty".into()));
        }
        Self::checked(train_x, train_y, test_x, k_known)
    }

    /// Training rows only (`m = 0`). Likelihoods can be evaluated on such a
    /// dataset but it cannot be fitted.
    pub fn training_only(train_x: DMatrix<f64>, train_y: Vec<usize>, k_known: usize) -> Result<Self> {
        if k_known == 0 {
            return Err(OslsError::InvalidInput("need at least one known class".into()));
        }
        if train_x.nrows() != train_y.len() {
            return Err(OslsError::DimensionMismatch { expected: train_x.nrows(), found: train_y.len() });
        }
        let d = train_x.ncols();
        Self::checked(train_x, train_y, DMatrix::zeros(0, d), k_known)
    }

    fn checked(
        train_x: DMatrix<f64>,
        train_y: Vec<usize>,
        test_x: DMatrix<f64>,
        k_known: usize,
    ) -> Result<Self> {
        let mut counts = vec![0usize; k_known];
        for (i, &y) in train_y.iter().enumerate() {
            if y >= k_known {
                return Err(OslsError::InvalidInput(format!(
                    "training label {y} at row {i} outside 0..{k_known}"
                )));
            }
            counts[y] += 1;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(OslsError::InvalidInput(format!("class {k} has no training rows")));
        }
        if train_x.iter().chain(test_x.iter()).any(|v| !v.is_finite()) {
            return Err(OslsError::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self { train_x, train_y, test_x, k_known })
    }

    /// Convenience constructor from row vectors.
    pub fn from_rows(
        train: &[Vec<f64>],
        train_y: Vec<usize>,
        test: &[Vec<f64>],
        k_known: usize,
    ) -> Result<Self> {
        Self::new(rows_to_matrix(train)?, train_y, rows_to_matrix(test)?, k_known)
    }

    pub fn train_x(&self) -> &DMatrix<f64> {
        &self.train_x
    }

    pub fn train_y(&self) -> &[usize] {
        &self.train_y
    }

    pub fn test_x(&self) -> &DMatrix<f64> {
        &self.test_x
    }

    /// Number of known classes `K`; the novel class has index `K`.
    pub fn k_known(&self) -> usize {
        self.k_known
    }

    pub fn n(&self) -> usize {
        self.train_x.nrows()
    }

    pub fn m(&self) -> usize {
        self.test_x.nrows()
    }

    pub fn total(&self) -> usize {
        self.n() + self.m()
    }

    pub fn dim(&self) -> usize {
        self.train_x.ncols()
    }

    /// Training counts `n_0..n_{K-1}`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.k_known];
        for &y in &self.train_y {
            counts[y] += 1;
        }
        counts
    }

    /// Fractions `c_k = n_k / N` followed by `c = m / N`.
    pub fn fractions(&self) -> (Vec<f64>, f64) {
        let total = self.total() as f64;
        let ck = self.class_counts().iter().map(|&c| c as f64 / total).collect();
        (ck, self.m() as f64 / total)
    }

    /// Row `i` of the pooled sample (training rows first, then test rows).
    pub fn pooled_row(&self, i: usize) -> Vec<f64> {
        if i < self.n() {
            self.train_x.row(i).iter().copied().collect()
        } else {
            self.test_x.row(i - self.n()).iter().copied().collect()
        }
    }

    /// Same dataset with the test rows permuted by `perm`.
    pub fn with_test_permutation(&self, perm: &[usize]) -> Self {
        let test_x = DMatrix::from_fn(self.m(), self.dim(), |r, c| self.test_x[(perm[r], c)]);
        Self { test_x, ..self.clone() }
    }
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != d) {
        return Err(OslsError::DimensionMismatch { expected: d, found: bad.len() });
    }
    Ok(DMatrix::from_fn(rows.len(), d, |r, c| rows[r][c]))
}

/// Dataset expanded through a basis: the pooled `N x (q+1)` design of
/// `phi_e` rows (row-major), labels and class counts.
#[derive(Clone, Debug)]
pub struct ModelData {
    design: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    counts: Vec<usize>,
    n: usize,
    m: usize,
    k: usize,
    basis: BasisSpec,
    outer: OnceLock<Vec<f64>>,
}

impl ModelData {
    pub fn new(dataset: &OslsDataset, basis: &BasisSpec) -> Result<Self> {
        let d = dataset.dim();
        basis.check_input(d)?;
        let dim = basis.output_dim(d) + 1;
        let total = dataset.total();
        let mut design = Vec::with_capacity(total * dim);
        let mut row = Vec::with_capacity(d);
        for i in 0..total {
            row.clear();
            if i < dataset.n() {
                row.extend(dataset.train_x.row(i).iter());
            } else {
                row.extend(dataset.test_x.row(i - dataset.n()).iter());
            }
            basis.write_extended(&row, &mut design);
        }
        Ok(Self {
            design,
            dim,
            labels: dataset.train_y.clone(),
            counts: dataset.class_counts(),
            n: dataset.n(),
            m: dataset.m(),
            k: dataset.k_known,
            basis: basis.clone(),
            outer: OnceLock::new(),
        })
    }

    /// Length of `phi_e`, i.e. `q + 1`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn total(&self) -> usize {
        self.n + self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Training counts `n_0..n_K` with `n_K = 0`.
    pub fn counts_with_novel(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.counts.iter().map(|&v| v as f64).collect();
        c.push(0.0);
        c
    }

    /// `phi_e` of pooled row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.design[i * self.dim..(i + 1) * self.dim]
    }

    /// Whole row-major design.
    pub fn design(&self) -> &[f64] {
        &self.design
    }

    /// Packed `phi_e phi_e'` upper triangles, computed on first use.
    pub(crate) fn outer_products(&self) -> &[f64] {
        self.outer.get_or_init(|| crate::logit::packed_outer_products(&self.design, self.dim))
    }

    pub(crate) fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.design.chunks_exact(self.dim)
    }

    /// Row-major `N x K` matrix of clamped ratios `exp(gamma_k' phi_e(x_i))`.
    pub fn ratios(&self, theta: &Theta, clamps: &mut usize) -> Vec<f64> {
        let k = self.k;
        let mut out = Vec::with_capacity(self.total() * k);
        for row in self.rows() {
            for c in 1..=k {
                out.push(clamped_exp(dot(theta.gamma(c), row), clamps));
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Parameter block `theta = (gamma_1..gamma_K, pi_1..pi_K)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    k: usize,
    dim: usize,
    /// Row-major `K x (q+1)`: row `k-1` is `(alpha_k, beta_k)`.
    gamma: Vec<f64>,
    pi: Vec<f64>,
}

impl Theta {
    /// `gamma[k-1] = (alpha_k, beta_k)` for `k = 1..K`; `pi = (pi_1..pi_K)`.
    pub fn new(gamma: Vec<Vec<f64>>, pi: Vec<f64>) -> Result<Self> {
        let k = gamma.len();
        if k == 0 || pi.len() != k {
            return Err(OslsError::InvalidInput(format!(
                "theta needs K >= 1 gamma blocks and K proportions (got {} and {})",
                k,
                pi.len()
            )));
        }
        let dim = gamma[0].len();
        if dim == 0 || gamma.iter().any(|g| g.len() != dim) {
            return Err(OslsError::InvalidInput("gamma blocks must share one length".into()));
        }
        let theta = Self { k, dim, gamma: gamma.concat(), pi };
        theta.validate()?;
        Ok(theta)
    }

    /// All tilts zero.
    pub fn zeros(k: usize, dim: usize, pi: Vec<f64>) -> Result<Self> {
        Self::new(vec![vec![0.0; dim]; k], pi)
    }

    pub(crate) fn from_parts(k: usize, dim: usize, gamma: Vec<f64>, pi: Vec<f64>) -> Self {
        debug_assert_eq!(gamma.len(), k * dim);
        debug_assert_eq!(pi.len(), k);
        Self { k, dim, gamma, pi }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.iter().any(|v| !v.is_finite()) {
            return Err(OslsError::DegenerateParameter("non-finite gamma".into()));
        }
        if self.pi.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(OslsError::InvalidInput(format!("proportions {:?} outside [0,1]", self.pi)));
        }
        let total: f64 = self.pi.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(OslsError::InvalidInput(format!("proportions sum to {total} > 1")));
        }
        Ok(())
    }

    /// Number of known classes `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Length of each gamma block (`q + 1`).
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `gamma_k` for `k = 1..=K`.
    #[inline]
    pub fn gamma(&self, k: usize) -> &[f64] {
        &self.gamma[(k - 1) * self.dim..k * self.dim]
    }

    pub(crate) fn gamma_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.gamma[(k - 1) * self.dim..k * self.dim]
    }

    pub fn gamma_flat(&self) -> &[f64] {
        &self.gamma
    }

    pub fn alpha(&self, k: usize) -> f64 {
        if k == 0 {
            0.0
        } else {
            self.gamma(k)[0]
        }
    }

    pub fn beta(&self, k: usize) -> &[f64] {
        &self.gamma(k)[1..]
    }

    /// `(pi_1..pi_K)`.
    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub(crate) fn pi_mut(&mut self) -> &mut [f64] {
        &mut self.pi
    }

    /// `pi_k` for `k = 0..=K` with `pi_0 = 1 - sum(pi_1..pi_K)`.
    pub fn proportion(&self, k: usize) -> f64 {
        if k == 0 {
            self.pi0()
        } else {
            self.pi[k - 1]
        }
    }

    pub fn pi0(&self) -> f64 {
        (1.0 - self.pi.iter().sum::<f64>()).max(0.0)
    }

    /// Full proportion vector `(pi_0..pi_K)`.
    pub fn proportions(&self) -> Vec<f64> {
        (0..=self.k).map(|k| self.proportion(k)).collect()
    }

    /// Adds `shift` to every stored `alpha_k` (the implicit `alpha_0` stays 0).
    pub fn shift_alphas(&mut self, shift: f64) {
        for k in 1..=self.k {
            self.gamma_mut(k)[0] += shift;
        }
    }

    /// Flattened `(gamma_1, .., gamma_K, pi_1, .., pi_K)`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.gamma.clone();
        v.extend_from_slice(&self.pi);
        v
    }
}

/// `gamma_k' phi_e(x)`; zero for the baseline `k = 0`.
pub fn log_density_ratio(x: &[f64], basis: &BasisSpec, theta: &Theta, k: usize) -> Result<f64> {
    if k > theta.k() {
        return Err(OslsError::InvalidInput(format!("class {k} outside 0..={}", theta.k())));
    }
    let phi = expand_basis(x, basis)?;
    check_dim(&phi, theta)?;
    Ok(if k == 0 { 0.0 } else { dot(theta.gamma(k), &phi) })
}

fn check_dim(phi: &[f64], theta: &Theta) -> Result<()> {
    if phi.len() != theta.dim() {
        return Err(OslsError::DimensionMismatch { expected: theta.dim(), found: phi.len() });
    }
    Ok(())
}

/// Posterior class probabilities `C_k(x; theta)`, `k = 0..=K`, from an
/// already expanded `phi_e(x)`. Computed with a max shift.
pub fn posterior_phi(phi: &[f64], theta: &Theta) -> Result<Vec<f64>> {
    check_dim(phi, theta)?;
    let k = theta.k();
    let mut logits = Vec::with_capacity(k + 1);
    logits.push(ln_or_neg_inf(theta.pi0()));
    for c in 1..=k {
        logits.push(ln_or_neg_inf(theta.pi[c - 1]) + dot(theta.gamma(c), phi));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(OslsError::DegenerateParameter(
            "posterior denominator vanishes for every class".into(),
        ));
    }
    let mut total = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        total += *l;
    }
    for l in logits.iter_mut() {
        *l /= total;
    }
    Ok(logits)
}

#[inline]
fn ln_or_neg_inf(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Posterior class probabilities for a raw feature vector.
pub fn posterior(x: &[f64], basis: &BasisSpec, theta: &Theta) -> Result<Vec<f64>> {
    posterior_phi(&expand_basis(x, basis)?, theta)
}

/// `B(x; theta) = 1 + sum_k pi_k (exp(gamma_k' phi_e) - 1)` from `phi_e`.
pub fn mixture_term_phi(phi: &[f64], theta: &Theta) -> Result<f64> {
    check_dim(phi, theta)?;
    let mut clamps = 0;
    let mut b = 1.0;
    for c in 1..=theta.k() {
        b += theta.pi[c - 1] * (clamped_exp(dot(theta.gamma(c), phi), &mut clamps) - 1.0);
    }
    if b <= 0.0 {
        return Err(OslsError::NonpositiveMixture { row: 0, value: b });
    }
    Ok(b)
}

/// The test-density factor `B(x; theta)` so that `P_te(x) = f_0(x) B(x; theta)`.
pub fn mixture_log_density_term(x: &[f64], basis: &BasisSpec, theta: &Theta) -> Result<f64> {
    mixture_term_phi(&expand_basis(x, basis)?, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn theta1(alpha: f64, beta: f64, pi: f64) -> Theta {
        Theta::new(vec![vec![alpha, beta]], vec![pi]).unwrap()
    }

    #[test]
    fn expand_identity_and_polynomial() {
        assert_eq!(expand_basis(&[2.0, -1.0], &BasisSpec::Identity).unwrap(), vec![1.0, 2.0, -1.0]);
        let poly = BasisSpec::Polynomial { degree: 2 };
        assert_eq!(expand_basis(&[3.0], &poly).unwrap(), vec![1.0, 3.0, 9.0]);
        let pre = BasisSpec::Precomputed { q: 1 };
        assert_eq!(expand_basis(&[0.5], &pre).unwrap(), vec![1.0, 0.5]);
        assert!(matches!(
            expand_basis(&[0.5, 1.0], &pre),
            Err(OslsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn log_ratio_examples() {
        let t = theta1(1.0, 2.0, 0.3);
        assert_eq!(log_density_ratio(&[123.0], &BasisSpec::Identity, &t, 0).unwrap(), 0.0);
        assert_relative_eq!(log_density_ratio(&[0.5], &BasisSpec::Identity, &t, 1).unwrap(), 2.0);
        let t2 = Theta::new(vec![vec![0.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]], vec![0.2, 0.2]).unwrap();
        let lr = log_density_ratio(&[2f64.ln(), 0.0], &BasisSpec::Identity, &t2, 2).unwrap();
        assert_relative_eq!(lr.exp(), 2.0, epsilon = 1e-14);
        assert!(log_density_ratio(&[0.0, 0.0], &BasisSpec::Identity, &t2, 3).is_err());
    }

    #[test]
    fn posterior_examples() {
        let t = Theta::zeros(3, 2, vec![0.2, 0.2, 0.4]).unwrap();
        let p = posterior(&[0.7], &BasisSpec::Identity, &t).unwrap();
        for (a, b) in p.iter().zip([0.2, 0.2, 0.2, 0.4]) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
        let t = theta1(0.3, -1.0, 1.0);
        assert_eq!(posterior(&[5.0], &BasisSpec::Identity, &t).unwrap(), vec![0.0, 1.0]);
        let t = theta1(0.0, 1.0, 0.5);
        let p = posterior(&[3f64.ln()], &BasisSpec::Identity, &t).unwrap();
        assert_relative_eq!(p[0], 0.25, epsilon = 1e-14);
        assert_relative_eq!(p[1], 0.75, epsilon = 1e-14);
    }

    #[test]
    fn mixture_term_examples() {
        let t = Theta::zeros(2, 2, vec![0.3, 0.3]).unwrap();
        assert_eq!(mixture_log_density_term(&[4.0], &BasisSpec::Identity, &t).unwrap(), 1.0);
        let t = theta1(3f64.ln(), 0.0, 0.5);
        assert_relative_eq!(
            mixture_log_density_term(&[9.0], &BasisSpec::Identity, &t).unwrap(),
            2.0,
            epsilon = 1e-14
        );
        let t = theta1(5.0, 1.0, 0.0);
        assert_eq!(mixture_log_density_term(&[-2.0], &BasisSpec::Identity, &t).unwrap(), 1.0);
    }

    #[test]
    fn theta_rejects_bad_proportions() {
        assert!(Theta::new(vec![vec![0.0]], vec![1.2]).is_err());
        assert!(Theta::new(vec![vec![0.0], vec![0.0]], vec![0.6, 0.6]).is_err());
        assert!(Theta::new(vec![vec![0.0]], vec![-0.1]).is_err());
    }

    #[test]
    fn dataset_validation() {
        let train = vec![vec![0.0], vec![1.0]];
        let test = vec![vec![0.5]];
        assert!(OslsDataset::from_rows(&train, vec![0, 1], &test, 2).is_ok());
        // class 1 missing
        assert!(OslsDataset::from_rows(&train, vec![0, 0], &test, 2).is_err());
        // label out of range
        assert!(OslsDataset::from_rows(&train, vec![0, 2], &test, 2).is_err());
        // dimension mismatch between blocks
        assert!(OslsDataset::from_rows(&train, vec![0, 0], &[vec![0.5, 1.0]], 1).is_err());
    }
}
