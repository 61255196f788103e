//! Empirical likelihood machinery: the Lagrange multiplier system for the
//! baseline masses, the masses themselves, the profile log-EL and the fitted
//! class distribution functions.
//!
//! With `Q_k(x) = exp(gamma_k' phi_e(x)) - 1` and
//! `A_i(lambda) = 1 + sum_k lambda_k Q_k(x_i)`, the multipliers solve
//! `sum_i Q_k(x_i) / A_i = 0` and the masses are `p_i = 1 / (N A_i)`.
//! The multipliers maximise the concave function `G(lambda) = sum_i log A_i`
//! over the region where every `A_i > 0`, which is what the solver does.
//!
//! Log-EL values drop the constant `-N log N`; they are comparable between
//! calls on the same data only.

use nalgebra::{DMatrix, DVector};

use crate::drm::{dot, BasisSpec, ModelData, OslsDataset, Theta};
use crate::em::ElSolution;
use crate::error::{OslsError, Result};

const MAX_NEWTON: usize = 200;
const TARGET_RESIDUAL: f64 = 1e-15;
/// Success threshold for the max-norm residual of the multiplier equations.
pub const LAMBDA_TOLERANCE: f64 = 1e-10;
const ZERO_COLUMN: f64 = 1e-14;

/// Solved Lagrange multipliers.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaSolution {
    pub lambda: Vec<f64>,
    /// `max_k |(1/N) sum_i Q_k(x_i) / A_i|`.
    pub residual_norm: f64,
    /// `min_i A_i`.
    pub min_denominator: f64,
    pub iterations: usize,
    /// Number of clamped exponentials while forming `Q`.
    pub clamps: usize,
}

/// Baseline point masses `p_i` over the pooled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ElWeights {
    pub p: Vec<f64>,
}

impl ElWeights {
    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    /// `max_k |sum_i p_i Q_k(x_i)|` for a given ratio matrix.
    pub fn constraint_residual(&self, ratios: &[f64], k: usize) -> f64 {
        (0..k)
            .map(|c| {
                self.p
                    .iter()
                    .enumerate()
                    .map(|(i, p)| p * (ratios[i * k + c] - 1.0))
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Point masses of `F_k` on the pooled sample; `<=` is componentwise.
#[derive(Clone, Debug)]
pub struct EmpiricalCdf {
    pub class: usize,
    pub points: Vec<Vec<f64>>,
    pub masses: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// `F(x) = sum_i mass_i I(x_i <= x)` with componentwise comparison.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.points
            .iter()
            .zip(&self.masses)
            .filter(|(pt, _)| pt.iter().zip(x).all(|(a, b)| a <= b))
            .map(|(_, m)| m)
            .sum()
    }

    /// Marginal distribution function of one coordinate at `t`.
    pub fn eval_coordinate(&self, coord: usize, t: f64) -> f64 {
        self.points
            .iter()
            .zip(&self.masses)
            .filter(|(pt, _)| pt[coord] <= t)
            .map(|(_, m)| m)
            .sum()
    }
}

/// Solves the multiplier system for a row-major `N x K` matrix of
/// `Q_k(x_i)` values.
pub fn solve_lambda_q(q: &[f64], k: usize) -> Result<LambdaSolution> {
    if k == 0 || !q.len().is_multiple_of(k) || q.is_empty() {
        return Err(OslsError::InvalidInput("Q must be a non-empty N x K matrix".into()));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(OslsError::InvalidInput("non-finite Q value".into()));
    }
    let total = q.len() / k;
    let nf = total as f64;

    // Columns that vanish identically keep lambda_k = 0.
    let mut active = Vec::with_capacity(k);
    for c in 0..k {
        let (mut pos, mut neg) = (false, false);
        for i in 0..total {
            let v = q[i * k + c];
            pos |= v > ZERO_COLUMN;
            neg |= v < -ZERO_COLUMN;
        }
        match (pos, neg) {
            (false, false) => {}
            (true, true) => active.push(c),
            _ => {
                return Err(OslsError::NoInteriorRoot(format!(
                    "column {} of Q never changes sign, so sum_i Q/A cannot vanish for any \
                     feasible lambda (every A_i > 0)",
                    c + 1
                )))
            }
        }
    }
    let mut lambda = vec![0.0; k];
    if active.is_empty() {
        return Ok(LambdaSolution {
            lambda,
            residual_norm: 0.0,
            min_denominator: 1.0,
            iterations: 0,
            clamps: 0,
        });
    }
    let ka = active.len();
    let qa: Vec<f64> = (0..total)
        .flat_map(|i| active.iter().map(move |&c| q[i * k + c]))
        .collect();
    let mut lam = vec![0.0; ka];
    let mut denom = vec![1.0; total];
    let objective = |lam: &[f64], denom: &mut [f64]| -> Option<f64> {
        let mut g = 0.0;
        for (i, a) in denom.iter_mut().enumerate() {
            *a = 1.0 + dot(lam, &qa[i * ka..(i + 1) * ka]);
            if *a <= 0.0 || !a.is_finite() {
                return None;
            }
            g += a.ln();
        }
        Some(g)
    };
    let mut value = objective(&lam, &mut denom).expect("lambda = 0 is feasible");
    let mut grad = vec![0.0; ka];
    let mut hess = DMatrix::<f64>::zeros(ka, ka);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    let mut trial = vec![0.0; total];
    let mut previous = f64::INFINITY;
    while iterations < MAX_NEWTON {
        grad.iter_mut().for_each(|g| *g = 0.0);
        hess.fill(0.0);
        for (i, a) in denom.iter().enumerate() {
            let row = &qa[i * ka..(i + 1) * ka];
            let inv = 1.0 / a;
            let inv2 = inv * inv;
            for r in 0..ka {
                grad[r] += row[r] * inv;
                for c in 0..=r {
                    hess[(r, c)] += row[r] * row[c] * inv2;
                }
            }
        }
        residual = grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs())) / nf;
        // Past the tolerance, stop once Newton no longer halves the residual.
        if residual <= TARGET_RESIDUAL
            || (residual <= 1e-3 * LAMBDA_TOLERANCE && residual > 0.5 * previous)
        {
            break;
        }
        previous = residual;
        iterations += 1;
        for r in 0..ka {
            for c in 0..r {
                hess[(c, r)] = hess[(r, c)];
            }
        }
        let step = newton_direction(&hess, &grad)?;
        let slope: f64 = dot(&step, &grad);
        // Predicted gains below rounding of G cannot be seen by Armijo.
        let flat = slope <= 1e-13 * (1.0 + value.abs());
        let mut t = 1.0;
        let mut accepted = false;
        let mut candidate = vec![0.0; ka];
        while t > 1e-30 {
            for r in 0..ka {
                candidate[r] = lam[r] + t * step[r];
            }
            if let Some(v) = objective(&candidate, &mut trial) {
                if v >= value + 1e-4 * t * slope || flat || (v >= value && t < 1e-8) {
                    lam.copy_from_slice(&candidate);
                    std::mem::swap(&mut denom, &mut trial);
                    value = v;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        if lam.iter().any(|v| v.abs() > 1e10) {
            let (idx, min_a) = argmin(&denom);
            return Err(OslsError::NoInteriorRoot(format!(
                "multipliers diverge (|lambda| > 1e10); boundary certificate: A_{} = {:e} \
                 approaches 0",
                idx + 1,
                min_a
            )));
        }
    }
    if residual > LAMBDA_TOLERANCE {
        let (idx, min_a) = argmin(&denom);
        return Err(OslsError::NonConvergence(format!(
            "lambda residual {residual:e} after {iterations} Newton steps; min A_{} = {min_a:e}",
            idx + 1
        )));
    }
    for (slot, &c) in active.iter().enumerate() {
        lambda[c] = lam[slot];
    }
    let (_, min_denominator) = argmin(&denom);
    Ok(LambdaSolution { lambda, residual_norm: residual, min_denominator, iterations, clamps: 0 })
}

fn argmin(v: &[f64]) -> (usize, f64) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, x)| if x < acc.1 { (i, x) } else { acc })
}

/// Solves `H d = g` for symmetric positive (semi)definite `H`, adding a ridge
/// when the Cholesky factorisation fails.
pub(crate) fn newton_direction(hess: &DMatrix<f64>, grad: &[f64]) -> Result<Vec<f64>> {
    let g = DVector::from_column_slice(grad);
    let scale = hess.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let mut ridge = 0.0;
    for _ in 0..40 {
        let mut h = hess.clone();
        if ridge > 0.0 {
            for i in 0..h.nrows() {
                h[(i, i)] += ridge;
            }
        }
        if let Some(chol) = h.cholesky() {
            let d = chol.solve(&g);
            if d.iter().all(|v| v.is_finite()) {
                return Ok(d.as_slice().to_vec());
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 10.0 };
    }
    Err(OslsError::Singular { what: "Newton Hessian".into(), condition: f64::INFINITY })
}

fn q_matrix(data: &ModelData, theta: &Theta) -> (Vec<f64>, Vec<f64>, usize) {
    let mut clamps = 0;
    let ratios = data.ratios(theta, &mut clamps);
    let q = ratios.iter().map(|r| r - 1.0).collect();
    (ratios, q, clamps)
}

/// Multipliers for the tilt block of `theta` on prepared data.
pub fn solve_lambda_prepared(theta: &Theta, data: &ModelData) -> Result<LambdaSolution> {
    if theta.k() != data.k() || theta.dim() != data.dim() {
        return Err(OslsError::DimensionMismatch { expected: data.dim(), found: theta.dim() });
    }
    let (_, q, clamps) = q_matrix(data, theta);
    let mut sol = solve_lambda_q(&q, data.k())?;
    sol.clamps = clamps;
    Ok(sol)
}

/// Multipliers solving the EL constraint system for the tilts in `theta`
/// (the proportions are ignored).
pub fn solve_lambda(theta: &Theta, dataset: &OslsDataset, basis: &BasisSpec) -> Result<LambdaSolution> {
    solve_lambda_prepared(theta, &ModelData::new(dataset, basis)?)
}

/// `p_i = 1 / (N A_i)` for given tilts and multipliers.
pub fn el_weights_prepared(theta: &Theta, lambda: &[f64], data: &ModelData) -> Result<ElWeights> {
    let k = data.k();
    if lambda.len() != k {
        return Err(OslsError::DimensionMismatch { expected: k, found: lambda.len() });
    }
    let (_, q, _) = q_matrix(data, theta);
    let nf = data.total() as f64;
    let mut p = Vec::with_capacity(data.total());
    for i in 0..data.total() {
        let a = 1.0 + dot(lambda, &q[i * k..(i + 1) * k]);
        if a <= 0.0 {
            return Err(OslsError::Infeasible(format!("A_{} = {a:e} is not positive", i + 1)));
        }
        p.push(1.0 / (nf * a));
    }
    Ok(ElWeights { p })
}

pub fn el_weights(
    theta: &Theta,
    lambda: &[f64],
    dataset: &OslsDataset,
    basis: &BasisSpec,
) -> Result<ElWeights> {
    el_weights_prepared(theta, lambda, &ModelData::new(dataset, basis)?)
}

/// Profile log-EL together with the multipliers that produced it.
#[derive(Clone, Debug)]
pub struct ProfileValue {
    pub value: f64,
    pub lambda: LambdaSolution,
}

/// Sum over training rows of `gamma_{y_i}' phi_e(x_i)`.
pub(crate) fn train_linear_term(theta: &Theta, data: &ModelData) -> f64 {
    data.labels()
        .iter()
        .enumerate()
        .filter(|(_, &y)| y > 0)
        .map(|(i, &y)| dot(theta.gamma(y), data.row(i)))
        .sum()
}

/// Sum over test rows of `log B(x_j; theta)` given the ratio matrix.
pub(crate) fn test_mixture_term(theta: &Theta, data: &ModelData, ratios: &[f64]) -> Result<f64> {
    let k = data.k();
    let pi0 = 1.0 - theta.pi().iter().sum::<f64>();
    let mut total = 0.0;
    for j in 0..data.m() {
        let i = data.n() + j;
        let b = pi0 + dot(theta.pi(), &ratios[i * k..(i + 1) * k]);
        if b <= 0.0 || !b.is_finite() {
            return Err(OslsError::NonpositiveMixture { row: j, value: b });
        }
        total += b.ln();
    }
    Ok(total)
}

pub fn profile_log_el_prepared(theta: &Theta, data: &ModelData) -> Result<ProfileValue> {
    if theta.k() != data.k() || theta.dim() != data.dim() {
        return Err(OslsError::DimensionMismatch { expected: data.dim(), found: theta.dim() });
    }
    let k = data.k();
    let (ratios, q, clamps) = q_matrix(data, theta);
    let mut lambda = solve_lambda_q(&q, k)?;
    lambda.clamps = clamps;
    let mut value = train_linear_term(theta, data) + test_mixture_term(theta, data, &ratios)?;
    for i in 0..data.total() {
        value -= (1.0 + dot(&lambda.lambda, &q[i * k..(i + 1) * k])).ln();
    }
    Ok(ProfileValue { value, lambda })
}

/// Profile log-EL `l(theta)` (constant `-N log N` dropped).
pub fn profile_log_el(theta: &Theta, dataset: &OslsDataset, basis: &BasisSpec) -> Result<f64> {
    Ok(profile_log_el_prepared(theta, &ModelData::new(dataset, basis)?)?.value)
}

/// Fitted distribution function of class `k` (`k = 0` is the baseline).
pub fn fitted_cdf(
    solution: &ElSolution,
    dataset: &OslsDataset,
    basis: &BasisSpec,
    k: usize,
) -> Result<EmpiricalCdf> {
    let theta = &solution.theta_hat;
    if k > theta.k() {
        return Err(OslsError::InvalidInput(format!("class {k} outside 0..={}", theta.k())));
    }
    let data = ModelData::new(dataset, basis)?;
    let mut clamps = 0;
    let masses = solution
        .p_hat
        .p
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if k == 0 {
                *p
            } else {
                p * crate::drm::clamped_exp(dot(theta.gamma(k), data.row(i)), &mut clamps)
            }
        })
        .collect();
    let points = (0..dataset.total()).map(|i| dataset.pooled_row(i)).collect();
    Ok(EmpiricalCdf { class: k, points, masses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_q_gives_zero_lambda() {
        let sol = solve_lambda_q(&[0.0; 10], 2).unwrap();
        assert_eq!(sol.lambda, vec![0.0, 0.0]);
        assert_eq!(sol.residual_norm, 0.0);
    }

    #[test]
    fn two_point_closed_form() {
        // 1/(1+l) = 0.5/(1-0.5 l)  =>  1 - 0.5 l = 0.5 + 0.5 l  =>  l = 0.5
        let sol = solve_lambda_q(&[1.0, -0.5], 1).unwrap();
        assert_relative_eq!(sol.lambda[0], 0.5, epsilon = 1e-12);
        assert!(sol.residual_norm < 1e-12);
        // A = (1.5, 0.75) so p = (1/3, 2/3)
        let p: Vec<f64> = [1.5, 0.75].iter().map(|a| 1.0 / (2.0 * a)).collect();
        assert_relative_eq!(p[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn one_signed_column_has_no_root() {
        let err = solve_lambda_q(&[0.5, 1.0, 2.0], 1).unwrap_err();
        assert!(matches!(err, OslsError::NoInteriorRoot(_)), "{err}");
    }

    #[test]
    fn degenerate_column_is_pinned_at_zero() {
        // second column vanishes; first is the two-point case
        let sol = solve_lambda_q(&[1.0, 0.0, -0.5, 0.0], 2).unwrap();
        assert_relative_eq!(sol.lambda[0], 0.5, epsilon = 1e-12);
        assert_eq!(sol.lambda[1], 0.0);
    }

    #[test]
    fn residual_small_for_random_system() {
        let q: Vec<f64> = (0..300)
            .map(|i| ((i as f64 * 0.37).sin() * 2.0).exp() - 1.0)
            .collect();
        let sol = solve_lambda_q(&q, 3).unwrap();
        assert!(sol.residual_norm < 1e-12, "{}", sol.residual_norm);
        assert!(sol.min_denominator > 0.0);
    }

    #[test]
    fn uniform_weights_at_zero_tilt() {
        let ds = OslsDataset::from_rows(
            &[vec![0.1], vec![0.4], vec![0.9]],
            vec![0, 0, 0],
            &[vec![1.0], vec![2.0]],
            1,
        )
        .unwrap();
        let theta = Theta::zeros(1, 2, vec![0.3]).unwrap();
        let w = el_weights(&theta, &[0.0], &ds, &BasisSpec::Identity).unwrap();
        assert!(w.p.iter().all(|&p| (p - 0.2).abs() < 1e-15));
        assert_eq!(profile_log_el(&theta, &ds, &BasisSpec::Identity).unwrap(), 0.0);
    }
}
