//! Weighted multinomial logistic regression with class 0 as reference,
//! solved by Newton's method with a backtracking line search.
//!
//! Every row carries a nonnegative weight for each of the `K + 1` classes.
//! The log-likelihood is
//! `sum_i [ sum_{k>=1} v_ik eta_ik - t_i log(1 + sum_{k>=1} exp(eta_ik)) ]`
//! with `eta_ik = c_k' phi_e(x_i)` and `t_i = sum_k v_ik`; it is concave in
//! the coefficients.

use nalgebra::DMatrix;

use crate::el::newton_direction;
use crate::error::{OslsError, Result};

/// Coefficients larger than this in magnitude are treated as separation.
pub const COEFFICIENT_CAP: f64 = 1e4;
/// Average log-likelihood per unit weight above `-SEPARATION_LOGLIK` means the
/// classes are perfectly separated and the maximiser does not exist.
const SEPARATION_LOGLIK: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
pub struct NewtonControls {
    /// Target max-norm of the gradient.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonControls {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 100 }
    }
}

/// Design rows `phi_e(x_i)` with cached packed outer products.
pub struct LogitDesign<'a> {
    rows: &'a [f64],
    dim: usize,
    outer: &'a [f64],
}

impl<'a> LogitDesign<'a> {
    /// `outer` must hold, per row, the upper triangle of `phi phi'` as
    /// produced by [`packed_outer_products`].
    pub fn new(rows: &'a [f64], dim: usize, outer: &'a [f64]) -> Self {
        Self { rows, dim, outer }
    }

    fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// Upper triangles (row by row) of `phi_i phi_i'` for all rows.
pub fn packed_outer_products(rows: &[f64], dim: usize) -> Vec<f64> {
    let tri = dim * (dim + 1) / 2;
    let mut out = Vec::with_capacity(rows.len() / dim * tri);
    for row in rows.chunks_exact(dim) {
        for a in 0..dim {
            for b in a..dim {
                out.push(row[a] * row[b]);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LogitFit {
    /// Row-major `K x dim`; rows of inactive classes are left untouched.
    pub coef: Vec<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Reference-class probability `P(class 0 | x_i)` at the solution.
    pub p0: Vec<f64>,
}

/// Fits the weighted model. `targets` is row-major `N x (K+1)`; `active[k-1]`
/// says whether class `k` enters the softmax at all. `init` seeds the
/// active coefficient rows.
pub fn fit_weighted_logit(
    design: &LogitDesign<'_>,
    targets: &[f64],
    k: usize,
    active: &[bool],
    init: &[f64],
    controls: NewtonControls,
) -> Result<LogitFit> {
    let dim = design.dim;
    let n = design.len();
    assert_eq!(targets.len(), n * (k + 1));
    assert_eq!(init.len(), k * dim);
    let act: Vec<usize> = (0..k).filter(|&c| active[c]).collect();
    let ka = act.len();
    let mut coef = init.to_vec();
    if ka == 0 {
        return Ok(LogitFit {
            coef,
            loglik: 0.0,
            grad_norm: 0.0,
            iterations: 0,
            p0: vec![1.0; n],
        });
    }
    let np = ka * dim;
    let tri = dim * (dim + 1) / 2;
    let mut probs = vec![0.0; n * ka];
    let mut p0 = vec![0.0; n];
    let mut eta = vec![0.0; ka];

    let evaluate = |coef: &[f64], probs: &mut [f64], p0: &mut [f64], eta: &mut [f64]| -> f64 {
        let mut ll = 0.0;
        for i in 0..n {
            let row = design.row(i);
            let v = &targets[i * (k + 1)..(i + 1) * (k + 1)];
            let mut max = 0.0f64;
            for (s, &c) in act.iter().enumerate() {
                eta[s] = crate::drm::dot(&coef[c * dim..(c + 1) * dim], row);
                max = max.max(eta[s]);
            }
            let mut denom = (-max).exp();
            for e in eta.iter() {
                denom += (e - max).exp();
            }
            let lse = max + denom.ln();
            let total: f64 = v.iter().sum();
            let mut lin = 0.0;
            for (s, &c) in act.iter().enumerate() {
                lin += v[c + 1] * eta[s];
                probs[i * ka + s] = (eta[s] - lse).exp();
            }
            p0[i] = (-lse).exp();
            ll += lin - total * lse;
        }
        ll
    };

    let mut ll = evaluate(&coef, &mut probs, &mut p0, &mut eta);
    let mut grad = vec![0.0; np];
    let mut hess = DMatrix::<f64>::zeros(np, np);
    let mut grad_norm;
    let mut previous = f64::INFINITY;
    let floor = 1e-6 * (n as f64).max(1.0);
    let mut iterations = 0;
    let mut trial = coef.clone();
    let mut trial_probs = probs.clone();
    let mut trial_p0 = p0.clone();
    let mut weights = vec![0.0; ka * (ka + 1) / 2];
    let mut packed = vec![0.0; weights.len() * tri];
    loop {
        grad.iter_mut().for_each(|g| *g = 0.0);
        packed.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            let row = design.row(i);
            let v = &targets[i * (k + 1)..(i + 1) * (k + 1)];
            let total: f64 = v.iter().sum();
            if total == 0.0 {
                continue;
            }
            let pr = &probs[i * ka..(i + 1) * ka];
            for (s, &c) in act.iter().enumerate() {
                let r = v[c + 1] - total * pr[s];
                for (g, x) in grad[s * dim..(s + 1) * dim].iter_mut().zip(row) {
                    *g += r * x;
                }
            }
            let mut idx = 0;
            for a in 0..ka {
                for b in a..ka {
                    let delta = if a == b { pr[a] } else { 0.0 };
                    weights[idx] = total * (delta - pr[a] * pr[b]);
                    idx += 1;
                }
            }
            let outer = &design.outer[i * tri..(i + 1) * tri];
            for (blk, &w) in weights.iter().enumerate() {
                if w != 0.0 {
                    for (acc, o) in packed[blk * tri..(blk + 1) * tri].iter_mut().zip(outer) {
                        *acc += w * o;
                    }
                }
            }
        }
        // Expand the packed (class-pair, upper-triangle) sums into the full matrix.
        let mut blk = 0;
        for a in 0..ka {
            for b in a..ka {
                let mut o = 0;
                for r in 0..dim {
                    for c in r..dim {
                        let v = packed[blk * tri + o];
                        o += 1;
                        hess[(a * dim + r, b * dim + c)] = v;
                        hess[(a * dim + c, b * dim + r)] = v;
                        hess[(b * dim + r, a * dim + c)] = v;
                        hess[(b * dim + c, a * dim + r)] = v;
                    }
                }
                blk += 1;
            }
        }
        grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_norm <= controls.tol
            || iterations >= controls.max_iter
            || (grad_norm <= 1e-3 * floor && grad_norm > 0.5 * previous)
        {
            break;
        }
        previous = grad_norm;
        iterations += 1;
        let step = newton_direction(&hess, &grad)?;
        let slope = crate::drm::dot(&step, &grad);
        let flat = slope <= 1e-13 * (1.0 + ll.abs());
        let mut t = 1.0;
        let mut accepted = false;
        while t > 1e-12 {
            for (s, &c) in act.iter().enumerate() {
                for d in 0..dim {
                    trial[c * dim + d] = coef[c * dim + d] + t * step[s * dim + d];
                }
            }
            let cand = evaluate(&trial, &mut trial_probs, &mut trial_p0, &mut eta);
            if cand.is_finite() && (cand >= ll + 1e-4 * t * slope || flat) {
                accepted = true;
                coef.copy_from_slice(&trial);
                std::mem::swap(&mut probs, &mut trial_probs);
                std::mem::swap(&mut p0, &mut trial_p0);
                ll = cand;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // At the floating-point floor the objective cannot register an
            // increase any more; accept if the gradient is already tiny.
            break;
        }
        if coef.iter().any(|c| c.abs() > COEFFICIENT_CAP) {
            return Err(OslsError::NonConvergence(format!(
                "logistic coefficients exceed {COEFFICIENT_CAP:e} (separation suspected) after \
                 {iterations} Newton steps"
            )));
        }
    }
    let total_weight: f64 = targets.iter().sum();
    if total_weight > 0.0 && ll > -SEPARATION_LOGLIK * total_weight {
        return Err(OslsError::NonConvergence(format!(
            "weighted logistic fit is (quasi) perfectly separating: log-likelihood {ll:e} with \
             total weight {total_weight}"
        )));
    }
    if grad_norm > controls.tol && grad_norm > floor {
        return Err(OslsError::NonConvergence(format!(
            "weighted logistic Newton stopped with gradient {grad_norm:e} after {iterations} steps"
        )));
    }
    Ok(LogitFit { coef, loglik: ll, grad_norm, iterations, p0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn design(xs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let rows: Vec<f64> = xs.iter().flat_map(|&x| [1.0, x]).collect();
        let outer = packed_outer_products(&rows, 2);
        (rows, outer)
    }

    #[test]
    fn exchangeable_classes_give_zero_coefficients() {
        let xs = [-1.0, 0.0, 2.0, -1.0, 0.0, 2.0];
        let (rows, outer) = design(&xs);
        let d = LogitDesign::new(&rows, 2, &outer);
        let targets = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let fit = fit_weighted_logit(&d, &targets, 1, &[true], &[0.3, -0.2], NewtonControls::default())
            .unwrap();
        assert!(fit.coef.iter().all(|c| c.abs() < 1e-10), "{:?}", fit.coef);
    }

    #[test]
    fn matches_closed_form_for_binary_intercept() {
        // intercept-only: log-odds equals log(total weight 1 / total weight 0)
        let xs = [0.0; 5];
        let rows: Vec<f64> = xs.iter().map(|_| 1.0).collect();
        let outer = packed_outer_products(&rows, 1);
        let d = LogitDesign::new(&rows, 1, &outer);
        let targets = [0.8, 0.2, 0.5, 0.5, 1.0, 0.0, 0.1, 0.9, 0.6, 0.4];
        let fit = fit_weighted_logit(&d, &targets, 1, &[true], &[0.0], NewtonControls::default())
            .unwrap();
        let w1: f64 = 0.2 + 0.5 + 0.0 + 0.9 + 0.4;
        let w0: f64 = 5.0 - w1;
        assert!((fit.coef[0] - (w1 / w0).ln()).abs() < 1e-10);
    }

    #[test]
    fn inactive_class_is_left_alone() {
        let xs = [-1.0, 0.5, 1.0, 2.0];
        let (rows, outer) = design(&xs);
        let d = LogitDesign::new(&rows, 2, &outer);
        let targets = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let fit = fit_weighted_logit(
            &d,
            &targets,
            2,
            &[true, false],
            &[0.0, 0.0, 7.0, 8.0],
            NewtonControls::default(),
        )
        .unwrap();
        assert_eq!(&fit.coef[2..], &[7.0, 8.0]);
        assert!(fit.grad_norm < 1e-9);
    }

    #[test]
    fn separation_is_reported() {
        let xs = [-2.0, -1.0, 1.0, 2.0];
        let (rows, outer) = design(&xs);
        let d = LogitDesign::new(&rows, 2, &outer);
        let targets = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let res = fit_weighted_logit(&d, &targets, 1, &[true], &[0.0, 0.0], NewtonControls {
            tol: 1e-9,
            max_iter: 500,
        });
        assert!(res.is_err());
    }
}
